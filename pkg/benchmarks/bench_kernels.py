"""Compiled vs numpy kernel timings on shapes the toy network actually runs.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 64] [--json out.json]

Both backends are imported directly, so the comparison does not depend on
which one ``tranet.numcore.kernels`` selected at import.
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from tranet.numcore import _pykernels

try:
    from tranet.numcore import _ckernels
except ImportError:
    _ckernels = None


def cases(batch: int, rng: np.random.Generator):
    """(label, kernel name, args) triples; inputs are already padded as conv2d would pass them."""
    out = []
    for label, c, size, k, stride in (
        ("stem 7x7/2", 3, 64, 7, 2),
        ("unit 3x3", 16, 16, 3, 1),
        ("tail 3x3", 16, 8, 3, 1),
    ):
        pad = k // 2
        xp = rng.normal(size=(batch, c, size + 2 * pad, size + 2 * pad))
        ho = wo = (size + 2 * pad - k) // stride + 1
        out.append((f"im2col {label}", "im2col", (xp, k, k, stride, ho, wo)))
        cols = rng.normal(size=(batch, c * k * k, ho * wo))
        out.append((f"col2im {label}", "col2im", (cols, c, xp.shape[2], xp.shape[3], k, k, stride, ho, wo)))
    x = rng.normal(size=(batch, 8, 32, 32))
    out.append(("maxpool fwd 2x2", "maxpool_forward", (x, 2, 2, 16, 16)))
    _, arg = _pykernels.maxpool_forward(x, 2, 2, 16, 16)
    dout = rng.normal(size=(batch, 8, 16, 16))
    out.append(("maxpool bwd 2x2", "maxpool_backward", (dout, arg, 32, 32)))
    return out


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--json", help="also write results to this file")
    args = parser.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1

    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<24}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}  match")
    for label, name, call_args in cases(args.batch, rng):
        py_fn, c_fn = getattr(_pykernels, name), getattr(_ckernels, name)
        match = same(py_fn(*call_args), c_fn(*call_args))
        t_py = min(timeit.repeat(lambda: py_fn(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_c = min(timeit.repeat(lambda: c_fn(*call_args), number=1, repeat=args.repeat)) * 1e3
        rows.append({"kernel": label, "numpy_ms": t_py, "cython_ms": t_c, "speedup": t_py / t_c, "match": match})
        print(f"{label:<24}{t_py:>12.2f}{t_c:>12.2f}{t_py / t_c:>9.2f}x  {'yes' if match else 'NO'}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"batch": args.batch, "repeat": args.repeat, "results": rows}, fh, indent=2)
    return 0 if all(r["match"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
