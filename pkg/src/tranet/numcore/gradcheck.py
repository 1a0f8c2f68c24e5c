"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from tranet.numcore.tensor import Tensor, backward, get_dtype


class NonDeterministicError(RuntimeError):
    """The checked function returned different values for identical inputs."""


@dataclass(frozen=True)
class Probe:
    """One checked coordinate: parameter index, flat offset and the three derivative estimates."""

    param: int
    index: int
    analytic: float
    numeric: float
    forward: float  # (f(p+eps) - f(p)) / eps
    backward: float  # (f(p) - f(p-eps)) / eps
    loss: float

    @property
    def error(self) -> float:
        return abs(self.analytic - self.numeric) / max(1e-8, abs(self.analytic) + abs(self.numeric))

    def roundoff_bound(self, eps: float, ulps: int = 16) -> float:
        """Absolute error a central difference can pick up from ``ulps`` units of rounding in the loss."""
        return ulps * float(np.spacing(abs(self.loss))) / (2 * eps)

    def straddles_kink(self, eps: float) -> bool:
        """One-sided slopes disagree and the analytic value matches one of them."""
        tol = 2 * self.roundoff_bound(eps)
        if abs(self.forward - self.backward) <= tol:
            return False
        scale = max(abs(self.forward), abs(self.backward), 1e-12)
        return min(abs(self.analytic - self.forward), abs(self.analytic - self.backward)) <= 1e-4 * scale + tol


def finite_diff_probes(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    probes: int | None = None,
    seed: int = 0,
) -> list[Probe]:
    """Per-coordinate comparison behind :func:`finite_diff_check`."""
    if get_dtype() is not np.float64:
        raise RuntimeError("finite_diff_check requires float64 precision")
    for p in params:
        p.grad = None
    loss = f()
    again = f()
    if loss.data.tobytes() != again.data.tobytes():
        raise NonDeterministicError(
            f"f returned {loss.item()!r} then {again.item()!r} for identical parameters; fix its RNG"
        )
    backward(loss)
    base = loss.item()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    if probes is None or probes >= total:
        coords = np.arange(total)
    else:
        coords = np.random.default_rng(seed).choice(total, size=probes, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    out = []
    for flat in coords:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = int(flat - offsets[k])
        view = params[k].data.reshape(-1)
        orig = view[idx]
        view[idx] = orig + eps
        up = f().item()
        view[idx] = orig - eps
        down = f().item()
        view[idx] = orig
        out.append(
            Probe(
                param=k,
                index=idx,
                analytic=float(analytic[k].reshape(-1)[idx]),
                numeric=(up - down) / (2 * eps),
                forward=(up - base) / eps,
                backward=(base - down) / eps,
                loss=base,
            )
        )
    return out


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    probes: int | None = None,
    seed: int = 0,
) -> float:
    """Return the worst relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and rebuilds the scalar loss from the current
    values of ``params``.  The error for one coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.  When
    ``probes`` is given, that many coordinates are sampled uniformly over all
    parameter entries; otherwise every coordinate is checked.
    """
    return max((p.error for p in finite_diff_probes(f, params, eps, probes, seed)), default=0.0)
