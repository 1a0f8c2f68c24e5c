"""Differentiable primitives over :class:`~tranet.numcore.tensor.Tensor`.

Spatial ops use NCHW layout.  Output extents follow floor arithmetic,
``(H + 2*padding - k) // stride + 1``, and must be at least one.
"""

from __future__ import annotations

import numpy as np

from tranet.numcore import kernels
from tranet.numcore.tensor import ShapeError, Tensor, get_dtype

__all__ = [
    "add",
    "avg_pool2d",
    "bce_with_logits",
    "channel_max",
    "channel_mean",
    "concat_channels",
    "constant",
    "conv2d",
    "flatten",
    "fully_connected",
    "global_avg_pool",
    "global_max_pool",
    "group_norm",
    "max_pool2d",
    "mean",
    "mul",
    "relu",
    "reshape",
    "sigmoid",
    "sum",
    "upsample_nearest2x",
]


def constant(values) -> Tensor:
    """Wrap an array as a tensor that never receives a gradient."""
    return Tensor(values, requires_grad=False)


def _require_rank(x: Tensor, rank: int, op: str, what: str = "input") -> None:
    if x.ndim != rank:
        raise ShapeError(f"{op}: {what} must have rank {rank}, got shape {x.shape}")


def _out_extent(size: int, k: int, stride: int, padding: int, op: str, dim: str) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"{op}: window {k} larger than padded {dim} extent {size + 2 * padding}")
    return span // stride + 1


# ---------------------------------------------------------------------------
# pointwise


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    if len(a) != len(b):
        raise ShapeError(f"{op}: rank mismatch {a} vs {b}; only size-1 expansion is supported")
    out = []
    for axis, (da, db) in enumerate(zip(a, b)):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: dimension {axis} mismatch ({da} vs {db}) in shapes {a} and {b}")
    return tuple(out)


def _unexpand(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "add")
    out = a.data + b.data

    def backward(g):
        return _unexpand(g, a.shape), _unexpand(g, b.shape)

    return Tensor._from_op(out, (a, b), "add", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.data, b.data
    out = av * bv

    def backward(g):
        ga = _unexpand(g * bv, a.shape) if a.requires_grad else None
        gb = _unexpand(g * av, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), "mul", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(out, (x,), "relu", backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return Tensor._from_op(s, (x,), "sigmoid", backward)


# ---------------------------------------------------------------------------
# shape and reductions


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(src),)

    return Tensor._from_op(out, (x,), "reshape", backward)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        return (np.full(x.shape, g, dtype=x.data.dtype),)

    return Tensor._from_op(out, (x,), "sum", backward)


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.sum() / n, dtype=x.data.dtype)

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.data.dtype),)

    return Tensor._from_op(out, (x,), "mean", backward)


def concat_channels(tensors: list[Tensor]) -> Tensor:
    for t in tensors:
        _require_rank(t, 4, "concat_channels")
        if t.shape[0] != tensors[0].shape[0] or t.shape[2:] != tensors[0].shape[2:]:
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {tensors[0].shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return Tensor._from_op(out, tuple(tensors), "concat_channels", backward)


# ---------------------------------------------------------------------------
# dense and convolution


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y = x @ weight.T + bias`` for ``x`` of shape (N, Din) and ``weight`` of shape (Dout, Din)."""
    _require_rank(x, 2, "fully_connected")
    _require_rank(weight, 2, "fully_connected", "weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fully_connected: input features Din={x.shape[1]} but weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"fully_connected: bias shape {bias.shape} != ({weight.shape[0]},) (Dout)")
    xv, wv = x.data, weight.data
    out = xv @ wv.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wv if x.requires_grad else None
        gw = g.T @ xv if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, "fully_connected", backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an (N, Cin, H, W) input with a (Cout, Cin, kh, kw) kernel."""
    _require_rank(x, 4, "conv2d")
    _require_rank(weight, 4, "conv2d", "weight")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels Cin={cin} but weight expects {wcin}")
    if kh < 1 or kw < 1:
        raise ShapeError(f"conv2d: kernel extents must be >= 1, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},) (Cout)")
    ho = _out_extent(h, kh, stride, padding, "conv2d", "height")
    wo = _out_extent(w, kw, stride, padding, "conv2d", "width")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xp = np.ascontiguousarray(xp)
    hp, wp = xp.shape[2:]
    cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def backward(g):
        g = np.ascontiguousarray(g.reshape(n, cout, ho * wo))
        gw = None
        if weight.requires_grad:
            # batched GEMMs beat one transposed GEMM unless the spatial extent is tiny
            if ho * wo >= 16:
                gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
            else:
                gw = np.tensordot(g, cols, axes=([0, 2], [0, 2]))
            gw = gw.reshape(weight.shape)
        gb = g.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray(np.matmul(wmat.T, g))
            gxp = kernels.col2im(gcols, cin, hp, wp, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, "conv2d", backward)


# ---------------------------------------------------------------------------
# pooling


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, shape (N, C, 1, 1)."""
    _require_rank(x, 4, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.sum(axis=(2, 3), keepdims=True) / (h * w)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return Tensor._from_op(out, (x,), "global_avg_pool", backward)


def _argmax_route(values: np.ndarray, axis: int):
    idx = np.argmax(values, axis=axis)
    taken = np.take_along_axis(values, np.expand_dims(idx, axis), axis=axis)
    return taken, idx


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial maximum, shape (N, C, 1, 1); gradient goes to the first maximum."""
    _require_rank(x, 4, "global_max_pool")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    taken, idx = _argmax_route(flat, 2)
    out = taken.reshape(n, c, 1, 1)

    def backward(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=2)
        return (gx.reshape(x.shape),)

    return Tensor._from_op(out, (x,), "global_max_pool", backward)


def channel_mean(x: Tensor) -> Tensor:
    """Mean over channels, shape (N, 1, H, W)."""
    _require_rank(x, 4, "channel_mean")
    c = x.shape[1]
    out = x.data.sum(axis=1, keepdims=True) / c

    def backward(g):
        return (np.broadcast_to(g / c, x.shape).copy(),)

    return Tensor._from_op(out, (x,), "channel_mean", backward)


def channel_max(x: Tensor) -> Tensor:
    """Max over channels, shape (N, 1, H, W); gradient goes to the first maximal channel."""
    _require_rank(x, 4, "channel_max")
    out, idx = _argmax_route(x.data, 1)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[:, None], g, axis=1)
        return (gx,)

    return Tensor._from_op(out, (x,), "channel_max", backward)


def max_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    _require_rank(x, 4, "max_pool2d")
    stride = stride or k
    n, c, h, w = x.shape
    ho = _out_extent(h, k, stride, 0, "max_pool2d", "height")
    wo = _out_extent(w, k, stride, 0, "max_pool2d", "width")
    out, arg = kernels.maxpool_forward(np.ascontiguousarray(x.data), k, stride, ho, wo)

    def backward(g):
        return (kernels.maxpool_backward(np.ascontiguousarray(g), arg, h, w),)

    return Tensor._from_op(out, (x,), "max_pool2d", backward)


def avg_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    _require_rank(x, 4, "avg_pool2d")
    stride = stride or k
    n, c, h, w = x.shape
    ho = _out_extent(h, k, stride, 0, "avg_pool2d", "height")
    wo = _out_extent(w, k, stride, 0, "avg_pool2d", "width")
    xv = np.ascontiguousarray(x.data)
    cols = kernels.im2col(xv.reshape(n * c, 1, h, w), k, k, stride, ho, wo)
    out = (cols.sum(axis=1) / (k * k)).reshape(n, c, ho, wo)

    def backward(g):
        gcols = np.broadcast_to(g.reshape(n * c, 1, ho * wo) / (k * k), (n * c, k * k, ho * wo))
        gx = kernels.col2im(np.ascontiguousarray(gcols), 1, h, w, k, k, stride, ho, wo)
        return (gx.reshape(x.shape),)

    return Tensor._from_op(out, (x,), "avg_pool2d", backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    _require_rank(x, 4, "upsample_nearest2x")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), "upsample_nearest2x", backward)


# ---------------------------------------------------------------------------
# normalization


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over each group of ``C // groups`` channels and all positions, then per-channel affine."""
    _require_rank(x, 4, "group_norm")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: channels C={c} not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},) (C)")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    centred = xg - mu
    inv = 1.0 / np.sqrt((centred * centred).mean(axis=2, keepdims=True) + eps)
    xhat = (centred * inv).reshape(n, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(n, c, h, w)
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), "group_norm", backward)


# ---------------------------------------------------------------------------
# loss


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets.

    Uses ``max(x, 0) - x*y + log1p(exp(-|x|))`` so large logits never overflow.
    """
    y = np.asarray(targets, dtype=get_dtype())
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {y.shape} vs logits {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_with_logits: labels must be 0 or 1")
    x = logits.data
    count = x.size
    out = np.asarray((np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).sum() / count, dtype=x.dtype)

    def backward(g):
        return (g * (_sigmoid(x) - y) / count,)

    return Tensor._from_op(out, (logits,), "bce_with_logits", backward)
