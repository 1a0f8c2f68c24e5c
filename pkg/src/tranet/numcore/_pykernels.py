"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``.

Signatures and results match the compiled module exactly; only speed differs.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, stride, ho, wo):
    # (n, c, ho, wo, kh, kw) view over the input
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    win = _windows(xp, kh, kw, stride, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def col2im(cols, c, hp, wp, kh, kw, stride, ho, wo):
    n = cols.shape[0]
    dx = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    blocks = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += blocks[:, :, i, j]
    return dx


def maxpool_forward(x, k, stride, ho, wo):
    n, c, _, w = x.shape
    win = _windows(x, k, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0].copy()
    rows = np.arange(ho)[:, None] * stride + local // k
    cols = np.arange(wo)[None, :] * stride + local % k
    return out, (rows * w + cols).astype(np.int64)


def maxpool_backward(dout, arg, h, w):
    n, c = dout.shape[:2]
    dx = np.zeros((n * c, h * w), dtype=dout.dtype)
    flat_arg = arg.reshape(n * c, -1)
    flat_dout = dout.reshape(n * c, -1)
    rows = np.repeat(np.arange(n * c), flat_arg.shape[1])
    np.add.at(dx, (rows, flat_arg.ravel()), flat_dout.ravel())
    return dx.reshape(n, c, h, w)
