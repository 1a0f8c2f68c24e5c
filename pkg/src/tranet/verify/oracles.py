"""Brute-force reference implementations.

Everything here is written with explicit Python loops and scalar math and
shares no code with the engine, so it can serve as an independent check.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d(x, w, b, stride, padding):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for co in range(cout):
            for r in range(ho):
                for q in range(wo):
                    acc = 0.0 if b is None else float(b[co])
                    for ci in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                y = r * stride + i - padding
                                xx = q * stride + j - padding
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += float(x[bi, ci, y, xx]) * float(w[co, ci, i, j])
                    out[bi, co, r, q] = acc
    return out


def fully_connected(x, w, b):
    n, din = x.shape
    dout = w.shape[0]
    out = np.zeros((n, dout))
    for i in range(n):
        for o in range(dout):
            acc = 0.0 if b is None else float(b[o])
            for k in range(din):
                acc += float(x[i, k]) * float(w[o, k])
            out[i, o] = acc
    return out


def pool2d(x, k, stride, kind):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for bi in range(n):
        for ch in range(c):
            for r in range(ho):
                for q in range(wo):
                    vals = [float(x[bi, ch, r * stride + i, q * stride + j]) for i in range(k) for j in range(k)]
                    out[bi, ch, r, q] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return out


def sigmoid(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v)) if v >= 0 else math.exp(v) / (1.0 + math.exp(v))


def _mlp(vec, w1, w2):
    hidden = [max(0.0, sum(float(w1[o, k]) * vec[k] for k in range(len(vec)))) for o in range(w1.shape[0])]
    return [sum(float(w2[o, k]) * hidden[k] for k in range(len(hidden))) for o in range(w2.shape[0])]


def se_block(u, w1, w2, residual):
    """Squeeze (spatial mean), excite (relu then sigmoid bottleneck), rescale, optional skip."""
    n, c, h, w = u.shape
    out = np.zeros_like(u, dtype=float)
    for bi in range(n):
        z = []
        for ch in range(c):
            total = 0.0
            for i in range(h):
                for j in range(w):
                    total += float(u[bi, ch, i, j])
            z.append(total / (h * w))
        s = [sigmoid(v) for v in _mlp(z, w1, w2)]
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    val = s[ch] * float(u[bi, ch, i, j])
                    out[bi, ch, i, j] = val + float(u[bi, ch, i, j]) if residual else val
    return out


def cbam_channel_weights(f, w1, w2):
    n, c, h, w = f.shape
    out = np.zeros((n, c, 1, 1))
    for bi in range(n):
        avg = [sum(float(f[bi, ch, i, j]) for i in range(h) for j in range(w)) / (h * w) for ch in range(c)]
        mx = [max(float(f[bi, ch, i, j]) for i in range(h) for j in range(w)) for ch in range(c)]
        a = _mlp(avg, w1, w2)
        m = _mlp(mx, w1, w2)
        for ch in range(c):
            out[bi, ch, 0, 0] = sigmoid(a[ch] + m[ch])
    return out


def cbam_spatial_weights(f, conv_w, combine="add"):
    """conv_w is (1, 1, k, k) for ``add`` and (1, 2, k, k) for ``concat``."""
    n, c, h, w = f.shape
    k = conv_w.shape[-1]
    pad = k // 2
    avg = np.zeros((n, 1, h, w))
    mx = np.zeros((n, 1, h, w))
    for bi in range(n):
        for i in range(h):
            for j in range(w):
                vals = [float(f[bi, ch, i, j]) for ch in range(c)]
                avg[bi, 0, i, j] = sum(vals) / c
                mx[bi, 0, i, j] = max(vals)
    if combine == "add":
        pre = conv2d(avg, conv_w, None, 1, pad) + conv2d(mx, conv_w, None, 1, pad)
    else:
        pre = conv2d(np.concatenate([avg, mx], axis=1), conv_w, None, 1, pad)
    return np.vectorize(sigmoid)(pre).reshape(n, 1, h, w)


def cbam_block(f, w1, w2, conv_w, enable_channel=True, enable_spatial=True, residual=False, combine="add"):
    g = f * cbam_channel_weights(f, w1, w2) if enable_channel else f
    h = g * cbam_spatial_weights(g, conv_w, combine) if enable_spatial else g
    return h + f if residual else h


def bce(logits, labels) -> float:
    """Mean binary cross-entropy evaluated with mpmath at 50 digits."""
    import mpmath

    mpmath.mp.dps = 50
    total = mpmath.mpf(0)
    flat_x = np.asarray(logits, dtype=float).ravel()
    flat_y = np.asarray(labels, dtype=float).ravel()
    for x, y in zip(flat_x, flat_y):
        p = 1 / (1 + mpmath.exp(-mpmath.mpf(float(x))))
        total += -(y * mpmath.log(p) + (1 - y) * mpmath.log(1 - p))
    return float(total / len(flat_x))


def confusion_counts(pred, label):
    tp = fp = fn = tn = 0
    for p, y in zip(pred, label):
        if p and y:
            tp += 1
        elif p and not y:
            fp += 1
        elif not p and y:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def f1_accuracy(pred, label):
    """Percent F1 and accuracy from one AU's boolean predictions and labels."""
    tp, fp, fn, tn = confusion_counts(pred, label)
    if tp + fp == 0 or tp + fn == 0:
        f1 = 0.0
    else:
        p = tp / (tp + fp)
        r = tp / (tp + fn)
        f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return 100.0 * f1, 100.0 * (tp + tn) / len(pred)


def similarity_from_two_points(src, dst):
    """(scale, angle, tx, ty) of the similarity sending src[0]->dst[0] and src[1]->dst[1]."""
    (x1, y1), (x2, y2) = src
    (u1, v1), (u2, v2) = dst
    scale = math.hypot(u2 - u1, v2 - v1) / math.hypot(x2 - x1, y2 - y1)
    angle = math.atan2(v2 - v1, u2 - u1) - math.atan2(y2 - y1, x2 - x1)
    c, s = scale * math.cos(angle), scale * math.sin(angle)
    tx = u1 - (c * x1 - s * y1)
    ty = v1 - (s * x1 + c * y1)
    return scale, angle, tx, ty


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """Explicit loops over samples and groups."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    per = c // groups
    out = np.empty_like(x)
    for i in range(n):
        for g in range(groups):
            block = x[i, g * per : (g + 1) * per]
            vals = [float(v) for v in block.ravel()]
            m = math.fsum(vals) / len(vals)
            var = math.fsum((v - m) ** 2 for v in vals) / len(vals)
            for k in range(per):
                ch = g * per + k
                out[i, ch] = (x[i, ch] - m) / math.sqrt(var + eps) * gamma[ch] + beta[ch]
    return out
