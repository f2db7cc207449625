"""Pure numpy/Python versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, kh, kw, stride, pad):
    """(B, C, H, W) -> (C*kh*kw, B*Ho*Wo) patch matrix, zero padded."""
    B, C, H, W = x.shape
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    x = np.ascontiguousarray(x)
    sb, sc, sh, sw = x.strides
    win = as_strided(
        x,
        shape=(C, kh, kw, B, ho, wo),
        strides=(sc, sh, sw, sb, sh * stride, sw * stride),
        writeable=False,
    )
    return win.reshape(C * kh * kw, B * ho * wo)


def col2im(cols, shape, kh, kw, stride, pad):
    B, C, H, W = shape
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    dx = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    c6 = cols.reshape(C, kh, kw, B, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += c6[:, :, i, j]
    if pad:
        dx = dx[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(dx)


def levenshtein(a, b):
    a = list(a)
    b = list(b)
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j - 1] + (x != y), prev[j] + 1, cur[j - 1] + 1))
        prev = cur
    return prev[-1]
