"""Differentiable primitives.

Each function computes its forward value with numpy and registers a closure
that maps the output gradient to input gradients.  Non-Tensor operands are
treated as constants.
"""

from __future__ import annotations

import numpy as np

from abm import kernels
from abm.tensor import DegenerateMaskError, ShapeError, Tensor, make_result


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a Python scalar without promoting the dtype."""
    s = a.dtype.type(s)
    return make_result(a.data * s, (a,), lambda g: (g * s,))


# ---------------------------------------------------------------------------
# nonlinearities


def _tanh_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (1 - y * y)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    # looked up at call time so tests can substitute a faulty rule
    return make_result(y, (x,), lambda g: (_tanh_backward(y, g),))


def sigmoid(x: Tensor) -> Tensor:
    half = x.dtype.type(0.5)
    y = half * (np.tanh(half * x.data) + 1)
    return make_result(y, (x,), lambda g: (g * y * (1 - y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``numpy.matmul``."""
    a = _t(a)
    b = _t(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                # fold the batch into one GEMM
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(ad @ bd, (a, b), bw)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    n = x.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    inv = x.dtype.type(1.0 / n)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, shape),)

    return make_result(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if _is_fancy(index):
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return make_result(x.data[index], (x,), bw)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return make_result(table.data[ids], (table,), bw)


def take_along_axis(x: Tensor, idx, axis: int) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape
    ax = axis % x.ndim

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        full = list(np.indices(idx.shape, sparse=True))
        full[ax] = idx
        np.add.at(out, tuple(full), g)
        return (out,)

    return make_result(np.take_along_axis(x.data, idx, axis=axis), (x,), bw)


def maxout(x: Tensor, pieces: int = 2) -> Tensor:
    """Max over consecutive groups of ``pieces`` along the last axis."""
    d = x.shape[-1]
    if d % pieces:
        raise ShapeError(f"maxout: last extent {d} not divisible by {pieces}")
    grouped = x.data.reshape(x.shape[:-1] + (d // pieces, pieces))
    arg = grouped.argmax(axis=-1)
    out = np.take_along_axis(grouped, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gg = np.zeros_like(grouped)
        np.put_along_axis(gg, arg[..., None], g[..., None], axis=-1)
        return (gg.reshape(x.shape),)

    return make_result(out, (x,), bw)


# ---------------------------------------------------------------------------
# softmax family


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p, (x,), bw)


def softmax_masked(logits: Tensor, mask, axis: int = -1) -> Tensor:
    """Softmax restricted to positions where ``mask`` is nonzero.

    Masked positions get probability exactly 0 and receive no gradient.
    """
    m = np.broadcast_to(np.asarray(mask) != 0, logits.shape)
    if not m.any(axis=axis).all():
        raise DegenerateMaskError("softmax_masked: a slice along the softmax axis is fully masked")
    z = np.where(m, logits.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(m, np.exp(z), 0).astype(logits.dtype)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p, (logits,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw)


# ---------------------------------------------------------------------------
# convolution, pooling, normalization


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, flatten: bool = False) -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``(C, H, W)`` or ``(B, C, H, W)``; ``kernel`` is ``(O, C, kh, kw)``.
    With ``flatten=True`` the result is laid out as ``(B, H'*W', O)``.
    """
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D, got {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride={stride} / padding={padding}")
    single = x.ndim == 3
    X = x.data[None] if single else x.data
    B, C, H, W = X.shape
    O, C2, kh, kw = kernel.shape
    if C != C2:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    ho, wo = conv_output_size(H, kh, stride, padding), conv_output_size(W, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent < 1 for input {x.shape}, kernel {kernel.shape}")
    P = ho * wo
    cols = kernels.im2col(X, kh, kw, stride, padding)  # (C*kh*kw, B*P)
    wm = kernel.data.reshape(O, -1)
    if flatten:
        out = (cols.T @ wm.T).reshape(B, P, O)
        if bias is not None:
            out = out + bias.data
    else:
        out = (wm @ cols).reshape(O, B, ho, wo).transpose(1, 0, 2, 3)
        if bias is not None:
            out = out + bias.data[:, None, None]
        if single:
            out = out[0]
        out = np.ascontiguousarray(out)
    xshape = X.shape

    def bw(g):
        if flatten:
            g2 = g.reshape(B * P, O).T
        else:
            gg = g[None] if single else g
            g2 = gg.transpose(1, 0, 2, 3).reshape(O, B * P)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (g2 @ cols.T).reshape(kernel.shape)
        if x.requires_grad:
            gx = kernels.col2im(wm.T @ g2, xshape, kh, kw, stride, padding)
            if single:
                gx = gx[0]
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_result(out, inputs, bw)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling over the last two axes (extents must divide)."""
    *lead, H, W = x.shape
    if H % size or W % size:
        raise ShapeError(f"avg_pool2d: extents {(H, W)} not divisible by {size}")
    shp = tuple(lead) + (H // size, size, W // size, size)
    out = x.data.reshape(shp).mean(axis=(-3, -1))
    inv = x.dtype.type(1.0 / (size * size))

    def bw(g):
        gg = np.broadcast_to((g * inv)[..., :, None, :, None], shp)
        return (gg.reshape(x.shape),)

    return make_result(out, (x,), bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mask: np.ndarray,
               running_mean: np.ndarray, running_var: np.ndarray, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over valid (mask != 0) positions of ``(B, C, H, W)``.

    The output is multiplied by the mask, so padded cells stay exactly zero.
    In training mode batch statistics are used (and differentiated through)
    and the running buffers are updated in place.
    """
    xd = x.data
    m = mask.astype(xd.dtype)[:, None]  # (B,1,H,W)
    axes = (0, 2, 3)
    if training:
        n = m.sum() * 1.0
        if n == 0:
            raise DegenerateMaskError("batch_norm: no valid positions")
        mu = (xd * m).sum(axis=axes) / n
        xc = xd - mu[:, None, None]
        var = ((xc * xc) * m).sum(axis=axes) / n
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        n = None
        xc = xd - running_mean.astype(xd.dtype)[:, None, None]
        var = running_var.astype(xd.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = xc * inv_std[:, None, None]
    gd, bd = gamma.data[:, None, None], beta.data[:, None, None]
    out = (xhat * gd + bd) * m

    def bw(g):
        gm = g * m
        ggamma = (gm * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = gm.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = gm * gd
            if training:
                s1 = dxhat.sum(axis=axes)
                s2 = (dxhat * xhat).sum(axis=axes)
                gx = (inv_std[:, None, None] / n) * (
                    n * dxhat - (s1[:, None, None] + xhat * s2[:, None, None]) * m
                )
            else:
                gx = dxhat * inv_std[:, None, None]
        return gx, ggamma, gbeta

    return make_result(out.astype(xd.dtype), (x, gamma, beta), bw)


def mask_pool(mask: np.ndarray, size: int = 2) -> np.ndarray:
    """Downsample a ``(B, H, W)`` validity mask with logical OR."""
    B, H, W = mask.shape
    return mask.reshape(B, H // size, size, W // size, size).max(axis=(2, 4))
