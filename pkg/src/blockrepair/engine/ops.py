"""Differentiable primitives over NCHW float arrays.

Reductions accumulate in float64 and round back to the input dtype. Matrix
products go through BLAS in the input dtype.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, InputError
from .tensor import Primitive, Tensor, apply

__all__ = [
    "add", "mul", "index", "reshape", "relu", "conv2d", "channel_affine",
    "max_pool2d", "avg_pool2d", "global_avg_pool", "linear", "softmax",
    "softmax_cross_entropy", "sum", "mean",
]


def _acc_sum(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1)
    return _acc_sum(g, axis=axes, keepdims=True).reshape(shape) if axes else g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast", axis="shape") from None


# elementwise --------------------------------------------------------------

def _add_fwd(a, b):
    return a + b, (a.shape, b.shape)


def _add_bwd(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


_ADD = Primitive("add", _add_fwd, _add_bwd)


def add(x: Tensor, y: Tensor, *, strict: bool = False) -> Tensor:
    """Broadcasting sum. ``strict=True`` demands identical shapes."""
    if strict and x.shape != y.shape:
        raise DimensionError(f"add: shapes {x.shape} and {y.shape} differ", axis="shape")
    _check_broadcast(x, y, "add")
    return apply(_ADD, x, y)


def _mul_fwd(a, b):
    return a * b, (a, b)


def _mul_bwd(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


_MUL = Primitive("mul", _mul_fwd, _mul_bwd)


def mul(x: Tensor, y: Tensor) -> Tensor:
    _check_broadcast(x, y, "mul")
    return apply(_MUL, x, y)


def _index_fwd(a, *, key):
    return np.array(a[key], copy=True), (a.shape, a.dtype, key)


def _index_bwd(ctx, g):
    shape, dtype, key = ctx
    out = np.zeros(shape, dtype=dtype)
    np.add.at(out, key, g)
    return (out,)


_INDEX = Primitive("index", _index_fwd, _index_bwd)


def index(x: Tensor, key) -> Tensor:
    return apply(_INDEX, x, key=key)


def _reshape_fwd(a, *, shape):
    return a.reshape(shape), a.shape


_RESHAPE = Primitive("reshape", _reshape_fwd, lambda ctx, g: (g.reshape(ctx),))


def reshape(x: Tensor, shape) -> Tensor:
    return apply(_RESHAPE, x, shape=tuple(shape))


def _relu_fwd(a):
    mask = a > 0
    return np.where(mask, a, np.zeros((), a.dtype)), mask


_RELU = Primitive("relu", _relu_fwd, lambda mask, g: (g * mask,))


def relu(x: Tensor) -> Tensor:
    return apply(_RELU, x)


def _affine_fwd(a, gamma, beta):
    shp = (1, -1) + (1,) * (a.ndim - 2)
    return a * gamma.reshape(shp) + beta.reshape(shp), (a, gamma, shp)


def _affine_bwd(ctx, g):
    a, gamma, shp = ctx
    axes = (0,) + tuple(range(2, a.ndim))
    return g * gamma.reshape(shp), _acc_sum(g * a, axis=axes), _acc_sum(g, axis=axes)


_AFFINE = Primitive("channel_affine", _affine_fwd, _affine_bwd)


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel ``x * scale[c] + shift[c]`` on axis 1."""
    if len(x.shape) < 2:
        raise DimensionError("channel_affine needs at least 2 axes", axis="channels")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"channel_affine: {c} channels but scale {scale.shape}, shift {shift.shape}", axis="channels")
    return apply(_AFFINE, x, scale, shift)


# convolution ----------------------------------------------------------------

def _out_size(n, k, stride, pad, dilation, axis):
    size = (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    if size < 1:
        raise DimensionError(f"{axis} {n} too small for kernel {k} (pad {pad}, dilation {dilation})", axis=axis)
    return size


def _windows(xp, kh, kw, stride, dilation, ho, wo):
    """View of shape (N, C, Ho, Wo, kh, kw) over a padded input."""
    ekh, ekw = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return win[..., ::dilation, ::dilation]


def _tap(arr, i, j, stride, dilation, ho, wo):
    """Strided slice of a padded map hit by kernel tap (i, j)."""
    r0, c0 = i * dilation, j * dilation
    return arr[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride]


def _pad(a, pad, value=0.0):
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _conv_fwd(x, w, *, stride, pad, dilation, groups):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    ho = _out_size(h, kh, stride, pad, dilation, "height")
    wo = _out_size(wd, kw, stride, pad, dilation, "width")
    xp = _pad(x, pad)
    if groups == 1:
        win = _windows(xp, kh, kw, stride, dilation, ho, wo)
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
        # one GEMM per example keeps each row's result independent of the batch
        out = cols.reshape(n, ho * wo, -1) @ w.reshape(o, -1).T
        out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
        return out, (x.shape, xp.shape, w, cols, stride, pad, dilation, groups, ho, wo)
    if groups == c and cg == 1 and o == c:
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += _tap(xp, i, j, stride, dilation, ho, wo) * w[:, 0, i, j].reshape(1, c, 1, 1)
        return out, (x.shape, xp, w, None, stride, pad, dilation, groups, ho, wo)
    win = _windows(xp, kh, kw, stride, dilation, ho, wo).reshape(n, groups, cg, ho, wo, kh, kw)
    wg = w.reshape(groups, o // groups, cg, kh, kw)
    out = np.einsum("ngchwij,gocij->ngohw", win, wg).reshape(n, o, ho, wo)
    return out, (x.shape, xp, w, None, stride, pad, dilation, groups, ho, wo)


def _conv_bwd(ctx, g):
    xshape, xp_or_shape, w, cols, stride, pad, dilation, groups, ho, wo = ctx
    n, c, h, wd = xshape
    o, cg, kh, kw = w.shape
    if groups == 1:
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp_or_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                _tap(gxp, i, j, stride, dilation, ho, wo)[...] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    elif cols is None and groups == c and cg == 1 and o == c:
        xp = xp_or_shape
        gw = np.zeros_like(w)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gw[:, 0, i, j] = _acc_sum(g * _tap(xp, i, j, stride, dilation, ho, wo), axis=(0, 2, 3))
                _tap(gxp, i, j, stride, dilation, ho, wo)[...] += g * w[:, 0, i, j].reshape(1, c, 1, 1)
    else:
        xp = xp_or_shape
        win = _windows(xp, kh, kw, stride, dilation, ho, wo).reshape(n, groups, cg, ho, wo, kh, kw)
        gg = g.reshape(n, groups, o // groups, ho, wo)
        gw = np.einsum("ngohw,ngchwij->gocij", gg, win).reshape(w.shape)
        wg = w.reshape(groups, o // groups, cg, kh, kw)
        gwin = np.einsum("ngohw,gocij->ngchwij", gg, wg).reshape(n, c, ho, wo, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                _tap(gxp, i, j, stride, dilation, ho, wo)[...] += gwin[..., i, j]
    gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
    return np.ascontiguousarray(gx), gw.astype(w.dtype, copy=False)


_CONV = Primitive("conv2d", _conv_fwd, _conv_bwd)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """2-d cross-correlation, NCHW input and OIHW kernel (I = C / groups)."""
    if len(x.shape) != 4:
        raise DimensionError(f"conv2d input must be NCHW, got shape {x.shape}", axis="rank")
    if len(kernel.shape) != 4:
        raise DimensionError(f"conv2d kernel must be OIHW, got shape {kernel.shape}", axis="rank")
    if stride < 1 or dilation < 1 or pad < 0 or groups < 1:
        raise InputError(f"conv2d: need stride>=1, dilation>=1, pad>=0, groups>=1 (got {stride}, {dilation}, {pad}, {groups})")
    c, o, cg = x.shape[1], kernel.shape[0], kernel.shape[1]
    if c % groups or o % groups or c // groups != cg:
        raise DimensionError(
            f"conv2d: input has {c} channels, kernel expects {cg * groups} ({cg} per group x {groups})", axis="channels"
        )
    return apply(_CONV, x, kernel, stride=stride, pad=pad, dilation=dilation, groups=groups)


# pooling ---------------------------------------------------------------------

def _pool_geometry(x, k, stride, pad):
    n, c, h, w = x.shape
    if pad > k // 2:
        raise DimensionError(f"pool pad {pad} exceeds half the window {k}", axis="window")
    return n, c, _out_size(h, k, stride, pad, 1, "height"), _out_size(w, k, stride, pad, 1, "width")


def _maxpool_fwd(x, *, k, stride, pad):
    n, c, ho, wo = _pool_geometry(x, k, stride, pad)
    xp = _pad(x, pad, value=-np.inf)
    win = _windows(xp, k, k, stride, 1, ho, wo).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (x.shape, xp.shape, arg, k, stride, pad, ho, wo)


def _maxpool_bwd(ctx, g):
    xshape, xpshape, arg, k, stride, pad, ho, wo = ctx
    gxp = np.zeros(xpshape, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            _tap(gxp, i, j, stride, 1, ho, wo)[...] += np.where(arg == i * k + j, g, 0)
    h, w = xshape[2:]
    return (np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w]),)


_MAXPOOL = Primitive("max_pool2d", _maxpool_fwd, _maxpool_bwd)


def max_pool2d(x: Tensor, k: int, stride: int | None = None, pad: int = 0) -> Tensor:
    return apply(_MAXPOOL, x, k=k, stride=stride or k, pad=pad)


def _avgpool_fwd(x, *, k, stride, pad):
    n, c, ho, wo = _pool_geometry(x, k, stride, pad)
    xp = _pad(x, pad)
    ones = _pad(np.ones((1, 1) + x.shape[2:], dtype=np.float64), pad)
    count = _windows(ones, k, k, stride, 1, ho, wo).sum(axis=(-1, -2))
    total = np.zeros((n, c, ho, wo), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            total += _tap(xp, i, j, stride, 1, ho, wo)
    return (total / count).astype(x.dtype), (x.shape, xp.shape, count, k, stride, pad, ho, wo)


def _avgpool_bwd(ctx, g):
    xshape, xpshape, count, k, stride, pad, ho, wo = ctx
    gs = (g / count).astype(g.dtype)
    gxp = np.zeros(xpshape, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            _tap(gxp, i, j, stride, 1, ho, wo)[...] += gs
    h, w = xshape[2:]
    return (np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w]),)


_AVGPOOL = Primitive("avg_pool2d", _avgpool_fwd, _avgpool_bwd)


def avg_pool2d(x: Tensor, k: int, stride: int | None = None, pad: int = 0) -> Tensor:
    """Average pool; padded cells are excluded from the divisor."""
    return apply(_AVGPOOL, x, k=k, stride=stride or k, pad=pad)


def _gap_fwd(x):
    return np.mean(x, axis=(2, 3), dtype=np.float64).astype(x.dtype), x.shape


def _gap_bwd(shape, g):
    n, c, h, w = shape
    return (np.broadcast_to((g / (h * w))[:, :, None, None], shape).astype(g.dtype),)


_GAP = Primitive("global_avg_pool", _gap_fwd, _gap_bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC spatial mean."""
    if len(x.shape) != 4:
        raise DimensionError(f"global_avg_pool needs NCHW, got {x.shape}", axis="rank")
    return apply(_GAP, x)


# dense ---------------------------------------------------------------------------

def _linear_fwd(x, w, b):
    return (x[:, None, :] @ w.T)[:, 0] + b, (x, w)


def _linear_bwd(ctx, g):
    x, w = ctx
    return g @ w, g.T @ x, _acc_sum(g, axis=0)


_LINEAR = Primitive("linear", _linear_fwd, _linear_bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out, in)."""
    if len(x.shape) != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}", axis="features")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}", axis="features")
    return apply(_LINEAR, x, weight, bias)


def _stable_softmax(a, axis, temperature):
    z = (a - a.max(axis=axis, keepdims=True)) / temperature
    e = np.exp(z.astype(np.float64))
    return (e / e.sum(axis=axis, keepdims=True)).astype(a.dtype)


def _softmax_fwd(a, *, axis, temperature):
    y = _stable_softmax(a, axis, temperature)
    return y, (y, axis, temperature)


def _softmax_bwd(ctx, g):
    y, axis, t = ctx
    inner = _acc_sum(g * y, axis=axis, keepdims=True)
    return (y * (g - inner) / t,)


_SOFTMAX = Primitive("softmax", _softmax_fwd, _softmax_bwd)


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    return apply(_SOFTMAX, x, axis=axis, temperature=float(temperature))


def _xent_fwd(logits, *, labels):
    n = logits.shape[0]
    shifted = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(n), labels]
    probs = np.exp(shifted - logz[:, None])
    return np.asarray(nll.mean(), dtype=logits.dtype), (probs, labels, logits.dtype)


def _xent_bwd(ctx, g):
    probs, labels, dtype = ctx
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return ((d * (float(g) / n)).astype(dtype),)


_XENT = Primitive("softmax_cross_entropy", _xent_fwd, _xent_bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood and the (non-differentiable) probabilities."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(logits.shape) != 2:
        raise DimensionError(f"logits must be N x C, got {logits.shape}", axis="rank")
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} logit rows", axis="batch")
    if n == 0:
        raise InputError("empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise InputError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    loss = apply(_XENT, logits, labels=labels)
    shifted = logits.data.astype(np.float64) - logits.data.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    return loss, probs.astype(logits.dtype)


def _sum_fwd(a):
    return np.asarray(np.sum(a, dtype=np.float64), dtype=a.dtype), a.shape


_SUM = Primitive("sum", _sum_fwd, lambda shape, g: (np.broadcast_to(g, shape).copy(),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return apply(_SUM, x)


def _mean_fwd(a):
    return np.asarray(np.mean(a, dtype=np.float64), dtype=a.dtype), a.shape


_MEAN = Primitive("mean", _mean_fwd, lambda shape, g: (np.broadcast_to(g / np.prod(shape), shape).astype(g.dtype),))


def mean(x: Tensor) -> Tensor:
    return apply(_MEAN, x)
