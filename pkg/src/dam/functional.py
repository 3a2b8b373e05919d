"""Differentiable network primitives on unbatched ``C x spatial`` tensors.

Convolutions follow the cross-correlation convention (kernels are not
flipped) and zero padding.
"""

from __future__ import annotations

from functools import lru_cache
from itertools import product

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import Tensor, _result, _sigmoid, as_tensor


def _conv_nd(x: Tensor, w: Tensor, bias: Tensor | None, pad: tuple, stride: tuple, op: str) -> Tensor:
    nd = w.ndim - 2
    if x.ndim != nd + 1:
        raise ValueError(f"{op}: expected input with {nd + 1} axes, got shape {x.shape}")
    if x.shape[0] != w.shape[1]:
        raise ValueError(f"{op}: input has {x.shape[0]} channels, kernel expects {w.shape[1]}")
    ksize = w.shape[2:]
    for i in range(nd):
        if ksize[i] > x.shape[1 + i] + 2 * pad[i]:
            raise ValueError(
                f"{op}: kernel {tuple(ksize)} larger than padded input "
                f"{tuple(s + 2 * p for s, p in zip(x.shape[1:], pad))}"
            )
    xd, wd = x.data, w.data
    xp = np.pad(xd, [(0, 0)] + [(p, p) for p in pad]) if any(pad) else xd
    spatial = tuple(range(1, nd + 1))
    win = sliding_window_view(xp, ksize, axis=spatial)
    if any(s != 1 for s in stride):
        win = win[(slice(None),) + tuple(slice(None, None, s) for s in stride)]
    out_sp = win.shape[1 : 1 + nd]
    kaxes = tuple(range(1 + nd, 1 + 2 * nd))
    out = np.tensordot(wd, win, axes=((1,) + tuple(range(2, 2 + nd)), (0,) + kaxes))
    if bias is not None:
        out += bias.data.reshape((-1,) + (1,) * nd)

    def grad_fn(g):
        gw = np.tensordot(g, win, axes=(spatial, spatial))
        gcols = np.tensordot(wd, g, axes=((0,), (0,)))  # (C, *k, *out)
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for off in product(*(range(k) for k in ksize)):
            dst = (slice(None),) + tuple(
                slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, stride, out_sp)
            )
            gxp[dst] += gcols[(slice(None),) + off]
        if any(pad):
            gxp = gxp[(slice(None),) + tuple(slice(p, p + n) for p, n in zip(pad, xd.shape[1:]))]
        gb = g.sum(axis=spatial) if bias is not None else None
        return (np.ascontiguousarray(gxp), gw, gb)

    parents = (x, w, bias if bias is not None else Tensor(np.zeros(1, dtype=xd.dtype)))
    return _result(np.ascontiguousarray(out), parents, grad_fn, op)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, pad=(0, 0), stride=(1, 1)) -> Tensor:
    """``x``: (C_in, H, W), ``w``: (C_out, C_in, kh, kw) -> (C_out, H', W')."""
    if isinstance(pad, int):
        pad = (pad, pad)
    if isinstance(stride, int):
        stride = (stride, stride)
    return _conv_nd(x, w, bias, tuple(pad), tuple(stride), "conv2d")


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, pad="same") -> Tensor:
    """``x``: (C_in, D, H, W), ``w``: (C_out, C_in, kd, kh, kw); stride is always 1.

    ``pad="same"`` requires odd kernel extents and preserves (D, H, W).
    """
    if isinstance(pad, str):
        if pad != "same":
            raise ValueError(f"conv3d: unknown padding {pad!r}")
        if any(k % 2 == 0 for k in w.shape[2:]):
            raise ValueError(f"conv3d: same padding needs odd kernel extents, got {w.shape[2:]}")
        pad = tuple(k // 2 for k in w.shape[2:])
    return _conv_nd(x, w, bias, tuple(pad), (1, 1, 1), "conv3d")


def _norm_backward(g_hat: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axes) -> np.ndarray:
    n = int(np.prod([xhat.shape[a] for a in axes]))
    s1 = g_hat.sum(axis=axes, keepdims=True)
    s2 = (g_hat * xhat).sum(axis=axes, keepdims=True)
    return inv * (g_hat - s1 / n - xhat * s2 / n)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over every axis after the first.

    In training mode the running statistics are updated in place with an
    exponential moving average (unbiased variance).
    """
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(range(1, x.ndim))
    bshape = (c,) + (1,) * (x.ndim - 1)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        n = xd.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(c) * (n / max(n - 1, 1))
    else:
        mu = running_mean.reshape(bshape).astype(xd.dtype)
        var = running_var.reshape(bshape).astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data.reshape(bshape)
    out = gd * xhat + beta.data.reshape(bshape)

    def grad_fn(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        if training:
            gx = _norm_backward(g * gd, xhat, inv, axes)
        else:
            gx = g * gd * inv
        return gx, gg, gb

    return _result(out.astype(xd.dtype), (x, gamma, beta), grad_fn, "batchnorm")


def groupnorm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each group of ``C // groups`` channels over channels and space."""
    c = x.shape[0]
    if groups <= 0 or c % groups:
        raise ValueError(f"groupnorm: {groups} groups do not divide {c} channels")
    xd = x.data
    xg = xd.reshape(groups, -1)
    mu = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(xd.shape)
    bshape = (c,) + (1,) * (x.ndim - 1)
    gd = gamma.data.reshape(bshape)
    out = gd * xhat + beta.data.reshape(bshape)
    axes = tuple(range(1, x.ndim))

    def grad_fn(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gh = (g * gd).reshape(groups, -1)
        gx = _norm_backward(gh, xhat.reshape(groups, -1), inv, (1,)).reshape(xd.shape)
        return gx, gg, gb

    return _result(out.astype(xd.dtype), (x, gamma, beta), grad_fn, "groupnorm")


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int, dtype: str) -> np.ndarray:
    """Row i holds the align_corners=True bilinear weights of output i."""
    a = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        a[:, 0] = 1.0
        return a.astype(dtype)
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - lo
    a[np.arange(n_out), lo] = 1 - frac
    a[np.arange(n_out), lo + 1] += frac
    return a.astype(dtype)


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of (C, H, W) to (C, *size) with corners aligned."""
    h2, w2 = size
    if h2 < 1 or w2 < 1:
        raise ValueError(f"upsample_bilinear: bad output size {size}")
    _, h, w = x.shape
    if (h, w) == (h2, w2):
        return x
    ah = _interp_matrix(h, h2, x.dtype.str)
    aw = _interp_matrix(w, w2, x.dtype.str)
    out = ah @ x.data @ aw.T
    return _result(out, (x,), lambda g: (ah.T @ g @ aw,), "upsample_bilinear")


def bce_loss(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against {0, 1} targets.

    Evaluated as ``max(z, 0) - z*y + log1p(exp(-|z|))`` so large logits
    neither overflow nor lose the linear tail.
    """
    z = logits.data
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=z.dtype)
    if y.shape != z.shape:
        raise ValueError(f"bce_loss: logits {z.shape} vs target {y.shape}")
    if T.DEBUG and not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_loss: target values outside {0, 1}")
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def grad_fn(g):
        return ((_sigmoid(z) - y) * (g / n),)

    return _result(np.asarray(per.mean(), dtype=z.dtype), (logits,), grad_fn, "bce_loss")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over positions; class axis first.

    ``logits`` is ``(C,)`` with an integer label, or ``(C, *positions)`` with an
    integer label array of shape ``positions``.
    """
    z = logits.data
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != z.shape[1:]:
        raise ValueError(f"softmax_cross_entropy: logits {z.shape} vs labels {lab.shape}")
    c = z.shape[0]
    z2 = z.reshape(c, -1)
    flat = lab.reshape(-1)
    zmax = z2.max(axis=0, keepdims=True)
    lse = zmax + np.log(np.exp(z2 - zmax).sum(axis=0, keepdims=True))
    p = np.exp(z2 - lse)
    cols = np.arange(flat.size)
    n = flat.size
    loss = (lse[0] - z2[flat, cols]).mean()

    def grad_fn(g):
        d = p.copy()
        d[flat, cols] -= 1
        return ((d * (g / n)).reshape(z.shape),)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), grad_fn, "softmax_ce")


def area_downsample(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Average-pool a 2-D mask to ``size``; soft values are kept."""
    h, w = mask.shape
    h2, w2 = size
    if h % h2 or w % w2:
        raise ValueError(f"area_downsample: {mask.shape} not divisible to {size}")
    m = np.asarray(mask, dtype=np.float64)
    return m.reshape(h2, h // h2, w2, w // w2).mean(axis=(1, 3))


__all__ = [
    "conv2d",
    "conv3d",
    "batchnorm",
    "groupnorm",
    "upsample_bilinear",
    "bce_loss",
    "softmax_cross_entropy",
    "area_downsample",
    "as_tensor",
]
