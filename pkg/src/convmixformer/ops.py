"""Forward kernels and their vector-Jacobian products.

Every function accepts ``Tensor`` (or array-like) inputs and returns a new
``Tensor``.  Convolutions use the cross-correlation convention (no kernel
flip) with stride 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DimensionError, NonFiniteError, StateError, ValidationError
from .tensor import Tensor, as_tensor

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a} with {b}") from exc


# --- elementwise and structural -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, "add", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, "mul", (a, b), bw)


def sum_all(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        return (np.broadcast_to(g.reshape(()), x.shape).copy(),)

    return Tensor._from_op(np.array([x.data.sum()]), "sum", (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")

    def bw(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(x.data.reshape(shape), "reshape", (x,), bw)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.data.ndim}")
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return Tensor._from_op(np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,), bw)


def mean_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"axis {axis} out of range for rank {nd}")
    axis %= nd
    n = x.shape[axis]
    out = x.data.mean(axis=axis)
    if out.ndim == 0:
        out = out.reshape(1)

    def bw(g):
        g = g.reshape(x.shape[:axis] + x.shape[axis + 1:]) if nd > 1 else g.reshape(())
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return Tensor._from_op(out, "mean_axis", (x,), bw)


# --- activations and heads -------------------------------------------------------

def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return Tensor._from_op(x.data * cdf, "gelu", (x,), bw)


def affine(x, w, b) -> Tensor:
    """``x @ w.T + b`` over the last axis."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.data.ndim != 2:
        raise DimensionError(f"affine weight must be 2-D, got {w.shape}")
    d_out, d_in = w.shape
    if x.shape[-1] != d_in:
        raise DimensionError(f"affine expects last axis {d_in}, got {x.shape}")
    if b.shape != (d_out,):
        raise DimensionError(f"affine bias must have shape ({d_out},), got {b.shape}")
    out = x.data @ w.data.T + b.data

    def bw(g):
        flat_g = g.reshape(-1, d_out)
        flat_x = x.data.reshape(-1, d_in)
        return g @ w.data, flat_g.T @ flat_x, flat_g.sum(axis=0)

    return Tensor._from_op(out, "affine", (x, w, b), bw)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, "softmax", (x,), bw)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be [B, n], got {logits.shape}")
    bsz, n = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (bsz,):
        raise DimensionError(f"expected {bsz} labels, got {labels.shape[0]}")
    if labels.min() < 0 or labels.max() >= n:
        raise ValidationError(f"labels must lie in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(bsz)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g.reshape(()) / bsz),)

    return Tensor._from_op(np.array([loss]), "cross_entropy", (logits,), bw)


# --- normalization ------------------------------------------------------------------

def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm over D={d} needs gamma/beta of shape ({d},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(xhat * gamma.data + beta.data, "layernorm", (x, gamma, beta), bw)


@dataclass
class BatchNormState:
    """Running statistics; ``None`` until initialized."""

    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None
    momentum: float = 0.1

    @classmethod
    def initialized(cls, channels: int, momentum: float = 0.1) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum)

    @property
    def ready(self) -> bool:
        return self.mean is not None and self.var is not None

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            None if self.mean is None else self.mean.copy(),
            None if self.var is None else self.var.copy(),
            self.momentum,
        )


def batchnorm(x, gamma, beta, state: BatchNormState, mode: str = "train", eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of ``[B, C, H, W]``.

    In ``train`` mode batch statistics are used and ``state`` is updated in
    place (running variance uses the unbiased estimate).  In ``eval`` mode the
    running statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm expects [B, C, H, W], got {x.shape}")
    bsz, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm over C={c} needs gamma/beta of shape ({c},)")
    axes = (0, 2, 3)
    shp = (1, c, 1, 1)
    g_, b_ = gamma.data.reshape(shp), beta.data.reshape(shp)

    if mode == "eval":
        if not state.ready:
            raise StateError("batchnorm eval mode before running statistics were initialized")
        inv = 1.0 / np.sqrt(state.var.reshape(shp) + eps)
        xhat = (x.data - state.mean.reshape(shp)) * inv

        def bw_eval(g):
            return g * g_ * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return Tensor._from_op(xhat * g_ + b_, "batchnorm", (x, gamma, beta), bw_eval)

    if mode != "train":
        raise ConfigError(f"unknown batchnorm mode {mode!r}")
    count = bsz * h * w
    if count < 2:
        raise DimensionError(f"batchnorm train mode needs at least 2 values per channel, got {count}")
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    if not np.isfinite(var).all():
        raise NonFiniteError("batchnorm batch variance overflowed")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    if not state.ready:
        state.mean, state.var = np.zeros(c), np.ones(c)
    m = state.momentum
    state.mean = (1.0 - m) * state.mean + m * mu.reshape(c)
    state.var = (1.0 - m) * state.var + m * var.reshape(c) * (count / (count - 1))

    def bw_train(g):
        dxhat = g * g_
        dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor._from_op(xhat * g_ + b_, "batchnorm", (x, gamma, beta), bw_train)


# --- convolution --------------------------------------------------------------------

def resolve_padding(padding, kernel: tuple) -> tuple:
    if padding == "same":
        kh, kw = kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"'same' padding needs odd kernel extents, got {kernel}")
        return kh // 2, kw // 2
    if isinstance(padding, int):
        return padding, padding
    ph, pw = padding
    return int(ph), int(pw)


def conv2d(x, w, b, padding=(0, 0), groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation, stride 1.

    ``x``: [B, C_in, H, W]; ``w``: [C_out, C_in/groups, kH, kW]; ``b``: [C_out].
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    bsz, c_in, h, wd = x.shape
    c_out, cg, kh, kw = w.shape
    if groups < 1 or c_in % groups:
        raise ConfigError(f"groups={groups} does not divide C_in={c_in}")
    if c_out % groups:
        raise ConfigError(f"groups={groups} does not divide C_out={c_out}")
    if cg != c_in // groups:
        raise DimensionError(f"weight expects {cg * groups} input channels, input has {c_in}")
    if b.shape != (c_out,):
        raise DimensionError(f"conv bias must have shape ({c_out},), got {b.shape}")
    ph, pw = resolve_padding(padding, (kh, kw))
    ho, wo = h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {(kh, kw)} larger than padded input {(h + 2 * ph, wd + 2 * pw)}")
    og = c_out // groups

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    xg = xp.reshape(bsz, groups, cg, h + 2 * ph, wd + 2 * pw)
    wg = w.data.reshape(groups, og, cg, kh, kw)
    out = np.zeros((bsz, groups, og, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xg[:, :, :, i:i + ho, j:j + wo]
            out += np.einsum("bgchw,goc->bgohw", patch, wg[:, :, :, i, j])
    out = out.reshape(bsz, c_out, ho, wo) + b.data.reshape(1, c_out, 1, 1)

    def bw(g):
        gg = g.reshape(bsz, groups, og, ho, wo)
        gxp = np.zeros_like(xg)
        gw = np.empty_like(wg)
        for i in range(kh):
            for j in range(kw):
                patch = xg[:, :, :, i:i + ho, j:j + wo]
                gw[:, :, :, i, j] = np.einsum("bgohw,bgchw->goc", gg, patch)
                gxp[:, :, :, i:i + ho, j:j + wo] += np.einsum("bgohw,goc->bgchw", gg, wg[:, :, :, i, j])
        gx = gxp.reshape(bsz, c_in, h + 2 * ph, wd + 2 * pw)[:, :, ph:ph + h, pw:pw + wd]
        return np.ascontiguousarray(gx), gw.reshape(w.shape), g.sum(axis=(0, 2, 3))

    return Tensor._from_op(out, "conv2d", (x, w, b), bw)
