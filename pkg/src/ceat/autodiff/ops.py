"""Neural-network primitives built on the tape.

Softmax, GELU and layer norm dispatch to the kernel backend; the rest are
plain numpy with hand-written backward rules.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, _make, abs_, mean, sub

LN_EPS = 1e-5


def _rows(x: np.ndarray, axis: int) -> tuple[np.ndarray, tuple[int, ...], int]:
    moved = np.moveaxis(x, axis, -1)
    shape = moved.shape
    return np.ascontiguousarray(moved.reshape(-1, shape[-1])), shape, axis


def _unrows(r: np.ndarray, shape, axis: int) -> np.ndarray:
    return np.moveaxis(r.reshape(shape), -1, axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    rows, shape, axis = _rows(x.data, axis)
    y_rows = kernels.softmax_forward(rows)
    out = np.ascontiguousarray(_unrows(y_rows, shape, axis))

    def bwd(g):
        g_rows, _, _ = _rows(g, axis)
        return (_unrows(kernels.softmax_backward(y_rows, g_rows), shape, axis),)

    return _make(out, (x,), bwd, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bwd(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bwd, "log_softmax")


def masked_log_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Log-softmax over the last axis restricted to entries where ``mask``.

    Masked-out positions yield 0 and receive no gradient. Rows with an
    empty mask are all zero.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    xd = x.data
    big = np.where(mask, xd, -np.inf)
    m = big.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(np.where(mask, xd - m, 0.0)), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    safe = np.where(s > 0, s, 1.0)
    lse = m + np.log(safe)
    out = np.where(mask, xd - lse, 0.0).astype(xd.dtype, copy=False)
    probs = e / safe

    def bwd(g):
        gm = np.where(mask, g, 0.0)
        return ((gm - probs * gm.sum(axis=-1, keepdims=True)).astype(xd.dtype, copy=False),)

    return _make(out, (x,), bwd, "masked_log_softmax")


def gelu(x: Tensor) -> Tensor:
    flat = np.ascontiguousarray(x.data.reshape(-1))
    out = kernels.gelu_forward(flat).reshape(x.shape)

    def bwd(g):
        return (kernels.gelu_backward(flat, np.ascontiguousarray(g.reshape(-1))).reshape(x.shape),)

    return _make(out, (x,), bwd, "gelu")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply the affine terms."""
    w = x.shape[-1]
    if gamma.shape != (w,) or beta.shape != (w,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs width {w}")
    rows = np.ascontiguousarray(x.data.reshape(-1, w))
    out, xhat, rstd = kernels.layernorm_forward(rows, gamma.data, beta.data, eps)

    def bwd(g):
        gx, gg, gb = kernels.layernorm_backward(
            np.ascontiguousarray(g.reshape(-1, w)), xhat, rstd, gamma.data
        )
        return gx.reshape(x.shape), gg, gb

    return _make(out.reshape(x.shape), (x, gamma, beta), bwd, "layer_norm")


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: {a.shape} vs {b.shape}")
    return mean(abs_(sub(a, b)))


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = xd / denom

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        gx = np.where(norm > eps, (g - out * dot) / denom, g / denom)
        return (gx.astype(xd.dtype, copy=False),)

    return _make(out, (x,), bwd, "l2_normalize")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over all elements of the binary cross-entropy on raw logits."""
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype)
    if t.shape != x.shape:
        raise ShapeError(f"bce_with_logits: targets {t.shape} vs logits {x.shape}")
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    out = np.asarray(per.sum() / n, dtype=x.dtype)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))

    def bwd(g):
        return (((sig - t) * (g / n)).astype(x.dtype, copy=False),)

    return _make(out, (logits,), bwd, "bce_with_logits")
