"""Pure-numpy versions of the row-wise kernels in ``_ckernels.pyx``.

Same signatures and return layouts; used when the compiled extension is
unavailable or disabled through ``CEAT_PURE_PYTHON=1``.
"""
import numpy as np
from scipy.special import erf

_INV_SQRT_2PI = 0.3989422804014327
_SQRT1_2 = 0.7071067811865476


def layernorm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma + beta
    return out, xhat, rstd[:, 0].astype(x.dtype, copy=False)


def layernorm_backward(gout, xhat, rstd, gamma):
    gh = gout * gamma
    s1 = gh.mean(axis=1, keepdims=True)
    s2 = (gh * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gh - s1 - xhat * s2)
    return gx, (gout * xhat).sum(axis=0), gout.sum(axis=0)


def softmax_forward(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y, gy):
    dot = (y * gy).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT1_2))


def gelu_backward(x, gy):
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return gy * (cdf + x * pdf)
