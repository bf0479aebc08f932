"""Kernel backend selection.

The compiled extension is preferred. Setting ``CEAT_PURE_PYTHON=1`` before
import forces the numpy fallback. ``BACKEND`` names the active choice.
"""
import os

from . import _pykernels

_FORCE_PY = os.environ.get("CEAT_PURE_PYTHON", "").strip() not in ("", "0")

if _FORCE_PY:
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

layernorm_forward = _impl.layernorm_forward
layernorm_backward = _impl.layernorm_backward
softmax_forward = _impl.softmax_forward
softmax_backward = _impl.softmax_backward
gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward

__all__ = [
    "BACKEND",
    "layernorm_forward",
    "layernorm_backward",
    "softmax_forward",
    "softmax_backward",
    "gelu_forward",
    "gelu_backward",
]
