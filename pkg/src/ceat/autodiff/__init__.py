"""Minimal dense-tensor autodiff used by the model and losses."""
from .gradcheck import NonDeterministicError, finite_diff_check
from .kernels import BACKEND
from .ops import (
    bce_with_logits,
    gelu,
    l1_distance,
    l2_normalize,
    layer_norm,
    log_softmax,
    masked_log_softmax,
    softmax,
)
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    abs_,
    active_tape,
    add,
    as_tensor,
    backward,
    concat,
    exp,
    get_dtype,
    getitem,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    precision,
    precision_name,
    reshape,
    scale,
    set_precision,
    sub,
    sum_,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
