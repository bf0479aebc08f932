"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, precision_name


class NonDeterministicError(RuntimeError):
    pass


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is a zero-argument closure over ``params`` returning a scalar
    tensor. The error for each entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    ``max_entries`` optionally subsamples coordinates per parameter.
    """
    if precision_name() != "float64":
        raise RuntimeError("finite_diff_check requires float64 precision")
    for p in params:
        if p.data.dtype != np.float64:
            raise RuntimeError("finite_diff_check parameters must be float64")
        p.requires_grad = True

    with Tape() as tape:
        loss = f()
    grads = backward(tape, loss)
    base = float(loss.data)
    again = float(f().data)
    if base != again:
        raise NonDeterministicError(f"f returned {base!r} then {again!r}")

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        ga = analytic.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
