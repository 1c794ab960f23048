"""Finite-difference verification of tape gradients.

The checker runs in 64-bit mode only: float32 round-off swamps the comparison
long before a wrong gradient rule would, so 32-bit inputs are rejected
instead of silently producing meaningless error numbers.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               h: float = 1e-4, coords_per_param: int | None = None,
               seed: int = 0) -> float:
    """Worst relative error between tape gradients and central differences.

    f must be a deterministic scalar function of the given parameters. Each
    coordinate is perturbed by +-h and the symmetric difference quotient is
    compared to the recorded gradient. When a parameter has more coordinates
    than coords_per_param, a seeded subsample is checked.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("grad_check runs in 64-bit mode; cast parameters first")
    if h <= 0:
        raise ValueError("step h must be positive")

    with GradTape() as tape:
        loss = f()
    if loss.size != 1:
        raise ValueError("objective must be scalar")
    if not np.isfinite(loss.data).all():
        raise ValueError("objective is not finite")
    analytic = tape.gradients(loss, params)

    picker = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        if coords_per_param is None or flat.size <= coords_per_param:
            coords = range(flat.size)
        else:
            coords = picker.choice(flat.size, size=coords_per_param, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError("objective is not finite at perturbed point")
            fd = (fp - fm) / (2.0 * h)
            worst = max(worst, relative_error(float(gflat[i]), fd))
    return worst
