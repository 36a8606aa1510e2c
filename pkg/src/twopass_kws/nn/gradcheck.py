"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare analytic gradients of the scalar computation `f` against
    central finite differences and return the worst relative error.

    Run under float64 (`using_dtype(np.float64)`); float32 rounding swamps
    the finite-difference signal.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    if loss.data.ndim != 0:
        raise ValueError("grad_check: f must return a scalar")
    if not np.isfinite(loss.data):
        raise FloatingPointError("grad_check: non-finite loss")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = f().item()
            flat[i] = orig - eps
            lm = f().item()
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError("grad_check: non-finite loss during perturbation")
            numeric = (lp - lm) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst
