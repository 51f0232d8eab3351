"""Finite-difference gradient oracle.

Independent of the backward passes it checks: gradients are estimated by
central differences on the forward computation alone, then compared against
whatever backward() produced.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T


def numeric_gradients(f: Callable[[Sequence[T.Tensor]], T.Tensor],
                      arrays: Sequence[np.ndarray],
                      step: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of scalar f w.r.t. every array element."""
    grads = []
    for i, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        for j in range(base.size):
            def eval_at(delta: float) -> float:
                perturbed = [a.astype(np.float64, copy=True) for a in arrays]
                perturbed[i].reshape(-1)[j] += delta
                return f([T.Tensor(p) for p in perturbed]).item()

            flat[j] = (eval_at(step) - eval_at(-step)) / (2.0 * step)
        grads.append(g)
    return grads


def analytic_gradients(f: Callable[[Sequence[T.Tensor]], T.Tensor],
                       arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Gradients from the reverse-mode engine for the same scalar function."""
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = f(tensors)
    T.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def max_relative_error(f: Callable[[Sequence[T.Tensor]], T.Tensor],
                       arrays: Sequence[np.ndarray],
                       step: float = 1e-5) -> float:
    """Worst elementwise relative error between analytic and numeric gradients.

    The error is |a - n| / max(1, |a|, |n|), so small absolute noise on tiny
    gradients does not blow up the ratio.
    """
    numeric = numeric_gradients(f, arrays, step=step)
    analytic = analytic_gradients(f, arrays)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst
