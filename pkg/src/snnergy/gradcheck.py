"""Central finite-difference gradient checking for tape-built scalar functions."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, using_tape


def analytic_grads(fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    with using_tape():
        for t in tensors:
            t.grad = None
        backward(fn())
        return [np.zeros_like(t.data) if t.grad is None else np.array(t.grad) for t in tensors]


def numeric_grads(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-3) -> list[np.ndarray]:
    out = []
    with no_grad():
        for t in tensors:
            g = np.zeros_like(t.data)
            flat, gflat = t.data.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(fn().data.sum())
                flat[i] = orig - eps
                fm = float(fn().data.sum())
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * eps)
            out.append(g)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a − n| / max|n|: scale-free, robust to near-zero entries."""
    scale = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-12)
    return float(np.abs(analytic - numeric).max()) / scale


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-3) -> list[float]:
    """Relative error per tensor between backward and central differences.

    ``fn`` must rebuild the scalar loss from the current contents of
    ``tensors`` each time it is called; run it in float64.
    """
    a = analytic_grads(fn, tensors)
    n = numeric_grads(fn, tensors, eps)
    return [relative_error(x, y) for x, y in zip(a, n)]
