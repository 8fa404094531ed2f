from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(Tensor(x)).item()
            flat[i] = orig - eps
            lo = f(Tensor(x)).item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    return grad


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    return leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    a = analytic_grad(f, x)
    n = numerical_grad(f, x, eps)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n))))
