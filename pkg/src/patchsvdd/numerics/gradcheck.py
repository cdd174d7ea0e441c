"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn: Callable[[], Tensor], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d fn() / d arr by central differences; ``arr`` is perturbed in place and restored."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between backprop and finite differences over ``tensors``."""
    for t in tensors:
        t.grad = None if t.grad is None else np.zeros_like(t.data)
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numerical_gradient(fn, t.data, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
