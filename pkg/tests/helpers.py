"""Shared test utilities: central finite-difference gradient oracle."""
from __future__ import annotations

import numpy as np

from dynfield.autodiff import Tensor, backward


def numerical_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued f at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def analytic_grad(f, x: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of scalar Tensor-valued f at x."""
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = f(t)
    backward(out)
    return t.grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-8)
    return float(np.max(np.abs(a - b) / denom))
