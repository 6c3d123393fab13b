"""Central finite-difference gradient checking (meant for 64-bit tensors)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to each entry of ``arr``.

    ``arr`` is perturbed in place and restored afterwards.
    """
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = f()
        flat[i] = orig - h
        minus = f()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps gradients that are identically zero (e.g. a conv bias
    feeding batch normalization) from turning round-off into a 100% error.
    """
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor],
                    h: float = 1e-5) -> list[float]:
    """Compare autodiff gradients of scalar ``fn()`` against central differences.

    Returns the relative error for each tensor in ``inputs``.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def f() -> float:
        return float(fn().data)

    return [relative_error(a, numerical_gradient(f, t.data, h)) for a, t in zip(analytic, inputs)]
