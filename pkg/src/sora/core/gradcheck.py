"""Central finite-difference gradient check."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, fresh_tape, no_grad


def analytic_grad(fn: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    with fresh_tape():
        x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
        backward(fn(x))
    return x.grad if x.grad is not None else np.zeros_like(x.data)


def numeric_grad(fn: Callable[[Tensor], Tensor], point: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    base = np.array(point, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    with no_grad():
        for i in range(base.size):
            up, down = base.copy(), base.copy()
            up.reshape(-1)[i] += eps
            down.reshape(-1)[i] -= eps
            flat[i] = (fn(Tensor(up)).item() - fn(Tensor(down)).item()) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max coordinate-wise relative error.

    The denominator is floored at 1e-3 of the largest gradient entry (and at
    1e-8), so coordinates whose true gradient is ~0 do not amplify
    finite-difference rounding noise.
    """
    a, n = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    if a.size == 0:
        return 0.0
    floor = max(1e-8, 1e-3 * float(max(np.abs(a).max(), np.abs(n).max())))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Return the max relative error between the tape gradient of ``fn`` at
    ``point`` and its central finite-difference estimate."""
    point = np.asarray(point, dtype=np.float64)
    return relative_error(analytic_grad(fn, point), numeric_grad(fn, point, eps))
