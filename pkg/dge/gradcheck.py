# dge/gradcheck.py
# Purpose: central finite-difference gradient checks against the autodiff engine.
# Run inside `precision("f64")`; 32-bit differences are too noisy at step 1e-5.

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from dge.tensor import Tensor

DEFAULT_STEP = 1e-5


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, step: float = DEFAULT_STEP) -> np.ndarray:
    flat = param.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn().item()
        flat[i] = original - step
        minus = fn().item()
        flat[i] = original
        grad[i] = (plus - minus) / (2.0 * step)
    return grad.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    diff = np.linalg.norm(np.asarray(analytic) - np.asarray(numeric))
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(diff / scale)


def check_gradients(fn: Callable[[], Tensor], params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]],
                    step: float = DEFAULT_STEP) -> dict[str, float]:
    """Relative error between backward() and central differences, per parameter."""
    named = dict(params)
    for p in named.values():
        p.zero_grad()
    fn().backward()
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in named.items()}
    return {n: relative_error(analytic[n], numerical_grad(fn, p, step)) for n, p in named.items()}
