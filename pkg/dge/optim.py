# dge/optim.py
# Purpose: AdamW with decoupled weight decay over named parameters.

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from dge.errors import DimensionError, NumericError
from dge.tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 3e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    no_decay: frozenset[str] = frozenset()


def optimizer_step(state: OptimizerState, params: Mapping[str, Tensor],
                   grads: Mapping[str, np.ndarray | None]) -> None:
    """One bias-corrected AdamW update. Parameters without a gradient are left untouched."""
    for name, grad in grads.items():
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if not np.all(np.isfinite(np.square(grad, dtype=np.float64))):
            raise NumericError(f"squared gradient overflows for parameter {name!r}")
        if grad.shape != params[name].shape:
            raise DimensionError(f"gradient shape {grad.shape} does not match parameter {name!r} {params[name].shape}")

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        # moments stay float64 so grad**2 cannot overflow at f32
        g = np.asarray(grad, dtype=np.float64)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros(param.shape, dtype=np.float64)
            v = np.zeros(param.shape, dtype=np.float64)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v

        data = param.data
        if state.weight_decay and name not in state.no_decay:
            data = data * (1.0 - state.lr * state.weight_decay)
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        param.data = (data - state.lr * update).astype(param.data.dtype, copy=False)


class AdamW:
    """Convenience wrapper holding the parameter set and its state."""

    def __init__(self, named_params: Iterable[tuple[str, Tensor]], lr: float = 3e-4,
                 weight_decay: float = 0.05, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, no_decay: Iterable[str] = ()):
        self.params = dict(named_params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, beta1=betas[0],
                                    beta2=betas[1], eps=eps, no_decay=frozenset(no_decay))

    def step(self) -> None:
        optimizer_step(self.state, self.params, {n: p.grad for n, p in self.params.items()})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
