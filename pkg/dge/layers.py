# dge/layers.py
# Purpose: parameter containers (Module, Linear, LayerNorm, Mlp) on top of dge.tensor.

from __future__ import annotations

from typing import Iterator

import numpy as np

from dge.errors import CheckpointError
from dge.rng import RngStream
from dge.tensor import Tensor, gelu, layer_norm


class Module:
    """Parameters are discovered from attributes in definition order, so names are stable."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + attr, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{attr}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError(f"parameter mismatch: missing={missing} unexpected={unexpected}")
        for name, param in own.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise CheckpointError(f"shape mismatch for {name}: checkpoint {value.shape} vs model {param.shape}")
            param.data = value.astype(param.data.dtype, copy=True)


class Linear(Module):
    """y = x W + b with W stored as (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: RngStream, std: float = 0.02):
        self.weight = Tensor(rng.truncated_normal((in_features, out_features), std=std), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, channels: int):
        self.gain = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class Mlp(Module):
    def __init__(self, channels: int, ratio: float, rng: RngStream):
        hidden = int(round(channels * ratio))
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))
