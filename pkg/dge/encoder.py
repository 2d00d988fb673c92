# dge/encoder.py
# Purpose: vanilla pre-norm transformer encoder, the dynamic grained block that
# wraps it (sparse queries, dense keys/values, un-pooling, outer residual) and a
# toy ViT classifier stacking those blocks.

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from dge.errors import DimensionError, UsageError
from dge.layers import LayerNorm, Linear, Mlp, Module
from dge.rng import RngStream
from dge.router import (FeatureMap, GatingDecision, RegionPartition, SparseQuerySet, gating_logits,
                        partition, pool_queries, select_inference, select_training, ste_scale,
                        unpool_restore)
from dge.schemas import EncoderConfig
from dge.tensor import Tensor, concat, softmax

INIT_STREAM = 0
GATE_STREAM_BASE = 1000

ForceTheta = Union[str, np.ndarray, Sequence[int], None]
LayerHook = Callable[[int, FeatureMap], Optional[FeatureMap]]


class MultiHeadAttention(Module):
    def __init__(self, channels: int, heads: int, rng: RngStream):
        if channels % heads:
            raise DimensionError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.query = Linear(channels, channels, rng)
        self.key = Linear(channels, channels, rng)
        self.value = Linear(channels, channels, rng)
        self.proj = Linear(channels, channels, rng)

    def __call__(self, q: Tensor, kv: Tensor) -> Tensor:
        return attention(q, kv, kv, self)


def attention(q: Tensor, k: Tensor, v: Tensor, params: MultiHeadAttention) -> Tensor:
    """Scaled dot-product attention over `params.heads` heads, output projection applied."""
    if k.shape[0] == 0 or v.shape[0] == 0:
        raise DimensionError("attention needs at least one key/value token, got M=0")
    if k.shape != v.shape or q.shape[1] != k.shape[1]:
        raise DimensionError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    n, channels = q.shape
    m = k.shape[0]
    h = params.heads
    d = channels // h
    qh = params.query(q).reshape(n, h, d).transpose(1, 0, 2)
    kh = params.key(k).reshape(m, h, d).transpose(1, 2, 0)
    vh = params.value(v).reshape(m, h, d).transpose(1, 0, 2)
    weights = softmax((qh @ kh) * (1.0 / math.sqrt(d)), axis=-1)
    out = (weights @ vh).transpose(1, 0, 2).reshape(n, channels)
    return params.proj(out)


class VanillaEncoder(Module):
    """u = q + attn(LN(q), LN_kv(kv)); out = u + FFN(LN(u))."""

    def __init__(self, channels: int, heads: int, mlp_ratio: float, rng: RngStream):
        self.norm_q = LayerNorm(channels)
        self.norm_kv = LayerNorm(channels)
        self.attn = MultiHeadAttention(channels, heads, rng)
        self.norm_mlp = LayerNorm(channels)
        self.mlp = Mlp(channels, mlp_ratio, rng)

    def __call__(self, q: Tensor, kv: Tensor) -> Tensor:
        u = q + self.attn(self.norm_q(q), self.norm_kv(kv))
        return u + self.mlp(self.norm_mlp(u))


@dataclass
class DgeLayerOutput:
    y: FeatureMap
    partition: RegionPartition
    psi: int
    decision: GatingDecision | None = None   # None on the dense path
    queries: SparseQuerySet | None = None

    @property
    def dense(self) -> bool:
        return self.decision is None


def _resolve_theta(force: ForceTheta, part: RegionPartition) -> np.ndarray:
    if isinstance(force, str):
        if force == "finest":
            return np.full(part.num_regions, 1 if part.phi[0] == 0 else 0, dtype=np.intp)
        if force == "coarsest":
            return np.full(part.num_regions, part.k - 1, dtype=np.intp)
        raise UsageError(f"unknown forced routing {force!r}, expected 'finest', 'coarsest' or indices")
    return np.asarray(force, dtype=np.intp)


class DgeBlock(Module):
    def __init__(self, cfg: EncoderConfig, rng: RngStream, gate_rng: RngStream):
        gran = cfg.granularity
        self.phi = gran.phi
        self.region_size = cfg.region_size
        self.tau = cfg.tau
        self.dense = cfg.dense
        self.encoder = VanillaEncoder(cfg.channels, cfg.heads, cfg.mlp_ratio, rng)
        std = math.sqrt(2.0 / (cfg.channels + gran.k))
        self.gate_weight = Tensor(gate_rng.normal((cfg.channels, gran.k), std=std), requires_grad=True)
        self.gate_bias = Tensor(np.zeros((1, gran.k)), requires_grad=True)

    def __call__(self, x: FeatureMap, training: bool = False, rng: RngStream | None = None,
                 force_theta: ForceTheta = None, noise: np.ndarray | None = None,
                 dense: bool | None = None) -> DgeLayerOutput:
        part = partition(x.height, x.width, x.channels, self.phi, self.region_size)
        if (self.dense if dense is None else dense):
            return self._dense(x, part)

        logits = gating_logits(x, part, self.gate_weight, self.gate_bias)
        if force_theta is not None:
            decision = GatingDecision(logits=logits, theta=_resolve_theta(force_theta, part), tau=self.tau)
        elif training:
            decision = select_training(logits, rng, self.tau, noise)
        else:
            decision = GatingDecision(logits=logits, theta=select_inference(logits), tau=self.tau)

        queries = pool_queries(x, part, decision.theta)
        n_extra = x.num_extra
        q_seq = queries.queries if x.extra is None else concat([x.extra, queries.queries], axis=0)
        out = self.encoder(q_seq, x.tokens())
        y_hat = out[n_extra:] if n_extra else out
        if decision.training:
            y_hat = ste_scale(y_hat, decision, queries.query_region)
        restored = unpool_restore(y_hat, queries, part)
        y = FeatureMap(restored.spatial + x.spatial, x.height, x.width, out[:n_extra] if n_extra else None)
        decision = replace(decision, region_queries=queries.region_counts)
        return DgeLayerOutput(y=y, partition=part, psi=queries.num_queries, decision=decision, queries=queries)

    def _dense(self, x: FeatureMap, part: RegionPartition) -> DgeLayerOutput:
        n_extra = x.num_extra
        tokens = x.tokens()
        out = self.encoder(tokens, tokens)
        spatial = (out[n_extra:] if n_extra else out) + x.spatial
        y = FeatureMap(spatial, x.height, x.width, out[:n_extra] if n_extra else None)
        return DgeLayerOutput(y=y, partition=part, psi=x.height * x.width)


def dge_block(x: FeatureMap, block: DgeBlock, training: bool = False, rng: RngStream | None = None,
              **kwargs) -> DgeLayerOutput:
    return block(x, training=training, rng=rng, **kwargs)


@dataclass
class ClassifierOutput:
    logits: Tensor
    layers: list[DgeLayerOutput] = field(default_factory=list)

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.logits.data))


class VitClassifier(Module):
    """Patch embedding + positional embedding + class token -> DGE blocks -> LN -> head on the class token."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        init = RngStream(seed, INIT_STREAM)
        p, grid = cfg.patch_size, cfg.grid_size
        self.patch_embed = Linear(p * p * cfg.in_channels, cfg.channels, init)
        self.cls_token = Tensor(init.truncated_normal((1, cfg.channels)), requires_grad=True)
        self.pos_embed = Tensor(init.truncated_normal((grid * grid, cfg.channels)), requires_grad=True)
        self.blocks = [DgeBlock(cfg, init, RngStream(seed, GATE_STREAM_BASE + i)) for i in range(cfg.depth)]
        self.norm = LayerNorm(cfg.channels)
        self.head = Linear(cfg.channels, cfg.num_classes, init)

    @classmethod
    def from_config(cls, cfg: EncoderConfig, seed: int = 0) -> "VitClassifier":
        return cls(cfg, seed)

    def patchify(self, image) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        size, p, cin = self.cfg.image_size, self.cfg.patch_size, self.cfg.in_channels
        if img.shape != (size, size, cin):
            raise DimensionError(f"image shape {np.asarray(image).shape} does not match ({size}, {size}, {cin})")
        grid = size // p
        patches = img.reshape(grid, p, grid, p, cin).transpose(0, 2, 1, 3, 4)
        return patches.reshape(grid * grid, p * p * cin)

    def embed(self, image) -> FeatureMap:
        spatial = self.patch_embed(Tensor(self.patchify(image))) + self.pos_embed
        grid = self.cfg.grid_size
        return FeatureMap(spatial, grid, grid, extra=self.cls_token)

    def __call__(self, image, training: bool = False, rng: RngStream | None = None,
                 force_theta: ForceTheta | Sequence[ForceTheta] = None, dense: bool | None = None,
                 layer_hook: LayerHook | None = None,
                 noise: Sequence[np.ndarray] | None = None) -> ClassifierOutput:
        """force_theta and noise are either shared by all layers or lists with one entry per layer.
        layer_hook sees every block input and may return a replacement FeatureMap."""
        if training and rng is None and noise is None and not (dense or self.cfg.dense):
            raise UsageError("training-mode routing needs an RngStream")
        x = self.embed(image)
        layers: list[DgeLayerOutput] = []
        for i, block in enumerate(self.blocks):
            if layer_hook is not None:
                x = layer_hook(i, x) or x
            layer_force = force_theta[i] if isinstance(force_theta, (list, tuple)) else force_theta
            out = block(x, training=training, rng=rng, force_theta=layer_force,
                        noise=None if noise is None else noise[i], dense=dense)
            layers.append(out)
            x = out.y
        cls_out = self.norm(x.extra)
        return ClassifierOutput(logits=self.head(cls_out).reshape(-1), layers=layers)
