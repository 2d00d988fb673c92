# dge/router.py
# Purpose: dynamic grained router. Splits a token grid into S x S regions
# (bottom-right padded), scores candidate granularities per region, selects one
# (argmax at inference, Gumbel-max while training) and pools each selected patch
# into one sparse query. Un-pooling broadcasts query outputs back to the grid.

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from dge.errors import ConfigError, DimensionError, InvariantError, NumericError, UsageError
from dge.rng import RngStream, gumbel_sample
from dge.tensor import (Tensor, concat, custom, record_flops, segment_mean, softmax,
                        take_along, take_rows)

LAYER_WISE = 0  # region_size value meaning "one region covering the whole map"


@dataclass(frozen=True)
class GranularitySet:
    phi: tuple[int, ...]
    region_size: int

    @classmethod
    def build(cls, phi, region_size: int | None = None) -> "GranularitySet":
        phi = tuple(int(p) for p in phi)
        if not phi:
            raise ConfigError("candidate granularity set is empty")
        if any(b <= a for a, b in zip(phi, phi[1:])):
            raise ConfigError(f"granularities must be strictly increasing, got {list(phi)}")
        if phi[0] < 0 or phi[-1] < 1:
            raise ConfigError(f"granularities must be >= 1 (0 only as skip-mode), got {list(phi)}")
        size = phi[-1] if region_size is None else int(region_size)
        if size != LAYER_WISE and size < phi[-1]:
            raise ConfigError(f"region size {size} is smaller than the largest granularity {phi[-1]}")
        return cls(phi, size)

    @property
    def k(self) -> int:
        return len(self.phi)

    @property
    def skip_mode(self) -> bool:
        return self.phi[0] == 0

    @property
    def finest_index(self) -> int:
        return 1 if self.skip_mode else 0

    @property
    def coarsest_index(self) -> int:
        return self.k - 1

    def region_side(self, height: int, width: int) -> int:
        if self.region_size == LAYER_WISE:
            return max(height, width, self.phi[-1])
        return self.region_size


@dataclass
class FeatureMap:
    spatial: Tensor
    height: int
    width: int
    extra: Tensor | None = None

    def __post_init__(self):
        if self.spatial.ndim != 2 or self.spatial.shape[0] != self.height * self.width:
            raise DimensionError(
                f"spatial tokens {self.spatial.shape} do not match a {self.height}x{self.width} grid")
        if self.extra is not None and (self.extra.ndim != 2 or self.extra.shape[1] != self.channels):
            raise DimensionError(f"extra tokens {self.extra.shape} do not match {self.channels} channels")

    @property
    def channels(self) -> int:
        return self.spatial.shape[1]

    @property
    def num_extra(self) -> int:
        return 0 if self.extra is None else self.extra.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.height * self.width + self.num_extra

    def tokens(self) -> Tensor:
        """Extra tokens first, then the H*W spatial tokens row-major."""
        return self.spatial if self.extra is None else concat([self.extra, self.spatial], axis=0)


@dataclass(frozen=True, eq=False)
class RegionPartition:
    height: int
    width: int
    channels: int
    region_size: int
    phi: tuple[int, ...]
    grid_rows: int
    grid_cols: int
    valid: np.ndarray          # (grid_rows*S, grid_cols*S), False on padding
    token_region: np.ndarray   # (H*W,) region id, row-major regions
    token_patch: np.ndarray    # (K, H*W) patch id within the region, -1 in skip-mode
    patch_counts: np.ndarray   # (K, R) patches holding at least one valid token
    patches_per_side: tuple[int, ...]

    @property
    def num_regions(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def k(self) -> int:
        return len(self.phi)

    def region_rect(self, region: int) -> tuple[int, int, int, int]:
        """(top, left, bottom, right) in token coordinates, exclusive end, clipped to the valid grid."""
        row, col = divmod(region, self.grid_cols)
        top, left = row * self.region_size, col * self.region_size
        return top, left, min(top + self.region_size, self.height), min(left + self.region_size, self.width)

    def patch_index_map(self, k: int) -> list[list[np.ndarray]]:
        """region -> patches (row-major, non-empty only) -> (n, 2) array of valid (row, col) coordinates."""
        coords = np.stack(np.divmod(np.arange(self.height * self.width), self.width), axis=1)
        out: list[list[np.ndarray]] = []
        for region in range(self.num_regions):
            in_region = self.token_region == region
            local = self.token_patch[k][in_region]
            members = coords[in_region]
            out.append([members[local == pid] for pid in np.unique(local[local >= 0])])
        return out


def partition(height: int, width: int, channels: int, phi, region_size: int | None = None) -> RegionPartition:
    if height < 1 or width < 1:
        raise ConfigError(f"feature map must be at least 1x1, got {height}x{width}")
    gran = GranularitySet.build(phi, region_size)
    return _partition(int(height), int(width), int(channels), gran.phi, gran.region_side(height, width))


@functools.lru_cache(maxsize=256)
def _partition(height: int, width: int, channels: int, phi: tuple[int, ...], size: int) -> RegionPartition:
    grid_rows, grid_cols = math.ceil(height / size), math.ceil(width / size)
    num_regions = grid_rows * grid_cols
    rows, cols = np.divmod(np.arange(height * width), width)
    token_region = (rows // size) * grid_cols + cols // size
    local_r, local_c = rows % size, cols % size

    valid = np.zeros((grid_rows * size, grid_cols * size), dtype=bool)
    valid[:height, :width] = True

    token_patch = np.full((len(phi), height * width), -1, dtype=np.intp)
    patch_counts = np.zeros((len(phi), num_regions), dtype=np.intp)
    per_side = []
    for k, gran in enumerate(phi):
        if gran == 0:
            per_side.append(0)
            continue
        n = math.ceil(size / gran)
        per_side.append(n)
        token_patch[k] = (local_r // gran) * n + local_c // gran
        occupied = np.unique(token_region * n * n + token_patch[k])
        patch_counts[k] = np.bincount(occupied // (n * n), minlength=num_regions)

    for arr in (valid, token_region, token_patch, patch_counts):
        arr.setflags(write=False)
    return RegionPartition(height, width, channels, size, phi, grid_rows, grid_cols, valid,
                           token_region, token_patch, patch_counts, tuple(per_side))


# ---- gating ----

def _spatial(z: FeatureMap | Tensor) -> Tensor:
    return z.spatial if isinstance(z, FeatureMap) else z


def gating_logits(z: FeatureMap | Tensor, part: RegionPartition, weight: Tensor, bias: Tensor) -> Tensor:
    """Region mean over valid tokens, projected to K logits: (R, K)."""
    spatial = _spatial(z)
    channels = spatial.shape[1]
    if weight.shape != (channels, part.k) or bias.shape[-1] != part.k:
        raise DimensionError(f"gate weight {weight.shape} / bias {bias.shape} do not fit C={channels}, K={part.k}")
    region_mean = segment_mean(spatial, part.token_region, part.num_regions)
    return region_mean @ weight + bias


@dataclass
class GatingDecision:
    logits: Tensor
    theta: np.ndarray                 # (R,) 0-based candidate index
    tau: float = 1.0
    training: bool = False
    p: Tensor | None = None           # (R,) soft score of the selected candidate
    noise: np.ndarray | None = None   # (R, K) Gumbel noise used for theta
    region_queries: np.ndarray | None = None  # (R,) N_i for the selected candidates

    def to_dict(self, part: RegionPartition, layer: int | None = None) -> dict[str, Any]:
        regions = []
        for i in range(part.num_regions):
            top, left, bottom, right = part.region_rect(i)
            regions.append({"index": i, "top": top, "left": left, "bottom": bottom, "right": right})
        return {
            "layer": layer,
            "grid": [part.grid_rows, part.grid_cols],
            "phi": list(part.phi),
            "logits": self.logits.data.astype(float).tolist(),
            "theta": self.theta.astype(int).tolist(),
            "granularity": [part.phi[t] for t in self.theta],
            "p": None if self.p is None else self.p.data.astype(float).tolist(),
            "regions": regions,
        }


def select_inference(logits: Tensor | np.ndarray) -> np.ndarray:
    """Plain argmax per region; ties go to the smallest index (finest granularity)."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if not np.all(np.isfinite(data)):
        raise NumericError("gating logits contain NaN or infinite values")
    return np.argmax(data, axis=1)


def select_training(logits: Tensor, rng: RngStream | None, tau: float = 1.0,
                    noise: np.ndarray | None = None) -> GatingDecision:
    """Gumbel-max selection with the Gumbel-softmax score of the winner kept for backward."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if noise is None:
        if rng is None:
            raise UsageError("select_training needs an RngStream or explicit noise")
        g = gumbel_sample(rng, logits.shape).data
    else:
        g = np.asarray(noise, dtype=logits.data.dtype)
        if g.shape != logits.shape:
            raise DimensionError(f"noise shape {g.shape} does not match logits {logits.shape}")
    perturbed = (logits + g) / tau
    theta = select_inference(perturbed)
    p = take_along(softmax(perturbed, axis=1), theta, axis=1)
    return GatingDecision(logits=logits, theta=theta, tau=tau, training=True, p=p, noise=g)


# ---- sparse queries ----

@dataclass
class SparseQuerySet:
    queries: Tensor              # (N, C)
    token_query: np.ndarray      # (H*W,) query id per token, -1 in skip regions
    query_region: np.ndarray     # (N,)
    query_patch: np.ndarray      # (N,) patch id within its region
    query_area: np.ndarray       # (N,) number of valid origin tokens
    query_granularity: np.ndarray  # (N,) phi of the origin patch
    region_counts: np.ndarray    # (R,) N_i

    @property
    def num_queries(self) -> int:
        return int(self.query_region.shape[0])

    def origins(self, j: int, width: int) -> np.ndarray:
        tokens = np.flatnonzero(self.token_query == j)
        return np.stack(np.divmod(tokens, width), axis=1)


def pool_queries(z: FeatureMap | Tensor, part: RegionPartition, theta) -> SparseQuerySet:
    spatial = _spatial(z)
    theta = np.asarray(theta, dtype=np.intp)
    if theta.shape != (part.num_regions,) or theta.min(initial=0) < 0 or theta.max(initial=0) >= part.k:
        raise UsageError(f"theta must hold {part.num_regions} indices in [0, {part.k}), got {theta.tolist()}")
    tokens = np.arange(part.height * part.width)
    local = part.token_patch[theta[part.token_region], tokens]
    max_patches = max(max(part.patches_per_side) ** 2, 1)
    kept = local >= 0
    keys = part.token_region[kept] * max_patches + local[kept]
    unique_keys, inverse = np.unique(keys, return_inverse=True)

    token_query = np.full(tokens.shape[0], -1, dtype=np.intp)
    token_query[kept] = inverse
    query_region = unique_keys // max_patches
    region_counts = np.bincount(query_region, minlength=part.num_regions)
    expected = part.patch_counts[theta, np.arange(part.num_regions)]
    if not np.array_equal(region_counts, expected):
        raise InvariantError(f"pooled query counts {region_counts.tolist()} != partition counts {expected.tolist()}")

    return SparseQuerySet(
        queries=segment_mean(spatial, token_query, unique_keys.shape[0]),
        token_query=token_query,
        query_region=query_region,
        query_patch=unique_keys % max_patches,
        query_area=np.bincount(inverse, minlength=unique_keys.shape[0]),
        query_granularity=np.asarray(part.phi)[theta[query_region]],
        region_counts=region_counts,
    )


def unpool_restore(y_hat: Tensor, queries: SparseQuerySet, part: RegionPartition) -> FeatureMap:
    """Broadcast each query row to its origin tokens; skip-mode tokens receive zeros."""
    if y_hat.shape[0] != queries.num_queries:
        raise DimensionError(f"{y_hat.shape[0]} query outputs for {queries.num_queries} pooled queries")
    kept = queries.token_query >= 0
    if not np.array_equal(np.bincount(queries.token_query[kept], minlength=queries.num_queries), queries.query_area):
        raise InvariantError("un-pooling origin maps overlap")
    record_flops("unpool", part.height * part.width * y_hat.shape[1])
    return FeatureMap(take_rows(y_hat, queries.token_query, fill=True), part.height, part.width)


def ste_scale(y_hat: Tensor, decision: GatingDecision, query_region: np.ndarray) -> Tensor:
    """Identity forward; backward behaves as p_i * y_hat for the queries of region i."""
    if not decision.training or decision.p is None:
        raise UsageError("ste_scale is a training-only node; inference bypasses it")
    p = decision.p
    query_region = np.asarray(query_region, dtype=np.intp)
    scale = p.data[query_region][:, None]

    def backward(g):
        grad_p = np.zeros_like(p.data)
        np.add.at(grad_p, query_region, np.sum(g * y_hat.data, axis=1))
        return g * scale, grad_p

    return custom(y_hat.data, (y_hat, p), backward, "ste_scale")
