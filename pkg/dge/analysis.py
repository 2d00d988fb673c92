# dge/analysis.py
# Purpose: spatial-redundancy measurement (token-vs-patch-average Pearson correlation),
# threshold replacement sweep, routing heat-map export and localization score.

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from dge.budget import layer_cost
from dge.encoder import VitClassifier
from dge.errors import ArtifactError, DimensionError, UsageError
from dge.router import FeatureMap, partition
from dge.tensor import Tensor

logger = logging.getLogger(__name__)

HIST_BINS = 50
PCC_PATCH = 2


# ---- Pearson correlation ----

def pcc_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Pearson correlation of (n, C) arrays.
    Both rows constant -> 1; exactly one constant -> 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"pcc shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[-1] < 2:
        raise UsageError(f"pcc needs at least 2 channels, got {a.shape[-1]}")
    ac = a - a.mean(axis=-1, keepdims=True)
    bc = b - b.mean(axis=-1, keepdims=True)
    na = np.sqrt(np.sum(ac * ac, axis=-1))
    nb = np.sqrt(np.sum(bc * bc, axis=-1))
    scale = np.maximum(np.abs(a).max(axis=-1), np.abs(b).max(axis=-1))
    tol = 1e-12 * np.maximum(scale, 1.0) * np.sqrt(a.shape[-1])
    flat_a, flat_b = na <= tol, nb <= tol
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sum(ac * bc, axis=-1) / (na * nb)
    r = np.where(flat_a | flat_b, np.where(flat_a & flat_b, 1.0, 0.0), r)
    return np.clip(r, -1.0, 1.0)


def pcc(a, b) -> float:
    return float(pcc_rows(np.asarray(a)[None, :], np.asarray(b)[None, :])[0])


@dataclass
class _Tiling:
    tokens: np.ndarray    # (P, patch*patch) flat token indices per tile
    truncated: bool


def _tiling(height: int, width: int, patch: int) -> _Tiling:
    rows, cols = height // patch, width // patch
    r = (np.arange(rows)[:, None, None, None] * patch + np.arange(patch)[None, None, :, None])
    c = (np.arange(cols)[None, :, None, None] * patch + np.arange(patch)[None, None, None, :])
    flat = (r * width + c).reshape(rows * cols, patch * patch)
    return _Tiling(flat, truncated=(height % patch or width % patch) != 0)


def patch_pcc(spatial: np.ndarray, height: int, width: int, patch: int = PCC_PATCH) -> tuple[np.ndarray, np.ndarray, _Tiling]:
    """PCC of each tiled token against its tile average: returns (pcc (P, patch^2), averages (P, C), tiling)."""
    tiling = _tiling(height, width, patch)
    members = spatial[tiling.tokens]                       # (P, m, C)
    averages = members.mean(axis=1)                        # (P, C)
    p, m, c = members.shape
    scores = pcc_rows(members.reshape(p * m, c), np.repeat(averages, m, axis=0)).reshape(p, m)
    return scores, averages, tiling


# ---- redundancy profile ----

@dataclass
class LayerRedundancy:
    layer: int
    bin_edges: np.ndarray
    counts: np.ndarray
    mean: float
    var: float
    image_mean_var: float   # spread of per-image mean PCC
    tokens: int


@dataclass
class RedundancyProfile:
    layers: list[LayerRedundancy]
    sweep: pd.DataFrame | None = None
    values: list[np.ndarray] = field(default_factory=list, repr=False)

    def histogram_frame(self) -> pd.DataFrame:
        frames = [pd.DataFrame({"layer": l.layer, "bin_low": l.bin_edges[:-1], "bin_high": l.bin_edges[1:],
                                "count": l.counts}) for l in self.layers]
        return pd.concat(frames, ignore_index=True)

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{"layer": l.layer, "mean": l.mean, "var": l.var, "image_mean_var": l.image_mean_var,
                              "tokens": l.tokens, "frac_above_0.8": self.fraction_above(l.layer, 0.8)}
                             for l in self.layers])

    def fraction_above(self, layer: int | None, threshold: float) -> float:
        vals = np.concatenate(self.values) if layer is None else self.values[layer]
        return float(np.mean(vals > threshold)) if vals.size else 0.0


def redundancy_profile(model: VitClassifier, images: Iterable, patch_size: int = PCC_PATCH,
                       bins: int = HIST_BINS) -> RedundancyProfile:
    """Score every block input (class token excluded) with finest routing."""
    per_layer: list[list[np.ndarray]] = [[] for _ in model.blocks]
    warned: set[int] = set()

    def hook(i: int, x: FeatureMap):
        scores, _, tiling = patch_pcc(x.spatial.data, x.height, x.width, patch_size)
        if tiling.truncated and i not in warned:
            warned.add(i)
            logger.warning("layer %d: %dx%d grid not tileable by %d, bottom-right truncated",
                           i, x.height, x.width, patch_size)
        per_layer[i].append(scores.reshape(-1))
        return None

    for image in images:
        model(image, force_theta="finest", layer_hook=hook)

    edges = np.linspace(-1.0, 1.0, bins + 1)
    layers, values = [], []
    for i, chunks in enumerate(per_layer):
        vals = np.concatenate(chunks) if chunks else np.zeros(0)
        counts, _ = np.histogram(vals, bins=edges)
        image_means = np.array([c.mean() for c in chunks]) if chunks else np.zeros(0)
        layers.append(LayerRedundancy(
            layer=i, bin_edges=edges, counts=counts,
            mean=float(vals.mean()) if vals.size else 0.0,
            var=float(vals.var()) if vals.size else 0.0,
            image_mean_var=float(image_means.var()) if image_means.size else 0.0,
            tokens=int(vals.size)))
        values.append(vals)
    return RedundancyProfile(layers=layers, values=values)


# ---- threshold sweep ----

def _replace_hook(threshold: float, masks: list[list[np.ndarray]], image_index: int,
                  stats: list[tuple[int, int, int]], patch_size: int):
    """Replace tokens whose clean-pass PCC is >= threshold by the current patch average."""

    def hook(i: int, x: FeatureMap):
        _, averages, tiling = patch_pcc(x.spatial.data, x.height, x.width, patch_size)
        replace = masks[i][image_index] >= threshold              # (P, m)
        tokens = x.height * x.width
        grouped = int(np.count_nonzero(replace.any(axis=1)))
        stats.append((i, tokens - int(replace.sum()) + grouped, int(replace.sum())))
        if not replace.any():
            return None
        data = x.spatial.data.copy()
        rows = tiling.tokens[replace]
        data[rows] = np.broadcast_to(averages[:, None, :], replace.shape + averages.shape[1:])[replace]
        return FeatureMap(Tensor(data), x.height, x.width, x.extra)

    return hook


def threshold_sweep(model: VitClassifier, images: Sequence, labels: Sequence[int], thresholds: Sequence[float],
                    patch_size: int = PCC_PATCH) -> pd.DataFrame:
    """Columns: threshold, replaced_frac, complexity_ratio, accuracy. Replacement decisions come
    from the clean pass so replaced_frac is non-increasing in threshold."""
    images = list(images)
    labels = np.asarray(labels)
    clean: list[list[np.ndarray]] = [[] for _ in model.blocks]

    def record(i: int, x: FeatureMap):
        scores, _, _ = patch_pcc(x.spatial.data, x.height, x.width, patch_size)
        clean[i].append(scores)
        return None

    for image in images:
        model(image, force_theta="finest", layer_hook=record)

    cfg = model.cfg
    rows = []
    for t in thresholds:
        correct, replaced, total_tokens = 0, 0, 0
        weighted, dense = 0.0, 0.0
        for n, image in enumerate(images):
            stats: list[tuple[int, int, int]] = []
            out = model(image, force_theta="finest", layer_hook=_replace_hook(t, clean, n, stats, patch_size))
            correct += int(out.predicted == int(labels[n]))
            for (i, queries, swapped), layer in zip(stats, out.layers):
                part = layer.partition
                cost = layer_cost(cfg.channels, cfg.mlp_ratio, part.height, part.width, layer.y.num_extra)
                weighted += cost.per_query * queries
                dense += cost.per_query * cost.dense_queries
                replaced += swapped
                total_tokens += cost.dense_queries
        rows.append({"threshold": float(t), "replaced_frac": replaced / max(total_tokens, 1),
                     "complexity_ratio": weighted / dense if dense else 1.0,
                     "accuracy": correct / max(len(images), 1)})
    return pd.DataFrame(rows, columns=["threshold", "replaced_frac", "complexity_ratio", "accuracy"])


# ---- heat-maps ----

def _write_pgm(path: Path, grid: np.ndarray, maxval: int) -> None:
    lines = ["P2", f"{grid.shape[1]} {grid.shape[0]}", str(maxval)]
    lines += [" ".join(str(int(v)) for v in row) for row in grid]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pgm(path: str | Path) -> np.ndarray:
    try:
        tokens = Path(path).read_text(encoding="ascii").split()
    except OSError as e:
        raise ArtifactError(f"cannot read heat-map {path}: {e}") from e
    if not tokens or tokens[0] != "P2":
        raise ArtifactError(f"{path} is not a plain PGM (P2) file")
    width, height = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:4 + width * height], dtype=np.intp).reshape(height, width)


def export_heatmaps(model: VitClassifier, images: Iterable, out_dir: str | Path, prefix: str = "img") -> list[Path]:
    """One PGM of theta per (image, layer) plus a JSON sidecar with legend and region rectangles."""
    out = Path(out_dir)
    written: list[Path] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for n, image in enumerate(images):
            result = model(image)
            for i, layer in enumerate(result.layers):
                if layer.decision is None:
                    continue
                part = layer.partition
                grid = layer.decision.theta.reshape(part.grid_rows, part.grid_cols)
                stem = out / f"{prefix}{n:04d}_layer{i}"
                _write_pgm(stem.with_suffix(".pgm"), grid, max(part.k - 1, 1))
                sidecar = layer.decision.to_dict(part, layer=i)
                sidecar.update({
                    "image": n, "height": part.height, "width": part.width, "region_size": part.region_size,
                    "legend": {str(k): phi for k, phi in enumerate(part.phi)}, "psi": layer.psi,
                })
                stem.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n",
                                                     encoding="utf-8")
                written += [stem.with_suffix(".pgm"), stem.with_suffix(".json")]
    except OSError as e:
        raise ArtifactError(f"cannot write heat-maps under {out}: {e}") from e
    return written


def psi_from_heatmap(pgm_path: str | Path) -> int:
    """Query count implied by an exported heat-map and its sidecar."""
    pgm_path = Path(pgm_path)
    grid = read_pgm(pgm_path)
    try:
        meta = json.loads(pgm_path.with_suffix(".json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactError(f"cannot read sidecar for {pgm_path}: {e}") from e
    part = partition(meta["height"], meta["width"], 1, meta["phi"], meta["region_size"])
    theta = grid.reshape(-1)
    return int(part.patch_counts[theta, np.arange(part.num_regions)].sum())


# ---- localization ----

def routing_localization(model: VitClassifier, images: Sequence, windows: Sequence) -> dict[str, float]:
    """Mean finest-granularity fraction for regions overlapping the signal window vs the rest.
    windows holds (top, left, size) in pixels."""
    p = model.cfg.patch_size
    inside, outside = [], []
    for image, (top, left, size) in zip(images, windows):
        out = model(image)
        t0, l0 = top // p, left // p
        t1, l1 = -(-(top + size) // p), -(-(left + size) // p)
        for layer in out.layers:
            if layer.decision is None:
                continue
            part = layer.partition
            finest = 1 if part.phi[0] == 0 else 0
            hits = np.array([_overlaps(part.region_rect(r), (t0, l0, t1, l1)) for r in range(part.num_regions)])
            is_finest = layer.decision.theta == finest
            if hits.any():
                inside.append(float(is_finest[hits].mean()))
            if (~hits).any():
                outside.append(float(is_finest[~hits].mean()))
    inner = float(np.mean(inside)) if inside else 0.0
    outer = float(np.mean(outside)) if outside else 0.0
    return {"inside": inner, "outside": outer, "margin": inner - outer}


def _overlaps(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]
