# dge/dataset.py
# Purpose: synthetic localized-glyph classification set. Each grayscale image is
# background noise with one class glyph stamped into a random square window.

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dge.errors import ArtifactError, ConfigError
from dge.rng import RngStream
from dge.schemas import DatasetSpec

TRAIN_STREAM = 0
VAL_STREAM = 1
GLYPH_NAMES = ("hbar", "vbar", "diag", "antidiag", "plus", "cross", "box", "dot")


def glyph(label: int, size: int) -> np.ndarray:
    """Binary size x size pattern for class `label`."""
    g = np.zeros((size, size), dtype=np.float32)
    mid = size // 2
    thick = max(1, size // 6)
    lo, hi = mid - thick // 2, mid - thick // 2 + thick
    eye = np.eye(size, dtype=bool)
    name = GLYPH_NAMES[label]
    if name == "hbar":
        g[lo:hi, :] = 1
    elif name == "vbar":
        g[:, lo:hi] = 1
    elif name == "diag":
        g[eye] = 1
    elif name == "antidiag":
        g[eye[:, ::-1]] = 1
    elif name == "plus":
        g[lo:hi, :] = 1
        g[:, lo:hi] = 1
    elif name == "cross":
        g[eye | eye[:, ::-1]] = 1
    elif name == "box":
        g[[0, -1], :] = 1
        g[:, [0, -1]] = 1
    else:
        q = max(1, size // 4)
        g[mid - q:mid + q, mid - q:mid + q] = 1
    return g


@dataclass
class GlyphSet:
    images: np.ndarray    # (n, H, W) float32
    labels: np.ndarray    # (n,) int64
    windows: np.ndarray   # (n, 3) top, left, size in pixels

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, count: int) -> "GlyphSet":
        return GlyphSet(self.images[:count], self.labels[:count], self.windows[:count])


def _generate(spec: DatasetSpec, count: int, rng: RngStream) -> GlyphSet:
    size, w, k = spec.image_size, spec.window, spec.num_classes
    labels = (np.arange(count) % k)[rng.permutation(count)].astype(np.int64)
    tops = rng.integers(0, size - w + 1, count)
    lefts = rng.integers(0, size - w + 1, count)
    noise = rng.normal((count, size, size), std=spec.noise) if spec.noise > 0 else np.zeros((count, size, size))
    images = noise.astype(np.float32)
    stamps = [glyph(c, w) for c in range(k)]
    for n in range(count):
        images[n, tops[n]:tops[n] + w, lefts[n]:lefts[n] + w] += stamps[labels[n]]
    windows = np.stack([tops, lefts, np.full(count, w)], axis=1).astype(np.int64)
    return GlyphSet(images, labels, windows)


def make_dataset(spec: DatasetSpec) -> tuple[GlyphSet, GlyphSet]:
    if spec.window > spec.image_size:
        raise ConfigError(f"signal window {spec.window} is larger than the {spec.image_size}px image")
    if spec.num_classes > len(GLYPH_NAMES):
        raise ConfigError(f"only {len(GLYPH_NAMES)} glyph classes exist, got num_classes={spec.num_classes}")
    train = _generate(spec, spec.train_size, RngStream(spec.seed, TRAIN_STREAM))
    val = _generate(spec, spec.val_size, RngStream(spec.seed, VAL_STREAM))
    return train, val


def save_dataset(path: str | Path, train: GlyphSet, val: GlyphSet) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, train_images=train.images, train_labels=train.labels, train_windows=train.windows,
                 val_images=val.images, val_labels=val.labels, val_windows=val.windows)
    except OSError as e:
        raise ArtifactError(f"cannot write dataset {path}: {e}") from e
    return path if path.suffix == ".npz" else path.with_name(path.name + ".npz")


def load_dataset(path: str | Path) -> tuple[GlyphSet, GlyphSet]:
    try:
        with np.load(Path(path)) as data:
            sets = tuple(GlyphSet(data[f"{s}_images"], data[f"{s}_labels"], data[f"{s}_windows"])
                         for s in ("train", "val"))
    except (OSError, KeyError, ValueError) as e:
        raise ArtifactError(f"cannot read dataset {path}: {e}") from e
    return sets  # type: ignore[return-value]
