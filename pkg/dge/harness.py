# dge/harness.py
# Purpose: checkpoint loading, deterministic evaluation and the CPU latency bench.

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import ValidationError

from dge.budget import aggregate_reports, flops_report
from dge.checkpoint import load_checkpoint
from dge.dataset import GlyphSet
from dge.encoder import VitClassifier
from dge.errors import CheckpointError
from dge.schemas import BudgetReport, RunConfig

logger = logging.getLogger(__name__)


def load_model(stem: str | Path) -> tuple[VitClassifier, RunConfig]:
    manifest, params = load_checkpoint(stem)
    try:
        cfg = RunConfig.model_validate(manifest.get("architecture", {}))
    except ValidationError as e:
        raise CheckpointError(f"checkpoint {stem} records an invalid architecture: {e}") from e
    model = VitClassifier(cfg.model, seed=cfg.seed)
    model.load_state_dict(params)
    return model, cfg


@dataclass
class EvalResult:
    accuracy: float
    beta: float
    report: BudgetReport
    predictions: np.ndarray

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "beta": self.beta, "report": self.report.model_dump(mode="json")}


def evaluate_model(model: VitClassifier, data: GlyphSet, **forward_kwargs) -> EvalResult:
    """Inference routing (argmax, no sampling) over every image."""
    preds, reports = [], []
    for image in data.images:
        out = model(image, **forward_kwargs)
        preds.append(out.predicted)
        reports.append(flops_report(model, out))
    preds = np.asarray(preds, dtype=np.int64)
    report = aggregate_reports(reports)
    accuracy = float(np.mean(preds == data.labels)) if len(data) else 0.0
    return EvalResult(accuracy=accuracy, beta=report.beta, report=report, predictions=preds)


def evaluate(checkpoint: str | Path, data: GlyphSet) -> EvalResult:
    model, _ = load_model(checkpoint)
    result = evaluate_model(model, data)
    logger.info("evaluated %s on %d images: accuracy=%.4f beta=%.4f", checkpoint, len(data),
                result.accuracy, result.beta)
    return result


def _timed(model: VitClassifier, images, repetitions: int, **forward_kwargs) -> tuple[np.ndarray, list[BudgetReport]]:
    per_image = []
    reports = []
    for image in images:
        samples = []
        for _ in range(repetitions):
            start = time.perf_counter()
            out = model(image, **forward_kwargs)
            samples.append(time.perf_counter() - start)
        per_image.append(np.median(samples))
        reports.append(flops_report(model, out))
    return np.asarray(per_image) * 1e3, reports


def bench(model: VitClassifier, data: GlyphSet, repetitions: int = 5) -> pd.DataFrame:
    """Wall-clock per image for dense-forced vs routed inference, FLOPs alongside."""
    repetitions = max(int(repetitions), 1)
    rows = []
    dense_flops = None
    for mode, kwargs in (("dense", {"dense": True}), ("routed", {})):
        ms, reports = _timed(model, data.images, repetitions, **kwargs)
        report = aggregate_reports(reports)
        if dense_flops is None:
            dense_flops = report.total_flops
        rows.append({
            "mode": mode,
            "median_ms": float(np.median(ms)),
            "p95_ms": float(np.percentile(ms, 95)),
            "total_flops": report.total_flops,
            "flops_ratio": report.beta,
            "total_flops_ratio": report.total_flops / dense_flops if dense_flops else 1.0,
        })
    return pd.DataFrame(rows, columns=["mode", "median_ms", "p95_ms", "total_flops", "flops_ratio",
                                       "total_flops_ratio"])
