# dge/worker/train_worker.py
# Purpose: training loop (Gumbel routing -> task + budget loss -> backward -> AdamW)
# and the rq job entry point that wraps it with progress reporting.

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from dge import settings
from dge.budget import batch_complexity_ratio, complexity_ratio, total_loss, trace
from dge.checkpoint import save_checkpoint
from dge.config import validate
from dge.dataset import make_dataset
from dge.encoder import VitClassifier
from dge.errors import ArtifactError, NumericError, TrainingAborted
from dge.harness import evaluate_model
from dge.optim import AdamW
from dge.rng import RngStream
from dge.schemas import MetricsRecord, RunConfig
from dge.tensor import concat, cross_entropy, precision, reduce_mean

settings.pin_threads()

logger = logging.getLogger(__name__)

SHUFFLE_STREAM_BASE = 10_000
ROUTING_STREAM_BASE = 1_000_000
NO_DECAY_NAMES = ("pos_embed", "cls_token")

Tick = Callable[[str, int, str], None]


@dataclass
class TrainResult:
    best: Path
    final: Path
    metrics: Path
    report: Path
    best_accuracy: float
    final_accuracy: float
    steps: int


def no_decay_names(model: VitClassifier) -> list[str]:
    return [n for n, p in model.named_parameters() if p.ndim < 2 or n in NO_DECAY_NAMES]


def _save(model: VitClassifier, config: RunConfig, stem: Path) -> Path:
    return save_checkpoint(stem, model.state_dict(), config.model_dump(mode="json"))


def _append(path: Path, record: MetricsRecord) -> None:
    line = json.dumps(record.model_dump(mode="json", exclude_none=True), sort_keys=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def train(config: RunConfig, tick: Optional[Tick] = None) -> TrainResult:
    config = validate(config.model_dump())
    out = config.out_path
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ArtifactError(f"cannot create output directory {out}: {e}") from e
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("", encoding="utf-8")
    tick = tick or (lambda state, progress, message: None)

    with precision(config.train.precision):
        return _run(config, out, metrics_path, tick)


def _run(config: RunConfig, out: Path, metrics_path: Path, tick: Tick) -> TrainResult:
    train_set, val_set = make_dataset(config.dataset)
    model = VitClassifier(config.model, seed=config.seed)
    opt_cfg = config.optim
    optimizer = AdamW(model.named_parameters(), lr=opt_cfg.lr, weight_decay=opt_cfg.weight_decay,
                      betas=(opt_cfg.beta1, opt_cfg.beta2), eps=opt_cfg.eps, no_decay=no_decay_names(model))
    gamma, lam = config.model.gamma, config.model.lam
    tc = config.train
    n = len(train_set)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    if tc.max_steps:
        total_steps = min(total_steps, tc.max_steps)

    best_stem, final_stem = out / "best", out / "final"
    best_acc = -1.0
    step = 0
    started = time.perf_counter()
    logger.info("training %d params for %d steps (gamma=%.3f lam=%.3f phi=%s)",
                sum(p.size for p in model.parameters()), total_steps, gamma, lam, config.model.phi)

    for epoch in range(tc.epochs):
        order = RngStream(config.seed, SHUFFLE_STREAM_BASE + epoch).permutation(n)
        for start in range(0, n, tc.batch_size):
            if step >= total_steps:
                break
            batch = order[start:start + tc.batch_size]
            task_terms, betas, correct = [], [], 0
            psi = np.zeros(config.model.depth)
            # parameters are untouched until optimizer.step() succeeds
            try:
                for j, idx in enumerate(batch):
                    rng = RngStream(config.seed, ROUTING_STREAM_BASE + epoch * n + start + j)
                    result = model(train_set.images[idx], training=True, rng=rng)
                    task_terms.append(cross_entropy(result.logits, int(train_set.labels[idx])))
                    betas.append(complexity_ratio(trace(model, result)))
                    correct += int(result.predicted == int(train_set.labels[idx]))
                    psi += [layer.psi for layer in result.layers]
                task = reduce_mean(concat([t.reshape(1) for t in task_terms]))
                beta = batch_complexity_ratio(betas)
                loss = total_loss(task, beta, gamma, lam)
                if not np.isfinite(loss.total.item()):
                    raise NumericError(f"loss is {loss.total.item()}")
                loss.total.backward()
                optimizer.step()
            except NumericError as e:
                last_good = _save(model, config, out / "last_good")
                logger.error("non-finite values at step %d (%s), saved %s", step, e, last_good)
                raise TrainingAborted(f"non-finite values at step {step}: {e}", last_good=str(last_good)) from e
            optimizer.zero_grad()
            step += 1

            record = MetricsRecord(
                step=step, epoch=epoch, task_loss=loss.task.item(), budget_loss=loss.budget.item(),
                beta=beta.item(), accuracy=correct / len(batch), psi=(psi / len(batch)).tolist(),
                wall_clock=time.perf_counter() - started if tc.log_wall_clock else None,
            )
            _append(metrics_path, record)
            if step % tc.log_every == 0 or step == total_steps:
                logger.info("step %d: task=%.4f budget=%.4f beta=%.3f acc=%.3f", step, record.task_loss,
                            record.budget_loss, record.beta, record.accuracy)
            tick("training", 5 + int(85 * step / max(total_steps, 1)), f"step {step}/{total_steps}")

        val = evaluate_model(model, val_set)
        logger.info("epoch %d: val accuracy=%.4f beta=%.4f", epoch, val.accuracy, val.beta)
        if val.accuracy > best_acc:
            best_acc = val.accuracy
            _save(model, config, best_stem)
        if step >= total_steps:
            break

    tick("finalizing", 95, "evaluating final model")
    _save(model, config, final_stem)
    final = evaluate_model(model, val_set)
    report_path = out / "report.json"
    report_path.write_text(json.dumps({"final": final.to_dict(), "best_accuracy": best_acc, "steps": step},
                                      sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return TrainResult(best=best_stem.with_suffix(".json"), final=final_stem.with_suffix(".json"),
                       metrics=metrics_path, report=report_path, best_accuracy=best_acc,
                       final_accuracy=final.accuracy, steps=step)


def run_job(job_id: str, config: dict[str, Any], jobs_dir: str):
    from rq import get_current_job
    job = get_current_job()

    def tick(state, progress, message):
        job.meta["progress"] = int(progress)
        job.meta["message"] = f"{state} - {message}"
        job.save_meta()

    job.meta["progress"] = 2; job.meta["message"] = "queued"; job.save_meta()
    settings.configure_logging()
    data = dict(config)
    data["out_dir"] = str(Path(jobs_dir) / job_id)
    run_config = validate(data)

    result = train(run_config, tick)

    job.meta["progress"] = 100; job.meta["message"] = "ready"; job.save_meta()
    return {"best": str(result.best), "final": str(result.final), "metrics": str(result.metrics),
            "report": str(result.report), "best_accuracy": result.best_accuracy,
            "final_accuracy": result.final_accuracy}
