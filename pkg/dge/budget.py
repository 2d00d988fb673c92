# dge/budget.py
# Purpose: complexity accounting. beta is the realized dynamic cost over the dense
# dynamic cost; its backward uses the soft query count sum_i p_i * N_i. Static
# cost (k/v projections, gating, pooling, un-pooling, embedding, head) is reported
# separately and kept out of beta.

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from dge.encoder import ClassifierOutput, VitClassifier
from dge.errors import ConfigError, UsageError
from dge.router import GatingDecision, RegionPartition
from dge.schemas import BudgetReport, LayerBudget
from dge.tensor import Tensor, concat, count_flops, reduce_mean, reduce_sum, straight_through

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerCost:
    per_query: float   # C^l, FLOPs to push one query through the encoder
    height: int
    width: int
    static: float

    @property
    def dense_queries(self) -> int:
        return self.height * self.width


def layer_cost(channels: int, mlp_ratio: float, height: int, width: int, num_extra: int = 0,
               part: RegionPartition | None = None) -> LayerCost:
    """2 FLOPs per multiply-accumulate. part=None prices the dense path (no router)."""
    c = channels
    hidden = int(round(channels * mlp_ratio))
    tokens = height * width
    m = tokens + num_extra
    per_query = 4 * c * c + 4 * c * m + 4 * c * hidden
    static = 4 * m * c * c + num_extra * per_query
    if part is not None:
        static += 3 * tokens * c + 2 * part.num_regions * c * part.k
    return LayerCost(float(per_query), height, width, float(static))


def query_count(theta, part: RegionPartition) -> int:
    theta = np.asarray(theta, dtype=np.intp)
    return int(part.patch_counts[theta, np.arange(part.num_regions)].sum())


def _region_queries(decision: GatingDecision) -> np.ndarray:
    if decision.region_queries is None:
        raise UsageError("gating decision carries no per-region query counts; route it through a block first")
    return decision.region_queries


def soft_query_count(decision: GatingDecision) -> Tensor:
    if decision.p is None:
        raise UsageError("soft query count needs a training-mode decision")
    return reduce_sum(decision.p * _region_queries(decision).astype(np.float64))


Trace = Sequence[tuple[LayerCost, GatingDecision | None]]


def complexity_ratio(layers: Trace) -> Tensor:
    """Forward: sum C^l psi^l / sum C^l H^l W^l. Backward (training decisions): psi^l -> sum_i p_i N_i."""
    if not layers:
        raise UsageError("complexity_ratio needs at least one layer")
    denom = sum(cost.per_query * cost.dense_queries for cost, _ in layers)
    hard = 0.0
    fixed = 0.0
    soft_terms: list[Tensor] = []
    for cost, decision in layers:
        psi = cost.dense_queries if decision is None else int(_region_queries(decision).sum())
        hard += cost.per_query * psi
        if decision is not None and decision.training and decision.p is not None:
            soft_terms.append(soft_query_count(decision) * (cost.per_query / denom))
        else:
            fixed += cost.per_query * psi
    beta = hard / denom
    if not soft_terms:
        return Tensor(beta)
    soft = reduce_sum(concat([t.reshape(1) for t in soft_terms])) + fixed / denom
    return straight_through(beta, soft)


def batch_complexity_ratio(betas: Sequence[Tensor]) -> Tensor:
    if not betas:
        raise UsageError("batch_complexity_ratio needs at least one item")
    return reduce_mean(concat([b.reshape(1) for b in betas]))


def budget_loss(beta: Tensor, gamma: float, lam: float) -> Tensor:
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"budget gamma must lie in [0, 1], got {gamma}")
    return lam * (beta - gamma) ** 2


@dataclass
class LossBreakdown:
    total: Tensor
    task: Tensor
    budget: Tensor


def total_loss(task_loss: Tensor, beta: Tensor, gamma: float, lam: float) -> LossBreakdown:
    if task_loss.size != 1:
        raise UsageError(f"task loss must be scalar, got shape {task_loss.shape}")
    budget = budget_loss(beta, gamma, lam)
    return LossBreakdown(total=task_loss + budget, task=task_loss, budget=budget)


# ---- reports ----

def model_static_flops(model: VitClassifier) -> float:
    cfg = model.cfg
    tokens = cfg.grid_size * cfg.grid_size
    embed = 2 * tokens * cfg.patch_size * cfg.patch_size * cfg.in_channels * cfg.channels
    head = 2 * cfg.channels * cfg.num_classes
    return float(embed + head)


def layer_costs(model: VitClassifier, output: ClassifierOutput) -> list[LayerCost]:
    cfg = model.cfg
    costs = []
    for layer in output.layers:
        part = layer.partition
        costs.append(layer_cost(cfg.channels, cfg.mlp_ratio, part.height, part.width,
                                layer.y.num_extra, None if layer.dense else part))
    return costs


def trace(model: VitClassifier, output: ClassifierOutput) -> list[tuple[LayerCost, GatingDecision | None]]:
    return list(zip(layer_costs(model, output), [layer.decision for layer in output.layers]))


def flops_report(model: VitClassifier, output: ClassifierOutput) -> BudgetReport:
    rows: list[LayerBudget] = []
    costs = layer_costs(model, output)
    for i, (cost, layer) in enumerate(zip(costs, output.layers)):
        soft = None
        if layer.decision is not None and layer.decision.p is not None:
            soft = float(soft_query_count(layer.decision).item())
        rows.append(LayerBudget(
            layer=i, height=cost.height, width=cost.width, psi=float(layer.psi), soft_psi=soft,
            per_query_cost=cost.per_query, dense_queries=cost.dense_queries,
            beta=layer.psi / cost.dense_queries, dynamic_flops=cost.per_query * layer.psi,
            static_flops=cost.static,
        ))
    dynamic = sum(r.dynamic_flops for r in rows)
    static = sum(r.static_flops for r in rows) + model_static_flops(model)
    beta = dynamic / sum(c.per_query * c.dense_queries for c in costs)
    return BudgetReport(layers=rows, beta=beta, dynamic_flops=dynamic, static_flops=static,
                        total_flops=dynamic + static)


def aggregate_reports(reports: Iterable[BudgetReport]) -> BudgetReport:
    """Per-image mean of every field; beta is averaged along the batch as in training."""
    reports = list(reports)
    if not reports:
        raise UsageError("no reports to aggregate")

    def mean(values) -> float:
        return float(np.mean(list(values)))

    layers = []
    for i, first in enumerate(reports[0].layers):
        per = [r.layers[i] for r in reports]
        soft = [l.soft_psi for l in per]
        layers.append(first.model_copy(update={
            "psi": mean(l.psi for l in per),
            "soft_psi": None if any(s is None for s in soft) else mean(soft),
            "beta": mean(l.beta for l in per),
            "dynamic_flops": mean(l.dynamic_flops for l in per),
            "static_flops": mean(l.static_flops for l in per),
        }))
    return BudgetReport(
        layers=layers,
        beta=mean(r.beta for r in reports),
        dynamic_flops=mean(r.dynamic_flops for r in reports),
        static_flops=mean(r.static_flops for r in reports),
        total_flops=mean(r.total_flops for r in reports),
        images=sum(r.images for r in reports),
    )


def measure_flops(model: VitClassifier, image, **forward_kwargs) -> tuple[BudgetReport, int]:
    """Analytic report plus the instrumented tally of the same inference pass."""
    with count_flops() as counter:
        output = model(image, **forward_kwargs)
    report = flops_report(model, output)
    if abs(report.total_flops - counter.total) > 0.01 * counter.total:
        logger.warning("analytic FLOPs %.0f differ from counted %d by more than 1%%",
                       report.total_flops, counter.total)
    return report, counter.total
