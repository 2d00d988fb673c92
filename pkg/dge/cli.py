# dge/cli.py
# Purpose: command-line surface, `python -m dge <command>`.
# Every command validates its configuration before building a model.

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from dge import settings
from dge.config import cli_overrides, load_config
from dge.errors import DgeError
from dge.schemas import RunConfig
from dge.tensor import set_precision

logger = logging.getLogger("dge.cli")

DEFAULT_THRESHOLDS = (1.01, 0.99, 0.95, 0.9, 0.85, 0.8, 0.7, 0.5, 0.0, -1.0)


def _phi(text: str) -> list[int]:
    try:
        return [int(p) for p in text.replace(",", " ").split()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"--phi expects integers like 1,2,4, got {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--budget", type=float, help="override the budget gamma")
    common.add_argument("--phi", type=_phi, help="candidate granularities, e.g. 1,2,4")
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--log-level", default=None)

    parser = argparse.ArgumentParser(prog="dge", description="Dynamic grained encoder toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("dataset", parents=[common], help="generate the synthetic glyph dataset")
    sub.add_parser("train", parents=[common], help="train a model and write checkpoints and metrics")
    for name, help_text in (("eval", "evaluate a checkpoint"), ("analyze", "redundancy profile and threshold sweep"),
                            ("heatmap", "export routing heat-maps"), ("bench", "dense vs routed latency")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint stem or manifest path")
        p.add_argument("--limit", type=int, default=None, help="use only the first N validation images")
        if name == "analyze":
            p.add_argument("--thresholds", type=float, nargs="+", default=list(DEFAULT_THRESHOLDS))
        if name == "bench":
            p.add_argument("--repetitions", type=int, default=5)
    return parser


def _config(args) -> RunConfig:
    overrides = cli_overrides(args.seed, args.out, args.budget, args.phi, args.precision)
    if args.out is None and args.config is None:
        overrides["out_dir"] = str(settings.out_dir() / "default")
    cfg = load_config(args.config, overrides)
    set_precision(cfg.train.precision)
    return cfg


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"[dge] wrote {path}", file=sys.stderr)


def _val_set(cfg: RunConfig, limit: int | None):
    from dge.dataset import make_dataset
    _, val = make_dataset(cfg.dataset)
    return val.subset(limit) if limit else val


def cmd_dataset(args, cfg: RunConfig) -> None:
    from dge.dataset import make_dataset, save_dataset
    train, val = make_dataset(cfg.dataset)
    path = save_dataset(cfg.out_path / "dataset.npz", train, val)
    print(f"[dge] wrote {path} ({len(train)} train / {len(val)} val)", file=sys.stderr)


def cmd_train(args, cfg: RunConfig) -> None:
    from dge.worker.train_worker import train
    result = train(cfg)
    print(json.dumps({"best": str(result.best), "final": str(result.final), "metrics": str(result.metrics),
                      "best_accuracy": result.best_accuracy, "final_accuracy": result.final_accuracy,
                      "steps": result.steps}, sort_keys=True))


def _load(args, cfg: RunConfig):
    from dge.harness import load_model
    model, trained = load_model(args.checkpoint)
    # the dataset always follows the checkpoint's architecture
    data_cfg = cfg.model_copy(update={"dataset": trained.dataset})
    return model, _val_set(data_cfg, args.limit)


def cmd_eval(args, cfg: RunConfig) -> None:
    from dge.harness import evaluate_model
    model, val = _load(args, cfg)
    result = evaluate_model(model, val)
    _write_json(cfg.out_path / "eval_report.json", result.to_dict())
    print(json.dumps({"accuracy": result.accuracy, "beta": result.beta}, sort_keys=True))


def cmd_analyze(args, cfg: RunConfig) -> None:
    from dge.analysis import redundancy_profile, threshold_sweep
    model, val = _load(args, cfg)
    out = cfg.out_path
    out.mkdir(parents=True, exist_ok=True)
    profile = redundancy_profile(model, val.images)
    profile.histogram_frame().to_csv(out / "pcc_histogram.csv", index=False)
    profile.summary_frame().to_csv(out / "pcc_summary.csv", index=False)
    sweep = threshold_sweep(model, val.images, val.labels, args.thresholds)
    sweep.to_csv(out / "threshold_sweep.csv", index=False)
    print(sweep.to_string(index=False))


def cmd_heatmap(args, cfg: RunConfig) -> None:
    from dge.analysis import export_heatmaps, routing_localization
    model, val = _load(args, cfg)
    written = export_heatmaps(model, val.images, cfg.out_path / "heatmaps")
    score = routing_localization(model, val.images, val.windows)
    _write_json(cfg.out_path / "localization.json", score)
    print(json.dumps({"files": len(written), **score}, sort_keys=True))


def cmd_bench(args, cfg: RunConfig) -> None:
    from dge.harness import bench
    model, val = _load(args, cfg)
    table = bench(model, val, args.repetitions)
    cfg.out_path.mkdir(parents=True, exist_ok=True)
    table.to_csv(cfg.out_path / "bench.csv", index=False)
    print(table.to_string(index=False))


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze,
            "heatmap": cmd_heatmap, "bench": cmd_bench}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings.configure_logging(args.log_level)
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except DgeError as e:
        logger.error("%s", e)
        print(f"dge {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0
