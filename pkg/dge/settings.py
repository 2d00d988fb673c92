# dge/settings.py
# Purpose: process-level settings from the environment (optionally a .env file).

from __future__ import annotations

import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

LOG_FORMAT = "[%(name)s] %(levelname)s %(message)s"


def out_dir() -> Path:
    return Path(os.getenv("DGE_OUT_DIR", "runs").strip())


def jobs_dir() -> Path:
    return Path(os.getenv("DGE_JOBS_DIR", "/tmp/dge_jobs").strip())


def redis_url() -> str | None:
    url = (os.getenv("REDIS_URL") or os.getenv("REDIS_TLS_URL") or "").strip()
    return url or None


def queue_name() -> str:
    return os.getenv("DGE_RQ_QUEUE", "dge").strip()


def log_level() -> str:
    return os.getenv("DGE_LOG_LEVEL", "INFO").strip().upper()


def pin_threads() -> None:
    # one BLAS thread per process keeps reductions reproducible
    for key in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(key, "1")


def configure_logging(level: str | None = None) -> None:
    root = logging.getLogger()
    if any(getattr(h, "_dge", False) for h in root.handlers):
        root.setLevel(level or log_level())
        return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._dge = True  # type: ignore[attr-defined]
    root.addHandler(handler)
    root.setLevel(level or log_level())
