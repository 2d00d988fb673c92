# dge/routes/runs.py
# Purpose: enqueue training runs on rq, poll their progress, download artifacts.

import traceback
from datetime import datetime, timezone
from pathlib import Path

from fastapi import APIRouter, HTTPException
from fastapi.params import Body
from fastapi.responses import FileResponse
from redis import Redis
from rq import Queue
from rq.job import Job

from dge import settings
from dge.config import validate
from dge.errors import ConfigError
from dge.schemas import RunRequest

router = APIRouter(prefix="/runs", tags=["runs"])

JOBS_DIR = settings.jobs_dir()

ARTIFACTS = {
    "metrics": ("metrics.jsonl", "application/x-ndjson"),
    "checkpoint": ("best.bin", "application/octet-stream"),
    "manifest": ("best.json", "application/json"),
    "report": ("report.json", "application/json"),
}


def job_dir(job_id: str) -> Path:
    return JOBS_DIR / job_id


def _redis() -> Redis:
    url = settings.redis_url()
    if not url:
        raise RuntimeError("REDIS_URL not set")
    return Redis.from_url(url)


def _queue() -> Queue:
    # toy runs finish in minutes; allow two hours for full default configs
    return Queue(settings.queue_name(), connection=_redis(), default_timeout=7200)


def run_payload(req: RunRequest) -> dict:
    data = dict(req.config)
    if req.seed is not None:
        data["seed"] = req.seed
    model = dict(data.get("model", {}))
    if req.budget is not None:
        model["gamma"] = req.budget
    if req.phi is not None:
        model["phi"] = req.phi
    if model:
        data["model"] = model
    if req.precision is not None:
        data["train"] = {**dict(data.get("train", {})), "precision": req.precision}
    return validate(data).model_dump(mode="json")


@router.post("/start")
def start(req: RunRequest = Body(...)):
    try:
        config = run_payload(req)
    except ConfigError as e:
        raise HTTPException(status_code=400, detail=str(e))
    job_id = datetime.now(timezone.utc).strftime("%Y%m%d%H%M%S%f")
    payload = {"job_id": job_id, "config": config, "jobs_dir": str(JOBS_DIR)}
    try:
        q = _queue()
        job = q.enqueue("dge.worker.train_worker.run_job", kwargs=payload, job_id=job_id,
                        ttl=86400, result_ttl=86400, timeout=7200)
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"enqueue failed: {e}\n{traceback.format_exc()}")
    return {"job_id": job.id, "state": job.get_status(refresh=False) or "queued"}


@router.get("/status")
def status(job_id: str):
    try:
        job = Job.fetch(job_id, connection=_redis())
    except Exception:
        raise HTTPException(status_code=404, detail="job not found")
    state = job.get_status(refresh=False)
    meta = job.meta or {}
    resp = {"job_id": job_id, "state": state or "unknown"}
    if "progress" in meta:
        resp["progress"] = int(meta["progress"])
    if "message" in meta:
        resp["message"] = str(meta["message"])
    if state == "failed" and job.exc_info:
        try:
            resp["message"] = job.exc_info.strip().splitlines()[-1]
        except Exception:
            resp["message"] = "failed"
    return resp


@router.get("/download")
def download(job_id: str, artifact: str = "metrics"):
    if artifact not in ARTIFACTS:
        raise HTTPException(status_code=400, detail=f"unknown artifact {artifact!r}, expected one of {sorted(ARTIFACTS)}")
    name, media_type = ARTIFACTS[artifact]
    f = job_dir(job_id) / name
    if not f.exists():
        raise HTTPException(status_code=404, detail="file not ready")
    return FileResponse(f, media_type=media_type, filename=f"{job_id}_{name}")
