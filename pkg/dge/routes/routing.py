# dge/routes/routing.py
# Purpose: per-image gating decisions and budget report from a finished run's checkpoint.

import traceback

import numpy as np
from fastapi import APIRouter, HTTPException
from fastapi.params import Body

from dge.budget import flops_report
from dge.errors import CheckpointError, DgeError, DimensionError
from dge.harness import load_model
from dge.routes.runs import job_dir
from dge.schemas import RoutingRequest

router = APIRouter(prefix="/routing", tags=["routing"])


@router.post("/decide")
def decide(req: RoutingRequest = Body(...)):
    stem = job_dir(req.job_id) / req.checkpoint
    if not stem.with_suffix(".json").exists():
        raise HTTPException(status_code=404, detail=f"no {req.checkpoint} checkpoint for job {req.job_id}")
    try:
        model, _ = load_model(stem)
        out = model(np.asarray(req.image, dtype=np.float64))
    except (DimensionError, CheckpointError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    except DgeError as e:
        raise HTTPException(status_code=500, detail=f"{type(e).__name__}: {e}\n{traceback.format_exc()}")
    layers = [layer.decision.to_dict(layer.partition, layer=i)
              for i, layer in enumerate(out.layers) if layer.decision is not None]
    return {"job_id": req.job_id, "predicted": out.predicted, "layers": layers,
            "report": flops_report(model, out).model_dump(mode="json")}
