# dge/main.py
# Purpose: FastAPI app exposing training runs and routing decisions.

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from dge import settings
from dge.routes import routing as _routing
from dge.routes import runs as _runs

settings.configure_logging()

app = FastAPI(title="DGE Backend")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(_runs.router)
app.include_router(_routing.router)


@app.get("/", include_in_schema=False)
def root():
    return {"ok": True, "service": "dge-backend"}


@app.get("/health", include_in_schema=False)
def health():
    return {"status": "ok"}
