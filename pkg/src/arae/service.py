"""JSON-over-HTTP inference service on top of a loaded, immutable checkpoint.

Endpoints: GET /health, GET /labels, POST /generate, POST /discriminate.
Malformed request bodies return 400; well-formed requests that violate a
contract (count cap, label on an unconditional model, empty caption) return
422. Every endpoint is read-only and deterministic given request seeds.
"""
from __future__ import annotations

import itertools
import logging
import secrets

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import model as M
from .checkpoint import load_checkpoint

GENERATE_CAP = 100

log = logging.getLogger("arae.service")


class GenerateRequest(BaseModel):
    count: int
    label: str | None = None
    seed: int | None = None


class GenerateResponse(BaseModel):
    captions: list[str]


class DiscriminateRequest(BaseModel):
    caption: str


class DiscriminateResponse(BaseModel):
    score: float
    threshold: float
    verdict: str
    label: str | None = None


def create_app(ckpt):
    app = FastAPI(title="arae-service")
    counter = itertools.count(1)

    @app.exception_handler(RequestValidationError)
    async def malformed_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": "malformed request body"})

    @app.middleware("http")
    async def count_requests(request: Request, call_next):
        rid = next(counter)
        response = await call_next(request)
        log.info("request %d: %s %s -> %d", rid, request.method, request.url.path, response.status_code)
        return response

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/labels", response_model=list[str])
    def labels():
        return ckpt.label_names if ckpt.conditional else []

    @app.post("/generate", response_model=GenerateResponse)
    def generate(req: GenerateRequest):
        if req.count < 1:
            raise HTTPException(status_code=422, detail="count must be at least 1")
        if req.count > GENERATE_CAP:
            raise HTTPException(
                status_code=422, detail=f"count exceeds the per-request cap of {GENERATE_CAP}"
            )
        label_id = None
        if req.label is not None:
            if not ckpt.conditional:
                raise HTTPException(
                    status_code=422, detail="label supplied to an unconditional model"
                )
            if req.label not in ckpt.label_names:
                raise HTTPException(status_code=422, detail=f"unknown label {req.label!r}")
            label_id = ckpt.label_names.index(req.label)
        seed = req.seed if req.seed is not None else secrets.randbits(31)
        return GenerateResponse(captions=M.generate(ckpt, req.count, label=label_id, seed=seed))

    @app.post("/discriminate", response_model=DiscriminateResponse)
    def discriminate(req: DiscriminateRequest):
        try:
            result = M.discriminate(ckpt, req.caption)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return DiscriminateResponse(
            score=result.score,
            threshold=result.threshold,
            verdict=result.verdict,
            label=result.label,
        )

    return app


def serve(ckpt_path, bind_addr):
    """Load the checkpoint, then serve until shutdown."""
    import uvicorn

    ckpt = load_checkpoint(ckpt_path)
    host, _, port = bind_addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bind address must be HOST:PORT, got {bind_addr!r}")
    logging.basicConfig(level=logging.INFO)
    uvicorn.run(create_app(ckpt), host=host, port=int(port), log_level="info")
