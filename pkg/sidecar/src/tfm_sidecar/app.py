"""FastAPI application implementing the predictor wire protocol.

Endpoints:
  POST   /session       fit an in-context model on the support set
  POST   /predict       row-stochastic probabilities, columns in class_ids order
  DELETE /session/{id}  free the session (expired sessions behave as deleted)

Configuration is environment-only: MODEL_NAME (logreg | knn | forest),
DEVICE (cpu), SESSION_TTL_S, BEARER_TOKEN (optional; enables auth).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from fastapi import Depends, FastAPI, Header, HTTPException
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .models import MAX_CLASSES, MAX_DIM, MAX_SUPPORT, BACKENDS, fit_in_context
from .sessions import SessionStore


@dataclass
class SidecarConfig:
    model_name: str = "logreg"
    device: str = "cpu"
    session_ttl_s: float = 3600.0
    bearer_token: str | None = None
    seed: int = 0

    @classmethod
    def from_env(cls) -> "SidecarConfig":
        return cls(
            model_name=os.environ.get("MODEL_NAME", "logreg"),
            device=os.environ.get("DEVICE", "cpu"),
            session_ttl_s=float(os.environ.get("SESSION_TTL_S", "3600")),
            bearer_token=os.environ.get("BEARER_TOKEN") or None,
        )

    def validate(self) -> None:
        if self.model_name not in BACKENDS:
            raise ValueError(
                f"MODEL_NAME {self.model_name!r} not available; choose from {sorted(BACKENDS)}"
            )
        if self.device != "cpu":
            raise ValueError(f"DEVICE {self.device!r} not available; only cpu is supported")
        if self.session_ttl_s <= 0:
            raise ValueError("SESSION_TTL_S must be positive")


class SupportPayload(BaseModel):
    features: list[list[float]]
    labels: list[int]


class SessionRequest(BaseModel):
    d: int = Field(ge=1)
    C: int = Field(ge=1)
    class_ids: list[int]
    support: SupportPayload


class PredictRequest(BaseModel):
    session_id: str
    queries: list[list[float]]


def _error(status: int, code: str, message: str) -> HTTPException:
    return HTTPException(status, detail={"code": code, "message": message})


def create_app(config: SidecarConfig | None = None) -> FastAPI:
    cfg = config or SidecarConfig.from_env()
    cfg.validate()
    store = SessionStore(ttl_s=cfg.session_ttl_s)
    app = FastAPI(title="tfm-sidecar")
    app.state.config = cfg
    app.state.store = store

    @app.exception_handler(HTTPException)
    async def http_error(request, exc: HTTPException):
        detail = exc.detail
        if not isinstance(detail, dict):
            detail = {"code": "error", "message": str(detail)}
        return JSONResponse(status_code=exc.status_code, content={"error": detail})

    async def authorized(authorization: str | None = Header(default=None)) -> None:
        if cfg.bearer_token is None:
            return
        if authorization != f"Bearer {cfg.bearer_token}":
            raise _error(401, "unauthorized", "missing or invalid bearer token")

    @app.post("/session", dependencies=[Depends(authorized)])
    def create_session(req: SessionRequest):
        if req.C < 2:
            raise _error(422, "capability", "need at least 2 classes")
        if req.C > MAX_CLASSES:
            raise _error(422, "capability", f"C={req.C} exceeds max classes {MAX_CLASSES}")
        if req.d > MAX_DIM:
            raise _error(422, "capability", f"d={req.d} exceeds max dim {MAX_DIM}")
        if len(req.class_ids) != req.C:
            raise _error(422, "capability", "class_ids length must equal C")
        if len(set(req.class_ids)) != req.C:
            raise _error(422, "capability", "class_ids must be distinct")
        try:
            features = np.asarray(req.support.features, dtype=np.float64)
        except ValueError:
            raise _error(422, "capability", "support features must be rectangular")
        labels = np.asarray(req.support.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[1] != req.d:
            raise _error(422, "capability", "support features must be n x d")
        if labels.shape[0] != features.shape[0]:
            raise _error(422, "capability", "labels length must match features")
        if features.shape[0] > MAX_SUPPORT:
            raise _error(422, "capability", f"support exceeds max size {MAX_SUPPORT}")
        known = set(req.class_ids)
        if not set(int(v) for v in labels) <= known:
            raise _error(422, "capability", "support labels outside class_ids")
        if len(set(int(v) for v in labels)) < 2:
            raise _error(422, "capability", "support must contain at least 2 classes")
        if not np.all(np.isfinite(features)):
            raise _error(422, "capability", "support features must be finite")
        model = fit_in_context(cfg.model_name, features, labels, req.class_ids, cfg.seed)
        sid = store.create(model, req.d, req.class_ids)
        return {"session_id": sid}

    @app.post("/predict", dependencies=[Depends(authorized)])
    def predict(req: PredictRequest):
        session = store.get(req.session_id)
        if session is None:
            raise _error(404, "not_found", "unknown or expired session")
        try:
            queries = np.asarray(req.queries, dtype=np.float64)
        except ValueError:
            raise _error(422, "capability", "queries must be rectangular")
        if queries.size == 0:
            return {"probabilities": []}
        if queries.ndim != 2 or queries.shape[1] != session.d:
            raise _error(422, "capability", f"queries must be m x {session.d}")
        if not np.all(np.isfinite(queries)):
            raise _error(422, "capability", "queries must be finite")
        probs = session.model.predict_proba(queries)
        return {"probabilities": probs.tolist()}

    @app.delete("/session/{session_id}", dependencies=[Depends(authorized)])
    def delete_session(session_id: str):
        if not store.delete(session_id):
            raise _error(404, "not_found", "unknown or expired session")
        return {}

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "model": cfg.model_name, "sessions": len(store)}

    return app
