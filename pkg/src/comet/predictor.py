"""In-context classifier backends.

The contract: predict(query features, labeled support) returns a
row-stochastic m x C matrix whose columns follow the sorted distinct
support labels. The reference implementation is a Gaussian-kernel class
posterior; the remote client speaks the JSON-over-HTTP wire protocol
(POST /session, POST /predict, DELETE /session/{id}).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import requests

from .data import FeatureMatrix
from .errors import DataError, PredictorError
from . import kernels
from .numerics import seeded_rng, standardize


def _as_values(qry) -> np.ndarray:
    if isinstance(qry, FeatureMatrix):
        return qry.values
    return np.asarray(qry, dtype=np.float64)


def _support_parts(sup: FeatureMatrix) -> tuple[np.ndarray, np.ndarray]:
    if not isinstance(sup, FeatureMatrix) or sup.labels is None:
        raise DataError("support must be a labeled FeatureMatrix")
    return sup.values, sup.labels


class InContextClassifier:
    """Base contract; subclasses implement predict."""

    max_support: int | None = None
    max_classes: int | None = None
    max_dim: int | None = None

    def predict(self, qry, sup: FeatureMatrix) -> np.ndarray:
        raise NotImplementedError


@dataclass
class ReferencePredictorConfig:
    bandwidth_scale: float = 1.0
    smoothing_alpha: float = 1.0
    standardize: bool = True
    seed: int = 0  # bandwidth-subsample stream
    bandwidth_subsample: int = 2000

    def __post_init__(self):
        if self.bandwidth_scale <= 0:
            raise DataError("bandwidth_scale must be positive")
        if self.smoothing_alpha < 0:
            raise DataError("smoothing_alpha must be >= 0")


class ReferencePredictor(InContextClassifier):
    """Gaussian-kernel class posterior.

    p_c(x) is proportional to alpha + the summed Gaussian weights of the
    class-c support points, with bandwidth h = bandwidth_scale times the
    median pairwise support distance (estimated on at most
    bandwidth_subsample rows). Deterministic and invariant to support row
    order: rows are put in canonical (lexicographic) order before the
    bandwidth subsample is drawn.
    """

    def __init__(self, config: ReferencePredictorConfig | None = None):
        self.config = config or ReferencePredictorConfig()

    def _bandwidth(self, sup_values: np.ndarray) -> float:
        cfg = self.config
        canon = sup_values[np.lexsort(sup_values.T[::-1])]
        if canon.shape[0] > cfg.bandwidth_subsample:
            rng = seeded_rng(cfg.seed)
            idx = rng.choice(canon.shape[0], size=cfg.bandwidth_subsample, replace=False)
            canon = canon[np.sort(idx)]
        sq = np.einsum("ij,ij->i", canon, canon)
        d2 = sq[:, None] + sq[None, :] - 2.0 * canon @ canon.T
        np.maximum(d2, 0.0, out=d2)
        tri = d2[np.triu_indices(canon.shape[0], k=1)]
        if tri.size == 0:
            return 1.0
        h = float(np.sqrt(np.median(tri)))
        if h <= 0:
            return 1.0  # all support points identical
        return cfg.bandwidth_scale * h

    def predict(self, qry, sup: FeatureMatrix) -> np.ndarray:
        qvals = _as_values(qry)
        svals, slabels = _support_parts(sup)
        if qvals.shape[1] != svals.shape[1]:
            raise DataError(
                f"dimension mismatch: query d={qvals.shape[1]}, support d={svals.shape[1]}"
            )
        if self.config.standardize:
            svals, stats = standardize(svals)
            qvals, _ = standardize(qvals, stats)
        cols, dense = np.unique(slabels, return_inverse=True)
        h = self._bandwidth(svals)
        return kernels.kernel_posterior(
            qvals, svals, dense, len(cols), h, self.config.smoothing_alpha
        )


@dataclass
class RemotePredictorConfig:
    endpoint: str
    timeout: float = 30.0
    max_batch: int = 1024
    retries: int = 2
    bearer_token: str | None = None

    def __post_init__(self):
        if self.max_batch < 1:
            raise DataError("max_batch must be >= 1")


class RemotePredictor(InContextClassifier):
    """Client for an external prediction service speaking the wire protocol."""

    def __init__(self, config: RemotePredictorConfig, http=None):
        self.config = config
        self.http = http or requests.Session()

    def _headers(self) -> dict:
        if self.config.bearer_token:
            return {"Authorization": f"Bearer {self.config.bearer_token}"}
        return {}

    def _request(self, method: str, path: str, payload=None):
        url = self.config.endpoint.rstrip("/") + path
        last = None
        for attempt in range(self.config.retries + 1):
            try:
                resp = self.http.request(
                    method, url, json=payload,
                    timeout=self.config.timeout, headers=self._headers(),
                )
            except requests.RequestException as exc:
                last = exc
                time.sleep(min(0.2 * (attempt + 1), 1.0))
                continue
            if resp.status_code >= 500:
                last = PredictorError(f"{method} {path} -> {resp.status_code}: {resp.text[:500]}")
                time.sleep(min(0.2 * (attempt + 1), 1.0))
                continue
            if resp.status_code >= 400:
                raise PredictorError(
                    f"{method} {path} -> {resp.status_code}: {resp.text[:500]}"
                )
            if method == "DELETE":
                return None
            try:
                return resp.json()
            except ValueError:
                raise PredictorError(f"{method} {path}: malformed JSON response")
        raise PredictorError(f"{method} {path} failed after retries: {last}")

    def predict(self, qry, sup: FeatureMatrix) -> np.ndarray:
        qvals = _as_values(qry)
        svals, slabels = _support_parts(sup)
        if qvals.shape[1] != svals.shape[1]:
            raise DataError("dimension mismatch between query and support")
        cols = np.unique(slabels)
        payload = {
            "d": int(svals.shape[1]),
            "C": int(len(cols)),
            "class_ids": [int(c) for c in cols],
            "support": {
                "features": svals.astype(np.float32).tolist(),
                "labels": [int(v) for v in slabels],
            },
        }
        session = self._request("POST", "/session", payload)
        if not isinstance(session, dict) or "session_id" not in session:
            raise PredictorError("handshake response lacks session_id")
        sid = session["session_id"]
        try:
            rows: list[list[float]] = []
            for start in range(0, qvals.shape[0], self.config.max_batch):
                chunk = qvals[start : start + self.config.max_batch]
                reply = self._request(
                    "POST", "/predict",
                    {"session_id": sid, "queries": chunk.astype(np.float32).tolist()},
                )
                probs = reply.get("probabilities") if isinstance(reply, dict) else None
                if probs is None or len(probs) != chunk.shape[0]:
                    raise PredictorError(
                        f"predict reply shape mismatch: expected {chunk.shape[0]} rows"
                    )
                rows.extend(probs)
        finally:
            try:
                self._request("DELETE", f"/session/{sid}")
            except PredictorError:
                pass
        out = np.asarray(rows, dtype=np.float64)
        if out.shape != (qvals.shape[0], len(cols)):
            raise PredictorError(f"response matrix has shape {out.shape}")
        sums = out.sum(axis=1)
        if (out < -1e-9).any() or np.abs(sums - 1.0).max() > 1e-4:
            raise PredictorError(
                f"row-stochasticity violated: worst row sum {sums[np.abs(sums - 1).argmax()]}"
            )
        return np.maximum(out, 0.0) / sums[:, None]
