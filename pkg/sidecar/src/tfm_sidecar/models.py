"""In-context model backends.

Each backend fits a fresh classifier on the session's support set and then
answers queries as a pure function, so predictions are deterministic and
invariant to query batching. Backends must emit probability columns in the
session's class_ids order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.ensemble import RandomForestClassifier
from sklearn.linear_model import LogisticRegression
from sklearn.neighbors import KNeighborsClassifier

MAX_DIM = 2048
MAX_CLASSES = 256
MAX_SUPPORT = 100_000


@dataclass
class FittedModel:
    """A fitted backend plus the label order it was trained with."""

    estimator: object
    class_ids: list[int]

    def predict_proba(self, queries: np.ndarray) -> np.ndarray:
        probs = self.estimator.predict_proba(queries)
        # sklearn orders columns by sorted estimator.classes_; re-align to
        # the session's class_ids order
        order = {int(c): i for i, c in enumerate(self.estimator.classes_)}
        cols = [order[c] for c in self.class_ids]
        out = probs[:, cols]
        sums = out.sum(axis=1, keepdims=True)
        return out / np.where(sums > 0, sums, 1.0)


def _logreg(seed: int):
    return LogisticRegression(max_iter=2000, C=1.0, random_state=seed)


def _knn(seed: int):
    return KNeighborsClassifier(n_neighbors=5, weights="distance")


def _forest(seed: int):
    return RandomForestClassifier(n_estimators=64, random_state=seed)


BACKENDS = {
    "logreg": _logreg,
    "knn": _knn,
    "forest": _forest,
}


def fit_in_context(
    model_name: str,
    features: np.ndarray,
    labels: np.ndarray,
    class_ids: list[int],
    seed: int = 0,
) -> FittedModel:
    if model_name not in BACKENDS:
        raise ValueError(f"unknown model {model_name!r}; choose from {sorted(BACKENDS)}")
    est = BACKENDS[model_name](seed)
    # k-NN with fewer support rows than neighbors degenerates; shrink k
    if isinstance(est, KNeighborsClassifier) and features.shape[0] < est.n_neighbors:
        est.set_params(n_neighbors=features.shape[0])
    est.fit(features, labels)
    return FittedModel(est, [int(c) for c in class_ids])
