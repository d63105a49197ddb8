"""Token-to-vector pooling: mean, CLS-select, local grid pooling, and the
adaptive softmax pooler fitted from token-level prediction scores."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import FeatureMatrix, LabeledDataset, TokenEmbeddingSet, stratified_split_indices
from .errors import DataError
from .numerics import fit_pca, jsd_rows, project_values, ridge_solve, seeded_rng, softmax

SCORERS = ("jsd_prior", "correct_class", "entropy")
SCORE_EPS = 1e-12


@dataclass
class PalPooler:
    """Learned linear token scorer; theta = 0 reduces to exact mean pooling."""

    theta: np.ndarray
    fitted_iteration: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if not np.all(np.isfinite(self.theta)):
            raise DataError("pooler parameters must be finite")


@dataclass
class PalFitConfig:
    iterations: int = 3
    q_max: int = 500_000
    lam: float = 1e4
    tau: float | None = None  # None: 0.5 for grid-shaped sets, 1.0 otherwise
    pal_pca_dim: int = 128
    val_pca_dim: int | None = None  # None: reuse pal_pca_dim
    scorer: str = "jsd_prior"
    group_schedule: list[int] | None = None  # None: [4,2,1] for grids, else [1,1,1]
    length_weighting: bool | None = None  # None: on for ragged sets
    fit_in_pca_space: bool = False
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise DataError("iterations must be >= 1")
        if self.lam < 0:
            raise DataError("lambda must be >= 0")
        if self.tau is not None and self.tau <= 0:
            raise DataError("tau must be positive")
        if self.scorer not in SCORERS:
            raise DataError(f"unknown scorer {self.scorer!r}")

    def resolved(self, tokens: TokenEmbeddingSet) -> "PalFitConfig":
        """Fill the modality-dependent defaults for a concrete token set."""
        has_grid = tokens.grid is not None
        tau = self.tau if self.tau is not None else (0.5 if has_grid else 1.0)
        schedule = self.group_schedule
        if schedule is None:
            schedule = [4, 2, 1] if has_grid else [1, 1, 1]
        weighting = self.length_weighting
        if weighting is None:
            weighting = not has_grid
        return PalFitConfig(
            self.iterations, self.q_max, self.lam, tau, self.pal_pca_dim,
            self.val_pca_dim, self.scorer, list(schedule), weighting,
            self.fit_in_pca_space, self.val_fraction, self.seed,
        )


@dataclass
class PalFitReport:
    """One entry per candidate pooler; iteration 0 is always mean pooling."""

    candidates: list[dict] = field(default_factory=list)
    best_iteration: int = 0

    def to_dict(self) -> dict:
        return {"candidates": self.candidates, "best_iteration": self.best_iteration}


def mean_pool(tokens: TokenEmbeddingSet) -> FeatureMatrix:
    rows = np.stack([mat.mean(axis=0) for _, mat in tokens.samples])
    return FeatureMatrix(rows, tokens.sample_ids, tokens.labels, tokens.num_classes)


def cls_select(tokens: TokenEmbeddingSet, index: int = 0) -> FeatureMatrix:
    counts = tokens.token_counts()
    if index < 0 or index >= counts.min():
        raise DataError(f"token index {index} out of range for shortest sample")
    rows = np.stack([mat[index] for _, mat in tokens.samples])
    return FeatureMatrix(rows, tokens.sample_ids, tokens.labels, tokens.num_classes)


def _grid_block_matrix(h: int, w: int, g: int) -> tuple[np.ndarray, tuple[int, int]]:
    h2 = -(-h // g)
    w2 = -(-w // g)
    assign = np.empty(h * w, dtype=np.int64)
    for r in range(h):
        for c in range(w):
            assign[r * w + c] = (r // g) * w2 + (c // g)
    M = np.zeros((h2 * w2, h * w))
    M[assign, np.arange(h * w)] = 1.0
    M /= M.sum(axis=1, keepdims=True)
    return M, (h2, w2)


def grid_pool(tokens: TokenEmbeddingSet, group: int) -> TokenEmbeddingSet:
    """Mean-pool non-overlapping group x group blocks of a grid-shaped set.

    Partial edge blocks average over the tokens they actually contain;
    group=1 returns the input unchanged.
    """
    if tokens.grid is None:
        raise DataError("grid pooling needs grid metadata")
    if group < 1:
        raise DataError("group size must be >= 1")
    if group == 1:
        return tokens
    h, w = tokens.grid
    M, out_grid = _grid_block_matrix(h, w, group)
    samples = [(sid, M @ mat) for sid, mat in tokens.samples]
    return TokenEmbeddingSet(samples, grid=out_grid, labels=tokens.labels,
                             num_classes=tokens.num_classes)


def _flatten(tokens: TokenEmbeddingSet) -> tuple[np.ndarray, np.ndarray]:
    """Stack all token matrices; returns (flat, offsets) with n+1 offsets."""
    counts = tokens.token_counts()
    offsets = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    flat = np.concatenate([mat for _, mat in tokens.samples], axis=0)
    return flat, offsets


def pal_pool(tokens: TokenEmbeddingSet, pooler: PalPooler) -> FeatureMatrix:
    if pooler.theta.shape[0] != tokens.d:
        raise DataError(
            f"pooler dimension {pooler.theta.shape[0]} does not match tokens d={tokens.d}"
        )
    flat, offsets = _flatten(tokens)
    pooled = kernels.pal_pool_flat(flat, offsets, pooler.theta)
    return FeatureMatrix(pooled, tokens.sample_ids, tokens.labels, tokens.num_classes)


def score_tokens(
    predictions: np.ndarray,
    prior: np.ndarray,
    scorer: str = "jsd_prior",
    tau: float = 1.0,
    labels: np.ndarray | None = None,
) -> np.ndarray:
    """Scalar score per predicted distribution, divided by the temperature.

    jsd_prior scores ln(divergence from the label prior); correct_class
    scores ln of the true-class probability (ablation only, needs labels);
    entropy scores the negative Shannon entropy.
    """
    P = np.asarray(predictions, dtype=np.float64)
    if P.ndim != 2:
        raise DataError("predictions must be an m x C matrix")
    if (P < -1e-9).any() or np.abs(P.sum(axis=1) - 1.0).max() > 1e-4:
        raise DataError("prediction rows must be probability distributions")
    if scorer == "jsd_prior":
        raw = np.log(np.maximum(jsd_rows(P, prior), SCORE_EPS))
    elif scorer == "correct_class":
        if labels is None:
            raise DataError("correct_class scorer needs per-row labels")
        raw = np.log(np.maximum(P[np.arange(P.shape[0]), labels], SCORE_EPS))
    elif scorer == "entropy":
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0)), 0.0)
        raw = plogp.sum(axis=1)
    else:
        raise DataError(f"unknown scorer {scorer!r}")
    return raw / tau


def pal_heatmap(tokens: TokenEmbeddingSet, pooler: PalPooler) -> list[dict]:
    """Per-sample raw token scores and softmax weights, for external plotting."""
    out = []
    for sid, mat in tokens.samples:
        raw = mat @ pooler.theta
        weights = softmax(raw)
        out.append(
            {
                "sample_id": sid,
                "grid": list(tokens.grid) if tokens.grid is not None else None,
                "raw_scores": [float(v) for v in raw],
                "weights": [float(v) for v in weights],
            }
        )
    return out


def _single_token_modality(train: LabeledDataset) -> TokenEmbeddingSet:
    token_sets = [b for b in train.modalities.values() if isinstance(b, TokenEmbeddingSet)]
    if len(token_sets) != 1:
        raise DataError("pooler fitting expects exactly one token modality")
    return token_sets[0]


def fit_pal_pooler(
    train: LabeledDataset,
    predictor,
    cfg: PalFitConfig,
) -> tuple[PalPooler, PalFitReport]:
    """Iteratively fit the linear token scorer.

    Each iteration: stratified half split of the fitting set; pool the
    support half with the current parameters (grid-coarsened per the group
    schedule); fit a PCA on the pooled support; flatten, project and
    subsample the query half's tokens; score the predictor's token-level
    outputs against the empirical label prior; regress the scores onto the
    unprojected tokens with ridge. Candidates (including iteration 0, mean
    pooling) are ranked by accuracy on an internal validation split carved
    out up front, and the best one is returned.
    """
    tokens = _single_token_modality(train)
    cfg = cfg.resolved(tokens)
    labels = train.labels
    d = tokens.d
    rng = seeded_rng(cfg.seed)

    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise DataError("pooler fitting needs at least 2 classes")
    prior = np.zeros(train.num_classes)
    for cls, cnt in zip(classes, counts):
        prior[cls] = cnt / labels.shape[0]

    val_idx, fit_idx = stratified_split_indices(
        labels, cfg.val_fraction, seed=int(rng.integers(2**31)), stratified=True
    )
    fit_tokens = tokens.subset(fit_idx)
    fit_labels = labels[fit_idx]
    val_tokens = tokens.subset(val_idx)
    val_labels = labels[val_idx]

    val_dim = cfg.val_pca_dim if cfg.val_pca_dim is not None else cfg.pal_pca_dim

    def validation_accuracy(theta: np.ndarray) -> float:
        pooler = PalPooler(theta)
        sup = pal_pool(fit_tokens, pooler)
        qry = pal_pool(val_tokens, pooler)
        pca = fit_pca(sup.values, val_dim)
        sup_fm = FeatureMatrix(project_values(pca, sup.values), sup.sample_ids, fit_labels)
        probs = predictor.predict(project_values(pca, qry.values), sup_fm)
        pred = probs.argmax(axis=1)
        observed = np.unique(fit_labels)
        return float(np.mean(observed[pred] == val_labels))

    report = PalFitReport()
    theta = np.zeros(d)
    start = time.perf_counter()
    acc0 = validation_accuracy(theta)
    report.candidates.append(
        {"iteration": 0, "val_accuracy": acc0,
         "theta": [float(v) for v in theta],
         "wall_time_s": time.perf_counter() - start}
    )
    thetas = [theta.copy()]

    for t in range(1, cfg.iterations + 1):
        iter_start = time.perf_counter()
        g = cfg.group_schedule[min(t - 1, len(cfg.group_schedule) - 1)]
        work = grid_pool(fit_tokens, g) if fit_tokens.grid is not None else fit_tokens

        sup_idx, qry_idx = stratified_split_indices(
            fit_labels, 0.5, seed=int(rng.integers(2**31)), stratified=True
        )
        pooled_sup = kernels.pal_pool_flat(*_flatten(work.subset(sup_idx)), theta)
        pca = fit_pca(pooled_sup, cfg.pal_pca_dim)
        sup_fm = FeatureMatrix(
            project_values(pca, pooled_sup),
            [work.sample_ids[i] for i in sup_idx],
            fit_labels[sup_idx],
        )

        qry_tokens = work.subset(qry_idx)
        flat, offsets = _flatten(qry_tokens)
        token_counts = np.diff(offsets)
        token_sample = np.repeat(np.arange(len(qry_idx)), token_counts)
        total = flat.shape[0]
        if total > cfg.q_max:
            keep = rng.choice(total, size=cfg.q_max, replace=False)
            keep.sort()
        else:
            keep = np.arange(total)
        Z = flat[keep]
        Z_proj = project_values(pca, Z)
        probs = predictor.predict(Z_proj, sup_fm)

        observed = np.unique(fit_labels[sup_idx])
        token_labels = None
        if cfg.scorer == "correct_class":
            true_cls = fit_labels[qry_idx][token_sample[keep]]
            # map true class into the predictor's column space
            col = {c: j for j, c in enumerate(observed)}
            token_labels = np.array([col[c] for c in true_cls], dtype=np.int64)
        scores = score_tokens(probs, prior[observed], cfg.scorer, cfg.tau, token_labels)

        weights = None
        if cfg.length_weighting:
            weights = 1.0 / np.sqrt(token_counts[token_sample[keep]])
        # center the targets: an unpenalized intercept, dropped afterwards
        # (softmax pooling ignores per-sample constant score shifts)
        if weights is None:
            scores = scores - scores.mean()
        else:
            scores = scores - np.average(scores, weights=weights)
        if cfg.fit_in_pca_space:
            sol = ridge_solve(Z_proj, scores, weights, cfg.lam)
            theta = pca.components @ sol.theta
        else:
            sol = ridge_solve(Z, scores, weights, cfg.lam)
            theta = sol.theta

        acc = validation_accuracy(theta)
        report.candidates.append(
            {"iteration": t, "val_accuracy": acc,
             "theta": [float(v) for v in theta],
             "wall_time_s": time.perf_counter() - iter_start}
        )
        thetas.append(theta.copy())

    accs = [c["val_accuracy"] for c in report.candidates]
    best = int(np.argmax(accs))  # ties resolve to the earliest iteration
    report.best_iteration = best
    return PalPooler(thetas[best], fitted_iteration=best), report
