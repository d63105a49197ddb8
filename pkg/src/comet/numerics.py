"""Deterministic linear-algebra and information-theoretic primitives.

Conventions, fixed for reproducibility:
  * PCA uses the n-1 (ddof=1) sample covariance and a deterministic sign:
    each component's largest-magnitude entry is made non-negative.
  * standardize uses ddof=0 variances.
  * Entropies and divergences use the natural log; the JSD bound is ln 2.
  * seeded_rng returns a numpy Generator over PCG64 so identical seeds give
    identical streams on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data import FeatureMatrix
from .errors import DataError, SingularError

LN2 = float(np.log(2.0))


@dataclass
class PcaProjection:
    """Centering vector plus column-orthonormal projection with its spectrum."""

    mean: np.ndarray
    components: np.ndarray  # d x d_out
    eigenvalues: np.ndarray  # non-increasing
    explained_variance_ratio: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.components.shape[0]

    @property
    def output_dim(self) -> int:
        return self.components.shape[1]


@dataclass
class RidgeSolution:
    theta: np.ndarray
    lam: float


@dataclass
class RankDiagnostics:
    effective_rank: float
    normalized_effective_rank: float
    explained_variance: float
    # True when no reference spectrum was given and the 1.0 convention applies
    explained_variance_assumed: bool

    @property
    def product(self) -> float:
        return self.explained_variance * self.normalized_effective_rank


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the one PRNG used everywhere in this package."""
    return np.random.default_rng(seed)


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats, bounded by ln 2."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if (p < 0).any() or (q < 0).any():
        raise DataError("distributions must be non-negative")
    if abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise DataError("distributions must sum to 1")
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def _kl(p, m):
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(m[mask]))))


def jsd_rows(P: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise JSD of an m x C matrix of distributions against one reference."""
    P = np.asarray(P, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    M = 0.5 * (P + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        left = np.where(P > 0, P * (np.log(np.where(P > 0, P, 1.0)) - np.log(M)), 0.0)
        qterm = np.where(q > 0, q * (np.log(np.where(q > 0, q, 1.0)) - np.log(M)), 0.0)
    return 0.5 * left.sum(axis=1) + 0.5 * qterm.sum(axis=1)


def fit_pca(X: FeatureMatrix | np.ndarray, target_dim: int) -> PcaProjection:
    """Top-eigenvector projection of the ddof=1 sample covariance.

    Effective output dimension is min(target_dim, d, n-1).
    """
    values = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
    n, d = values.shape
    if n < 2:
        raise DataError("PCA needs at least 2 samples")
    d_out = min(int(target_dim), d, n - 1)
    if d_out < 1:
        raise DataError(f"target dimension {target_dim} is not positive")
    mean = values.mean(axis=0)
    centered = values - mean
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:d_out]
    eigvals = np.maximum(eigvals[order], 0.0)
    components = eigvecs[:, order]
    # deterministic sign: largest-magnitude entry of each component >= 0
    anchor = np.abs(components).argmax(axis=0)
    signs = np.sign(components[anchor, np.arange(d_out)])
    signs[signs == 0] = 1.0
    components = components * signs
    total = float(np.trace(cov))
    ratio = eigvals / total if total > 0 else np.zeros_like(eigvals)
    return PcaProjection(mean, components, eigvals, ratio)


def project(p: PcaProjection, X: FeatureMatrix) -> FeatureMatrix:
    if X.d != p.input_dim:
        raise DataError(f"dimension mismatch: data d={X.d}, projection d={p.input_dim}")
    projected = (X.values - p.mean) @ p.components
    return FeatureMatrix(projected, X.sample_ids, X.labels, X.num_classes)


def project_values(p: PcaProjection, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != p.input_dim:
        raise DataError("dimension mismatch in projection")
    return (values - p.mean) @ p.components


def ridge_solve(
    Z: np.ndarray,
    s: np.ndarray,
    w: np.ndarray | None = None,
    lam: float = 0.0,
) -> RidgeSolution:
    """theta = (Z'WZ + lam I)^-1 Z'Ws via Cholesky of the normal equations."""
    Z = np.asarray(Z, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if lam < 0:
        raise DataError("lambda must be non-negative")
    if w is not None:
        w = np.asarray(w, dtype=np.float64)
        if (w <= 0).any():
            raise DataError("sample weights must be positive")
        Zw = Z * w[:, None]
    else:
        Zw = Z
    gram = Z.T @ Zw
    gram[np.diag_indices_from(gram)] += lam
    rhs = Zw.T @ s
    try:
        chol = scipy.linalg.cho_factor(gram, lower=True)
    except scipy.linalg.LinAlgError:
        raise SingularError("normal equations are singular (lambda = 0?)")
    theta = scipy.linalg.cho_solve(chol, rhs)
    if not np.all(np.isfinite(theta)):
        raise SingularError("ridge solution is not finite")
    return RidgeSolution(theta, float(lam))


def standardize(
    X: FeatureMatrix | np.ndarray,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Per-feature z-score (ddof=0); near-constant features are only centered."""
    is_fm = isinstance(X, FeatureMatrix)
    values = X.values if is_fm else np.asarray(X, dtype=np.float64)
    if stats is None:
        mean = values.mean(axis=0)
        std = values.std(axis=0)
    else:
        mean, std = stats
        if mean.shape[0] != values.shape[1]:
            raise DataError("standardization stats do not match feature count")
    safe = np.where(std < 1e-12, 1.0, std)
    z = (values - mean) / safe
    if is_fm:
        z = FeatureMatrix(z, X.sample_ids, X.labels, X.num_classes)
    return z, (mean, std)


def rank_diagnostics(
    X: FeatureMatrix | np.ndarray,
    reference: PcaProjection | None = None,
) -> RankDiagnostics:
    """Entropy-based effective rank of the centered data matrix.

    With singular values sigma of the centered matrix and p_k = sigma_k /
    sum(sigma), effective rank = exp(-sum p_k ln p_k), normalized by the
    ambient dimension. When `reference` is the projection that produced X,
    explained variance is the sum of its retained variance ratios; for
    unprojected data it is reported as 1.0 and flagged.
    """
    values = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
    n, d = values.shape
    if n < 2:
        raise DataError("rank diagnostics need at least 2 samples")
    centered = values - values.mean(axis=0)
    sigma = scipy.linalg.svdvals(centered)
    total = sigma.sum()
    if total <= 0:
        raise DataError("all-zero matrix has no spectrum")
    p = sigma / total
    p = p[p > 0]
    erank = float(np.exp(-np.sum(p * np.log(p))))
    if reference is not None:
        ev = float(np.sum(reference.explained_variance_ratio))
        assumed = False
    else:
        ev = 1.0
        assumed = True
    return RankDiagnostics(erank, erank / d, ev, assumed)
