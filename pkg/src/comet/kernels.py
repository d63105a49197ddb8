"""Hot numeric kernels with backend selection.

The compiled Cython core (comet._core) is used when it imported cleanly;
otherwise the pure numpy implementations below take over. Set
COMET_FORCE_PY=1 to force the fallback (used by the parity tests and the
benchmark). Both backends compute the same quantities; floating-point
summation order may differ, so cross-backend comparisons use tolerances.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

if os.environ.get("COMET_FORCE_PY") == "1":
    _core = None

BACKEND = "compiled" if _core is not None else "python"


def _pal_pool_flat_py(flat: np.ndarray, offsets: np.ndarray, theta: np.ndarray) -> np.ndarray:
    n = offsets.shape[0] - 1
    counts = np.diff(offsets)
    scores = flat @ theta
    if counts.min() == counts.max():
        # uniform token count: one batched softmax
        P = int(counts[0])
        s = scores.reshape(n, P)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        return np.einsum("np,npd->nd", w, flat.reshape(n, P, -1))
    out = np.empty((n, flat.shape[1]), dtype=np.float64)
    for i in range(n):
        s = scores[offsets[i] : offsets[i + 1]]
        w = np.exp(s - s.max())
        w /= w.sum()
        out[i] = w @ flat[offsets[i] : offsets[i + 1]]
    return out


def _kernel_posterior_py(
    qry: np.ndarray,
    sup: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    h: float,
    alpha: float,
    chunk: int = 1024,
) -> np.ndarray:
    onehot = np.zeros((sup.shape[0], n_classes), dtype=np.float64)
    onehot[np.arange(sup.shape[0]), labels] = 1.0
    sup_sq = np.einsum("ij,ij->i", sup, sup)
    inv = 1.0 / (2.0 * h * h)
    out = np.empty((qry.shape[0], n_classes), dtype=np.float64)
    for start in range(0, qry.shape[0], chunk):
        block = qry[start : start + chunk]
        d2 = (
            np.einsum("ij,ij->i", block, block)[:, None]
            + sup_sq[None, :]
            - 2.0 * block @ sup.T
        )
        np.maximum(d2, 0.0, out=d2)
        weights = np.exp(-d2 * inv)
        probs = alpha + weights @ onehot
        probs /= probs.sum(axis=1, keepdims=True)
        out[start : start + chunk] = probs
    return out


def pal_pool_flat(flat: np.ndarray, offsets: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Per-sample softmax(X_i theta)-weighted token average over a ragged stack."""
    flat = np.ascontiguousarray(flat, dtype=np.float64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    if _core is not None:
        return _core.pal_pool_flat(flat, offsets, theta)
    return _pal_pool_flat_py(flat, offsets, theta)


def kernel_posterior(
    qry: np.ndarray,
    sup: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    h: float,
    alpha: float,
) -> np.ndarray:
    """Row-stochastic Gaussian-kernel class posterior."""
    qry = np.ascontiguousarray(qry, dtype=np.float64)
    sup = np.ascontiguousarray(sup, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if _core is not None:
        return _core.kernel_posterior(qry, sup, labels, int(n_classes), float(h), float(alpha))
    return _kernel_posterior_py(qry, sup, labels, int(n_classes), float(h), float(alpha))
