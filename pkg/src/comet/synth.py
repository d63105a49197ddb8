"""Synthetic dataset generators for tests, diagnostics, and demo configs."""

from __future__ import annotations

import numpy as np

from .data import FeatureMatrix, LabeledDataset, LabelTree, TokenEmbeddingSet
from .numerics import seeded_rng


def _ids(n: int, prefix: str = "s") -> list[str]:
    return [f"{prefix}{i:06d}" for i in range(n)]


def gaussian_blobs(
    n: int, d: int, n_classes: int, separation: float = 6.0, seed: int = 0
) -> LabeledDataset:
    """Well-separated class blobs with unit-variance noise."""
    rng = seeded_rng(seed)
    centers = rng.normal(size=(n_classes, d))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = rng.integers(n_classes, size=n)
    values = centers[labels] + rng.normal(size=(n, d))
    fm = FeatureMatrix(values, _ids(n), labels, n_classes)
    return LabeledDataset({"blob": fm}, labels, [f"c{i}" for i in range(n_classes)])


def planted_token_dataset(
    n: int = 2000,
    tokens_per_sample: int = 16,
    d: int = 32,
    n_classes: int = 4,
    n_signal_tokens: int = 2,
    signal_scale: float = 3.0,
    noise_scale: float = 1.0,
    grid: tuple[int, int] | None = None,
    seed: int = 0,
) -> LabeledDataset:
    """Token sets where only a few tokens carry the class direction.

    Signal tokens sit at carrier + class direction; every other token is
    isotropic noise, so mean pooling dilutes the signal by the token ratio
    while a pooler that upweights the carrier direction recovers it.
    """
    rng = seeded_rng(seed)
    carrier = np.zeros(d)
    carrier[0] = signal_scale
    directions = np.zeros((n_classes, d))
    for c in range(n_classes):
        directions[c, 1 + c] = signal_scale
    labels = rng.integers(n_classes, size=n)
    samples = []
    for i in range(n):
        mat = rng.normal(scale=noise_scale, size=(tokens_per_sample, d))
        which = rng.choice(tokens_per_sample, size=n_signal_tokens, replace=False)
        mat[which] += carrier + directions[labels[i]]
        samples.append((f"s{i:06d}", mat))
    tokens = TokenEmbeddingSet(samples, grid=grid, labels=labels, num_classes=n_classes)
    return LabeledDataset({"tokens": tokens}, labels, [f"c{i}" for i in range(n_classes)])


def tabular_dominant_dataset(
    n: int = 600,
    d_tabular: int = 5,
    d_embedding: int = 768,
    n_classes: int = 3,
    seed: int = 0,
) -> LabeledDataset:
    """Labels are a function of the tabular block; the embedding is noise."""
    rng = seeded_rng(seed)
    labels = rng.integers(n_classes, size=n)
    centers = rng.normal(scale=3.0, size=(n_classes, d_tabular))
    tab = centers[labels] + rng.normal(size=(n, d_tabular))
    emb = rng.normal(size=(n, d_embedding))
    ids = _ids(n)
    tabular = FeatureMatrix(tab, ids, labels, n_classes)
    embedding = FeatureMatrix(emb, ids, labels, n_classes)
    return LabeledDataset(
        {"embedding": embedding}, labels, [f"c{i}" for i in range(n_classes)],
        tabular=tabular,
    )


def anisotropic_dataset(
    n: int = 800,
    d: int = 320,
    n_classes: int = 4,
    signal_dims: tuple[int, int] = (8, 48),
    decay: float = 0.97,
    seed: int = 0,
) -> LabeledDataset:
    """Power-law spectrum with the class signal planted in mid-rank directions.

    Small projections truncate the signal band; keeping everything drags in
    a long tail of low-variance dimensions that standardization amplifies,
    so accuracy peaks at an interior projection width.
    """
    rng = seeded_rng(seed)
    labels = rng.integers(n_classes, size=n)
    scales = decay ** np.arange(d)
    values = rng.normal(size=(n, d)) * scales
    lo, hi = signal_dims
    centers = rng.normal(size=(n_classes, hi - lo))
    centers *= 2.5 / np.linalg.norm(centers, axis=1, keepdims=True)
    values[:, lo:hi] += centers[labels] * scales[lo:hi]
    fm = FeatureMatrix(values, _ids(n), labels, n_classes)
    return LabeledDataset({"embedding": fm}, labels, [f"c{i}" for i in range(n_classes)])


def hierarchical_dataset(
    branching: list[int],
    samples_per_leaf: int = 20,
    d: int = 16,
    scale: float = 4.0,
    seed: int = 0,
) -> tuple[LabeledDataset, LabelTree]:
    """Balanced tree with one Gaussian blob per leaf.

    Leaf centers are nested: each level adds a smaller offset, so siblings
    stay closer than cousins and greedy routing is learnable.
    """
    rng = seeded_rng(seed)
    parents: dict[str, str | None] = {"root": None}
    names: dict[str, str] = {"root": "root"}
    centers: dict[str, np.ndarray] = {"root": np.zeros(d)}
    frontier = ["root"]
    for level, width in enumerate(branching):
        step = scale / (2.0**level)
        new_frontier = []
        for node in frontier:
            for j in range(width):
                child = f"{node}.{j}"
                parents[child] = node
                names[child] = child
                offset = rng.normal(size=d)
                offset *= step / np.linalg.norm(offset)
                centers[child] = centers[node] + offset
                new_frontier.append(child)
        frontier = new_frontier
    leaf_to_class = {leaf: i for i, leaf in enumerate(frontier)}
    tree = LabelTree(parents, names, leaf_to_class)

    rows, labels, ids = [], [], []
    i = 0
    for leaf, cls in leaf_to_class.items():
        pts = centers[leaf] + rng.normal(scale=0.35, size=(samples_per_leaf, d))
        for row in pts:
            rows.append(row)
            labels.append(cls)
            ids.append(f"s{i:06d}")
            i += 1
    fm = FeatureMatrix(np.asarray(rows), ids, np.asarray(labels), len(frontier))
    ds = LabeledDataset({"embedding": fm}, np.asarray(labels), list(leaf_to_class))
    return ds, tree
