"""Local-classifier-per-node hierarchical inference.

Every internal tree node defines a subtask over its children; the support
for a subtask is the training subset whose leaf descends from the node,
relabeled to child indices and capped by a stratified budget. Prediction
routes each query greedily from root to leaf.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, LabelTree
from .errors import DataError, PredictorError
from .fusion import FittedFusion, FusionSpec, classification_metrics, fit_fusion, transform
from .numerics import seeded_rng

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 200_000


@dataclass
class Subtask:
    node: str
    child_ids: list[str]
    support_indices: np.ndarray  # into the training set
    child_labels: np.ndarray  # aligned with support_indices
    budget_applied: bool = False


@dataclass
class HierModel:
    tree: LabelTree
    spec: FusionSpec
    budget: int
    subtasks: dict[str, Subtask]
    fusions: dict[str, FittedFusion | None] = field(default_factory=dict)
    supports: dict[str, object] = field(default_factory=dict)  # node -> support FeatureMatrix
    fit_seconds: dict[str, float] = field(default_factory=dict)
    shared_pca: bool = False


def _child_of_class(tree: LabelTree, node: str) -> dict[int, int]:
    """Class index -> index of the child subtree containing its leaf."""
    out: dict[int, int] = {}
    for j, child in enumerate(tree.children[node]):
        for leaf in tree.leaves_under(child):
            out[tree.leaf_to_class[leaf]] = j
    return out


def _budget_subsample(
    child_labels: np.ndarray, budget: int, rng: np.random.Generator
) -> np.ndarray:
    """Stratified proportional cap with a per-child floor of one sample."""
    n = child_labels.shape[0]
    children, counts = np.unique(child_labels, return_counts=True)
    take = np.maximum(1, np.floor(budget * counts / n).astype(np.int64))
    take = np.minimum(take, counts)
    remainder = (budget * counts / n) - np.floor(budget * counts / n)
    order = np.argsort(-remainder, kind="stable")
    i = 0
    while take.sum() < budget and i < len(order):
        c = order[i]
        if take[c] < counts[c]:
            take[c] += 1
        i += 1
    keep = []
    for child, k in zip(children, take):
        idx = np.flatnonzero(child_labels == child)
        keep.append(rng.permutation(idx)[:k])
    return np.sort(np.concatenate(keep))


def build_subtasks(
    train: LabeledDataset,
    tree: LabelTree,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
) -> list[Subtask]:
    if train.num_classes != len(tree.leaf_to_class):
        raise DataError("class count does not match tree leaf count")
    rng = seeded_rng(seed)
    subtasks = []
    for node in tree.internal_nodes():
        mapping = _child_of_class(tree, node)
        member = np.isin(train.labels, list(mapping))
        idx = np.flatnonzero(member)
        child_labels = np.array([mapping[c] for c in train.labels[idx]], dtype=np.int64)
        capped = False
        if idx.shape[0] > budget:
            keep = _budget_subsample(child_labels, budget, rng)
            idx = idx[keep]
            child_labels = child_labels[keep]
            capped = True
        subtasks.append(Subtask(node, list(tree.children[node]), idx, child_labels, capped))
    return subtasks


def fit_hier(
    train: LabeledDataset,
    tree: LabelTree,
    spec: FusionSpec,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    shared_pca: bool = False,
) -> HierModel:
    """Fit one fusion per subtask (or share the root's projections)."""
    subtasks = build_subtasks(train, tree, budget, seed)
    model = HierModel(tree, spec, budget, {t.node: t for t in subtasks}, shared_pca=shared_pca)
    shared: FittedFusion | None = None
    for task in subtasks:
        start = time.perf_counter()
        sup = train.subset(task.support_indices)
        sup = LabeledDataset(
            sup.modalities, task.child_labels, list(task.child_ids), tabular=sup.tabular
        )
        if len(task.child_ids) < 2:
            log.info("node %s has a single child; no classifier fitted", task.node)
            model.fusions[task.node] = None
            model.supports[task.node] = None
            model.fit_seconds[task.node] = time.perf_counter() - start
            continue
        if shared_pca and shared is not None:
            fitted = FittedFusion(
                shared.spec, shared.projections, list(task.child_ids),
                shared.tabular_dim, shared.raw_dims,
            )
        else:
            fitted = fit_fusion(sup, spec)
            if shared_pca and shared is None:
                shared = fitted
        model.fusions[task.node] = fitted
        model.supports[task.node] = transform(fitted, sup)
        model.fit_seconds[task.node] = time.perf_counter() - start
    return model


def hier_predict(
    model: HierModel, qry: LabeledDataset, predictor
) -> tuple[np.ndarray, list[list[str]], dict[str, float]]:
    """Greedy root-to-leaf routing.

    Queries sharing a node are predicted in one batch. Returns the leaf
    class per query, the full node path per query, and per-node predict
    seconds.
    """
    tree = model.tree
    n = qry.n
    position = np.full(n, -1, dtype=object)
    position[:] = tree.root
    paths: list[list[str]] = [[tree.root] for _ in range(n)]
    leaf_class = np.full(n, -1, dtype=np.int64)
    seconds: dict[str, float] = {}
    active = np.arange(n)
    while active.size:
        next_active = []
        nodes = {}
        for i in active:
            nodes.setdefault(position[i], []).append(i)
        for node, members in nodes.items():
            members = np.asarray(members)
            kids = tree.children[node]
            if not kids:
                for i in members:
                    leaf_class[i] = tree.leaf_to_class[node]
                continue
            if len(kids) == 1:
                choice = np.zeros(members.shape[0], dtype=np.int64)
            else:
                fitted = model.fusions[node]
                support = model.supports[node]
                start = time.perf_counter()
                qry_fm = transform(fitted, qry.subset(members))
                try:
                    probs = predictor.predict(qry_fm.values, support)
                except PredictorError as exc:
                    raise PredictorError(f"node {node!r}: {exc}") from exc
                seconds[node] = seconds.get(node, 0.0) + time.perf_counter() - start
                observed = np.unique(support.labels)
                choice = observed[probs.argmax(axis=1)]
            for i, c in zip(members, choice):
                child = kids[c]
                position[i] = child
                paths[i].append(child)
                next_active.append(i)
        active = np.asarray(next_active, dtype=np.int64)
    return leaf_class, paths, seconds


def evaluate_hier(model: HierModel, qry: LabeledDataset, predictor) -> dict:
    """Leaf metrics, per-level path accuracy, per-subtask confusion matrices."""
    if qry.labels is None:
        raise DataError("evaluation needs labeled queries")
    start = time.perf_counter()
    leaf_class, paths, predict_seconds = hier_predict(model, qry, predictor)
    tree = model.tree
    class_to_leaf = tree.class_to_leaf
    true_paths = [tree.path_to_root(class_to_leaf[int(c)]) for c in qry.labels]

    metrics = classification_metrics(qry.labels, leaf_class)
    depth = tree.depth()
    per_level = {}
    for level in range(1, depth + 1):
        hits = total = 0
        for path, true_path in zip(paths, true_paths):
            if len(true_path) <= level:
                continue
            total += 1
            if len(path) > level and path[level] == true_path[level]:
                hits += 1
        per_level[level] = hits / total if total else 1.0

    confusions = {}
    for node, task in model.subtasks.items():
        k = len(task.child_ids)
        if k < 2:
            continue
        mapping = _child_of_class(tree, node)
        child_index = {cid: j for j, cid in enumerate(task.child_ids)}
        mat = np.zeros((k, k), dtype=np.int64)
        node_depth = len(tree.path_to_root(node)) - 1
        for path, true_cls in zip(paths, qry.labels):
            true_cls = int(true_cls)
            if true_cls not in mapping:
                continue
            if len(path) <= node_depth + 1 or path[node_depth] != node:
                continue
            predicted_child = path[node_depth + 1]
            mat[mapping[true_cls], child_index[predicted_child]] += 1
        confusions[node] = {
            "children": task.child_ids,
            "matrix": mat.tolist(),
        }

    return {
        "metrics": {
            "leaf_accuracy": metrics["accuracy"],
            "leaf_macro_f1": metrics["macro_f1"],
            **{f"level_{lvl}_accuracy": acc for lvl, acc in per_level.items()},
            "num_subtasks": len(model.subtasks),
            "max_subtask_support": max(
                int(t.support_indices.shape[0]) for t in model.subtasks.values()
            ),
            "budget": model.budget,
        },
        "per_subtask_confusion": confusions,
        "timing": {
            "fit_seconds": dict(model.fit_seconds),
            "predict_seconds": predict_seconds,
            "total_seconds": time.perf_counter() - start,
        },
        "predicted_leaf_classes": [int(v) for v in leaf_class],
        "paths": paths,
    }
