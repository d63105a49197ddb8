"""End-to-end late fusion: per-modality pooling, per-modality projection
fitted on the support only, concatenation with tabular features, prediction."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import FeatureMatrix, LabeledDataset, TokenEmbeddingSet
from .errors import DataError, FormatError, SpecError
from .numerics import PcaProjection, fit_pca, project_values
from .pooling import PalPooler, cls_select, mean_pool, pal_pool

FUSION_MAGIC = b"CFUS"
FUSION_VERSION = 1


@dataclass
class ModalitySpec:
    """Pooling choice and projection width for one named modality."""

    name: str
    pooling: str = "mean"  # mean | cls | pal
    cls_index: int = 0
    pooler: PalPooler | None = None
    pca_dim: int = 256  # 0 disables projection

    def __post_init__(self):
        if self.pooling not in ("mean", "cls", "pal"):
            raise SpecError(f"unknown pooling {self.pooling!r}")
        if self.pooling == "pal" and self.pooler is None:
            raise SpecError(f"modality {self.name!r}: pal pooling needs a fitted pooler")
        if self.pca_dim < 0:
            raise SpecError("pca_dim must be >= 0")


@dataclass
class FusionSpec:
    modalities: list[ModalitySpec]
    use_tabular: bool = True
    seed: int = 0


@dataclass
class FittedFusion:
    spec: FusionSpec
    projections: dict[str, PcaProjection | None]
    class_names: list[str]
    tabular_dim: int
    raw_dims: dict[str, int] = field(default_factory=dict)
    support_fingerprint: str = ""

    @property
    def fused_dim(self) -> int:
        total = self.tabular_dim
        for m in self.spec.modalities:
            p = self.projections[m.name]
            total += p.output_dim if p is not None else self.raw_dims[m.name]
        return total


def _pooled(block, mspec: ModalitySpec) -> FeatureMatrix:
    if isinstance(block, FeatureMatrix):
        return block
    if not isinstance(block, TokenEmbeddingSet):
        raise SpecError(f"modality {mspec.name!r} has unsupported container type")
    if mspec.pooling == "mean":
        return mean_pool(block)
    if mspec.pooling == "cls":
        return cls_select(block, mspec.cls_index)
    return pal_pool(block, mspec.pooler)


def fit_fusion(sup: LabeledDataset, spec: FusionSpec) -> FittedFusion:
    """Pool each modality and fit its projection on the pooled support.

    Tabular features pass through unprojected; pca_dim=0 disables the
    projection for a modality.
    """
    projections: dict[str, PcaProjection | None] = {}
    raw_dims: dict[str, int] = {}
    for mspec in spec.modalities:
        if mspec.name not in sup.modalities:
            raise SpecError(f"modality {mspec.name!r} absent from dataset")
        pooled = _pooled(sup.modalities[mspec.name], mspec)
        raw_dims[mspec.name] = pooled.d
        if mspec.pca_dim > 0:
            projections[mspec.name] = fit_pca(pooled.values, mspec.pca_dim)
        else:
            projections[mspec.name] = None
    tab_dim = 0
    if spec.use_tabular:
        if sup.tabular is None and not spec.modalities:
            raise SpecError("no tabular block and no modalities configured")
        if sup.tabular is not None:
            tab_dim = sup.tabular.d
    fitted = FittedFusion(spec, projections, list(sup.class_names), tab_dim, raw_dims)
    support = transform(fitted, sup)
    fitted.support_fingerprint = hashlib.sha256(
        np.ascontiguousarray(support.values).tobytes()
    ).hexdigest()
    return fitted


def transform(f: FittedFusion, ds: LabeledDataset) -> FeatureMatrix:
    """Fused feature matrix; columns are [tabular | modalities in spec order]."""
    blocks: list[np.ndarray] = []
    if f.spec.use_tabular and f.tabular_dim > 0:
        if ds.tabular is None:
            raise SpecError("fitted with tabular features but dataset has none")
        if ds.tabular.d != f.tabular_dim:
            raise SpecError("tabular width changed since fit")
        blocks.append(ds.tabular.values)
    for mspec in f.spec.modalities:
        if mspec.name not in ds.modalities:
            raise SpecError(f"modality {mspec.name!r} absent from dataset")
        pooled = _pooled(ds.modalities[mspec.name], mspec)
        p = f.projections[mspec.name]
        blocks.append(project_values(p, pooled.values) if p is not None else pooled.values)
    if not blocks:
        raise SpecError("nothing to fuse")
    values = np.concatenate(blocks, axis=1)
    return FeatureMatrix(values, ds.sample_ids, ds.labels)


def classification_metrics(
    true: np.ndarray, predicted: np.ndarray
) -> dict[str, float]:
    """Accuracy and macro-F1 over the classes observed in the true labels."""
    true = np.asarray(true)
    predicted = np.asarray(predicted)
    acc = float(np.mean(true == predicted))
    f1s = []
    for cls in np.unique(true):
        tp = np.sum((predicted == cls) & (true == cls))
        fp = np.sum((predicted == cls) & (true != cls))
        fn = np.sum((predicted != cls) & (true == cls))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    return {"accuracy": acc, "macro_f1": float(np.mean(f1s))}


def comet_predict(
    f: FittedFusion,
    sup: LabeledDataset,
    qry: LabeledDataset,
    predictor,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Transform both sets, predict, and score when query labels exist.

    Returns (probabilities, predicted class indices, metrics). Argmax ties
    break toward the lowest class index.
    """
    sup_fm = transform(f, sup)
    qry_fm = transform(f, qry)
    if sup_fm.labels is None:
        raise DataError("support has no labels")
    probs = predictor.predict(qry_fm.values, sup_fm)
    observed = np.unique(sup_fm.labels)
    predicted = observed[probs.argmax(axis=1)]
    metrics: dict = {}
    if qry_fm.labels is not None:
        metrics = classification_metrics(qry_fm.labels, predicted)
    return probs, predicted, metrics


# ---------------------------------------------------------------------------
# Serialization: versioned binary container


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    return struct.pack("<II", arr.shape[0], arr.shape[1]) + arr.astype("<f8").tobytes()


def _unpack_array(r) -> np.ndarray:
    rows, cols = r.unpack("<II")
    raw = np.frombuffer(r.take(8 * rows * cols), dtype="<f8")
    return raw.astype(np.float64).reshape(rows, cols)


def save_fusion(path, f: FittedFusion) -> None:
    header = {
        "class_names": f.class_names,
        "tabular_dim": f.tabular_dim,
        "use_tabular": f.spec.use_tabular,
        "seed": f.spec.seed,
        "raw_dims": f.raw_dims,
        "support_fingerprint": f.support_fingerprint,
        "modalities": [
            {
                "name": m.name,
                "pooling": m.pooling,
                "cls_index": m.cls_index,
                "has_pooler": m.pooler is not None,
                "pooler_iteration": m.pooler.fitted_iteration if m.pooler else 0,
                "pca_dim": m.pca_dim,
                "has_projection": f.projections[m.name] is not None,
            }
            for m in f.spec.modalities
        ],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [FUSION_MAGIC, struct.pack("<II", FUSION_VERSION, len(head)), head]
    for m in f.spec.modalities:
        if m.pooler is not None:
            out.append(_pack_array(m.pooler.theta))
        p = f.projections[m.name]
        if p is not None:
            out.append(_pack_array(p.mean))
            out.append(_pack_array(p.components))
            out.append(_pack_array(p.eigenvalues))
            out.append(_pack_array(p.explained_variance_ratio))
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_fusion(path) -> FittedFusion:
    from .data import _Reader  # same framing helpers as the embedding format

    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4) != FUSION_MAGIC:
        raise FormatError("not a fusion artifact")
    version, hlen = r.unpack("<II")
    if version != FUSION_VERSION:
        raise FormatError(f"unsupported fusion artifact version {version}")
    header = json.loads(r.take(hlen).decode("utf-8"))
    modalities = []
    projections: dict[str, PcaProjection | None] = {}
    for m in header["modalities"]:
        pooler = None
        if m["has_pooler"]:
            pooler = PalPooler(_unpack_array(r)[0], m["pooler_iteration"])
        modalities.append(
            ModalitySpec(m["name"], m["pooling"], m["cls_index"], pooler, m["pca_dim"])
        )
        if m["has_projection"]:
            mean = _unpack_array(r)[0]
            components = _unpack_array(r)
            eigenvalues = _unpack_array(r)[0]
            evr = _unpack_array(r)[0]
            projections[m["name"]] = PcaProjection(mean, components, eigenvalues, evr)
        else:
            projections[m["name"]] = None
    spec = FusionSpec(modalities, header["use_tabular"], header["seed"])
    fitted = FittedFusion(
        spec, projections, header["class_names"], header["tabular_dim"],
        header.get("raw_dims", {}), header["support_fingerprint"],
    )
    return fitted
