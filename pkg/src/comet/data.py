"""Dataset containers and on-disk formats.

The binary embedding format ("CEMB") is little-endian throughout:

    magic "CEMB" | version u32 (=1) | kind u8 (0=pooled, 1=ragged)
    | d u32 | n u64
    | if ragged: grid flag u8 [+ H u32 + W u32] + token counts u32[n]
    | sample-id table (u32 byte length + UTF-8, per sample)
    | label flag u8 [+ labels u32[n]]
    | payload float32 row-major

Payloads are float32; containers hold float64 in memory but writing then
reading a file reproduces it byte for byte.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, SchemaError, SplitError, TreeError

CEMB_MAGIC = b"CEMB"
CEMB_VERSION = 1


@dataclass
class FeatureMatrix:
    """Dense n x d feature table with optional dense integer labels."""

    values: np.ndarray
    sample_ids: list[str]
    labels: np.ndarray | None = None
    num_classes: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"expected 2-d values, got shape {self.values.shape}")
        if self.values.shape[0] == 0:
            raise DataError("empty feature matrix")
        if not np.all(np.isfinite(self.values)):
            raise DataError("feature matrix contains NaN or Inf")
        if len(self.sample_ids) != self.values.shape[0]:
            raise DataError("sample_ids length does not match row count")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.values.shape[0],):
                raise DataError("labels length does not match row count")
            if self.labels.min() < 0:
                raise DataError("labels must be non-negative")
            if self.num_classes is None:
                self.num_classes = int(self.labels.max()) + 1
            elif self.labels.max() >= self.num_classes:
                raise DataError("label index out of range for num_classes")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def subset(self, indices) -> "FeatureMatrix":
        indices = np.asarray(indices, dtype=np.int64)
        return FeatureMatrix(
            self.values[indices],
            [self.sample_ids[i] for i in indices],
            None if self.labels is None else self.labels[indices],
            self.num_classes,
        )


@dataclass
class TokenEmbeddingSet:
    """Per-sample ragged token matrices (P_i x d), optionally grid shaped."""

    samples: list[tuple[str, np.ndarray]]
    grid: tuple[int, int] | None = None
    labels: np.ndarray | None = None
    num_classes: int | None = None

    def __post_init__(self):
        if not self.samples:
            raise DataError("empty token embedding set")
        cleaned = []
        d = None
        for sid, mat in self.samples:
            mat = np.asarray(mat, dtype=np.float64)
            if mat.ndim != 2 or mat.shape[0] == 0:
                raise DataError(f"sample {sid!r}: token matrix must be P x d with P >= 1")
            if not np.all(np.isfinite(mat)):
                raise DataError(f"sample {sid!r}: tokens contain NaN or Inf")
            if d is None:
                d = mat.shape[1]
            elif mat.shape[1] != d:
                raise DataError("all samples must share the same token dimension")
            cleaned.append((str(sid), mat))
        self.samples = cleaned
        if self.grid is not None:
            h, w = self.grid
            for sid, mat in self.samples:
                if mat.shape[0] != h * w:
                    raise FormatError(
                        f"sample {sid!r}: {mat.shape[0]} tokens but grid {h}x{w}"
                    )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.samples),):
                raise DataError("labels length does not match sample count")
            if self.num_classes is None:
                self.num_classes = int(self.labels.max()) + 1

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def d(self) -> int:
        return self.samples[0][1].shape[1]

    @property
    def sample_ids(self) -> list[str]:
        return [sid for sid, _ in self.samples]

    def token_counts(self) -> np.ndarray:
        return np.array([mat.shape[0] for _, mat in self.samples], dtype=np.int64)

    def subset(self, indices) -> "TokenEmbeddingSet":
        indices = np.asarray(indices, dtype=np.int64)
        return TokenEmbeddingSet(
            [self.samples[i] for i in indices],
            grid=self.grid,
            labels=None if self.labels is None else self.labels[indices],
            num_classes=self.num_classes,
        )


@dataclass
class LabeledDataset:
    """Aligned multimodal dataset: named modalities, optional tabular block, labels."""

    modalities: dict[str, FeatureMatrix | TokenEmbeddingSet]
    labels: np.ndarray
    class_names: list[str]
    tabular: FeatureMatrix | None = None

    def __post_init__(self):
        if not self.modalities and self.tabular is None:
            raise DataError("dataset needs at least one modality or a tabular block")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        ids = self.sample_ids
        if len(ids) != self.labels.shape[0]:
            raise DataError("labels not aligned with samples")
        for name, block in self.modalities.items():
            if block.sample_ids != ids:
                raise DataError(f"modality {name!r} not aligned on sample_id order")
        if self.tabular is not None and self.tabular.sample_ids != ids:
            raise DataError("tabular block not aligned on sample_id order")
        if self.labels.min() < 0 or self.labels.max() >= len(self.class_names):
            raise DataError("label outside [0, C)")

    @property
    def sample_ids(self) -> list[str]:
        if self.tabular is not None:
            return self.tabular.sample_ids
        first = next(iter(self.modalities.values()))
        return first.sample_ids

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            {name: block.subset(indices) for name, block in self.modalities.items()},
            self.labels[indices],
            self.class_names,
            tabular=None if self.tabular is None else self.tabular.subset(indices),
        )


@dataclass
class LabelTree:
    """Class hierarchy; leaves map one-to-one onto class indices."""

    parents: dict[str, str | None]
    node_names: dict[str, str]
    leaf_to_class: dict[str, int]
    root: str = field(init=False)
    children: dict[str, list[str]] = field(init=False)

    def __post_init__(self):
        roots = [nid for nid, p in self.parents.items() if p is None]
        if len(roots) != 1:
            raise TreeError(f"tree must have exactly one root, found {len(roots)}")
        self.root = roots[0]
        self.children = {nid: [] for nid in self.parents}
        for nid, parent in self.parents.items():
            if parent is None:
                continue
            if parent not in self.parents:
                raise TreeError(f"node {nid!r} has unknown parent {parent!r}")
            self.children[parent].append(nid)
        # reachability doubles as the cycle check
        seen = set()
        stack = [self.root]
        while stack:
            nid = stack.pop()
            if nid in seen:
                raise TreeError("cycle detected")
            seen.add(nid)
            stack.extend(self.children[nid])
        if seen != set(self.parents):
            raise TreeError("graph is not connected")
        leaves = {nid for nid in self.parents if not self.children[nid]}
        if set(self.leaf_to_class) != leaves:
            raise TreeError("leaf_to_class must cover exactly the leaf nodes")
        classes = sorted(self.leaf_to_class.values())
        if classes != list(range(len(leaves))):
            raise TreeError("leaf classes must be a bijection onto 0..C-1")

    @property
    def class_to_leaf(self) -> dict[int, str]:
        return {c: leaf for leaf, c in self.leaf_to_class.items()}

    def internal_nodes(self) -> list[str]:
        """Internal node ids in depth-first (root first) order."""
        out = []
        stack = [self.root]
        while stack:
            nid = stack.pop()
            kids = self.children[nid]
            if kids:
                out.append(nid)
                stack.extend(reversed(kids))
        return out

    def depth(self) -> int:
        def walk(nid):
            kids = self.children[nid]
            if not kids:
                return 0
            return 1 + max(walk(k) for k in kids)

        return walk(self.root)

    def leaves_under(self, nid: str) -> list[str]:
        kids = self.children[nid]
        if not kids:
            return [nid]
        out = []
        for k in kids:
            out.extend(self.leaves_under(k))
        return out

    def path_to_root(self, nid: str) -> list[str]:
        """Node ids from root down to nid inclusive."""
        path = [nid]
        while self.parents[path[-1]] is not None:
            path.append(self.parents[path[-1]])
        return list(reversed(path))


# ---------------------------------------------------------------------------
# CEMB binary format


def _write_str(out: list[bytes], s: str):
    raw = s.encode("utf-8")
    out.append(struct.pack("<I", len(raw)))
    out.append(raw)


def write_embeddings(path, data: FeatureMatrix | TokenEmbeddingSet) -> None:
    out: list[bytes] = [CEMB_MAGIC, struct.pack("<I", CEMB_VERSION)]
    if isinstance(data, FeatureMatrix):
        out.append(struct.pack("<BIQ", 0, data.d, data.n))
        ids = data.sample_ids
        labels = data.labels
        payload = np.ascontiguousarray(data.values, dtype="<f4")
    else:
        out.append(struct.pack("<BIQ", 1, data.d, data.n))
        if data.grid is not None:
            out.append(struct.pack("<BII", 1, data.grid[0], data.grid[1]))
        else:
            out.append(struct.pack("<B", 0))
        out.append(data.token_counts().astype("<u4").tobytes())
        ids = data.sample_ids
        labels = data.labels
        payload = np.ascontiguousarray(
            np.concatenate([mat for _, mat in data.samples], axis=0), dtype="<f4"
        )
    for sid in ids:
        _write_str(out, sid)
    if labels is not None:
        out.append(struct.pack("<B", 1))
        out.append(np.asarray(labels).astype("<u4").tobytes())
    else:
        out.append(struct.pack("<B", 0))
    out.append(payload.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, nbytes: int) -> bytes:
        if self.pos + nbytes > len(self.blob):
            raise FormatError("truncated file")
        chunk = self.blob[self.pos : self.pos + nbytes]
        self.pos += nbytes
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_embeddings(path) -> FeatureMatrix | TokenEmbeddingSet:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    if r.take(4) != CEMB_MAGIC:
        raise FormatError("bad magic, not a CEMB file")
    (version,) = r.unpack("<I")
    if version != CEMB_VERSION:
        raise FormatError(f"unsupported CEMB version {version}")
    kind, d, n = r.unpack("<BIQ")
    if kind not in (0, 1):
        raise FormatError(f"unknown kind byte {kind}")
    if n == 0:
        raise DataError("embedding file holds zero samples")
    grid = None
    counts = None
    if kind == 1:
        (grid_flag,) = r.unpack("<B")
        if grid_flag:
            h, w = r.unpack("<II")
            grid = (h, w)
        counts = np.frombuffer(r.take(4 * n), dtype="<u4").astype(np.int64)
    ids = []
    for _ in range(n):
        (slen,) = r.unpack("<I")
        ids.append(r.take(slen).decode("utf-8"))
    (label_flag,) = r.unpack("<B")
    labels = None
    if label_flag:
        labels = np.frombuffer(r.take(4 * n), dtype="<u4").astype(np.int64)
    if kind == 0:
        payload = np.frombuffer(r.take(4 * n * d), dtype="<f4")
        if r.pos != len(blob):
            raise FormatError("trailing bytes after payload")
        values = payload.astype(np.float64).reshape(n, d)
        if np.isnan(values).any():
            raise DataError("NaN in payload")
        return FeatureMatrix(values, ids, labels)
    total = int(counts.sum())
    payload = np.frombuffer(r.take(4 * total * d), dtype="<f4")
    if r.pos != len(blob):
        raise FormatError("trailing bytes after payload")
    flat = payload.astype(np.float64).reshape(total, d)
    if np.isnan(flat).any():
        raise DataError("NaN in payload")
    samples = []
    offset = 0
    for sid, cnt in zip(ids, counts):
        samples.append((sid, flat[offset : offset + cnt]))
        offset += cnt
    return TokenEmbeddingSet(samples, grid=grid, labels=labels)


# ---------------------------------------------------------------------------
# Tabular CSV ingestion


@dataclass
class ColumnSpec:
    """Names the numeric and categorical columns of a CSV file."""

    numeric: list[str] = field(default_factory=list)
    categorical: list[str] = field(default_factory=list)
    label: str | None = None
    sample_id: str | None = None


@dataclass
class TabularEncoding:
    """Persisted fit-time state: category dictionaries and imputation medians.

    Unseen categories at predict time map to the reserved index
    len(categories); missing numeric cells take the fit-time median.
    """

    categories: dict[str, dict[str, int]]
    medians: dict[str, float]
    label_names: list[str] | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "categories": self.categories,
                "medians": self.medians,
                "label_names": self.label_names,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "TabularEncoding":
        doc = json.loads(text)
        return cls(doc["categories"], doc["medians"], doc.get("label_names"))


def read_tabular_csv(
    path,
    schema: ColumnSpec,
    encoding: TabularEncoding | None = None,
) -> tuple[FeatureMatrix, TabularEncoding]:
    """Read an RFC-4180 CSV into a FeatureMatrix.

    Column order in the output is schema.numeric followed by
    schema.categorical. Passing the encoding returned by a previous call
    applies the same category dictionaries and medians (predict-time path).
    """
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise SchemaError("CSV file has no header row")
        header = set(reader.fieldnames)
        wanted = list(schema.numeric) + list(schema.categorical)
        if schema.label:
            wanted.append(schema.label)
        if schema.sample_id:
            wanted.append(schema.sample_id)
        for col in wanted:
            if col not in header:
                raise SchemaError(f"unknown column {col!r}")
        rows = list(reader)
    if not rows:
        raise DataError("CSV holds no data rows")

    n = len(rows)
    cols = schema.numeric + schema.categorical
    values = np.zeros((n, len(cols)), dtype=np.float64)
    fitting = encoding is None
    if fitting:
        encoding = TabularEncoding(categories={}, medians={})
        for col in schema.categorical:
            encoding.categories[col] = {}

    for j, col in enumerate(schema.numeric):
        parsed = np.full(n, np.nan)
        for i, row in enumerate(rows):
            cell = row[col].strip()
            if cell == "":
                continue
            try:
                parsed[i] = float(cell)
            except ValueError:
                raise DataError(f"unparseable numeric cell {row[col]!r} in column {col!r}")
        if fitting:
            present = parsed[~np.isnan(parsed)]
            if present.size == 0:
                raise DataError(f"numeric column {col!r} is entirely missing")
            encoding.medians[col] = float(np.median(present))
        parsed[np.isnan(parsed)] = encoding.medians[col]
        values[:, j] = parsed

    for j, col in enumerate(schema.categorical, start=len(schema.numeric)):
        table = encoding.categories[col]
        reserved = len(table)
        for i, row in enumerate(rows):
            cell = row[col]
            if cell in table:
                values[i, j] = table[cell]
            elif fitting:
                table[cell] = len(table)
                values[i, j] = table[cell]
            else:
                values[i, j] = reserved

    labels = None
    if schema.label:
        raw = [row[schema.label] for row in rows]
        if fitting:
            names = sorted(set(raw))
            encoding.label_names = names
        elif encoding.label_names is None:
            raise SchemaError("encoding carries no label dictionary")
        index = {name: i for i, name in enumerate(encoding.label_names)}
        try:
            labels = np.array([index[v] for v in raw], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"unseen label value {exc.args[0]!r}")

    if schema.sample_id:
        ids = [row[schema.sample_id] for row in rows]
    else:
        ids = [str(i) for i in range(n)]
    num_classes = len(encoding.label_names) if labels is not None else None
    return FeatureMatrix(values, ids, labels, num_classes), encoding


# ---------------------------------------------------------------------------
# Label tree


def read_label_tree(path) -> LabelTree:
    """Parse the JSON tree document: nodes with parent links + leaf class map."""
    with open(path) as f:
        doc = json.load(f)
    try:
        nodes = doc["nodes"]
        leaf_classes = doc["leaf_classes"]
    except (TypeError, KeyError):
        raise TreeError("tree document must have 'nodes' and 'leaf_classes'")
    parents: dict[str, str | None] = {}
    names: dict[str, str] = {}
    for node in nodes:
        nid = str(node["id"])
        if nid in parents:
            raise TreeError(f"duplicate node id {nid!r}")
        parents[nid] = None if node.get("parent") is None else str(node["parent"])
        names[nid] = str(node.get("name", nid))
    mapping: dict[str, int] = {}
    seen_classes: set[int] = set()
    for leaf, cls in leaf_classes.items():
        cls = int(cls)
        if cls in seen_classes:
            raise TreeError(f"class {cls} mapped to more than one leaf")
        seen_classes.add(cls)
        mapping[str(leaf)] = cls
    return LabelTree(parents, names, mapping)


# ---------------------------------------------------------------------------
# Splitting


def stratified_split_indices(
    labels: np.ndarray, fraction: float, seed: int, stratified: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint index partition; first part holds ~fraction of the rows.

    Stratified mode keeps per-class proportions within one sample and
    requires every class to have at least two members.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if not 0.0 < fraction < 1.0:
        raise SplitError(f"fraction must be in (0,1), got {fraction}")
    rng = np.random.default_rng(seed)
    if not stratified:
        perm = rng.permutation(n)
        k = int(round(n * fraction))
        k = min(max(k, 1), n - 1)
        return np.sort(perm[:k]), np.sort(perm[k:])

    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() < 2:
        bad = classes[counts.argmin()]
        raise SplitError(f"class {bad} has fewer than 2 samples")
    target = int(round(n * fraction))
    raw = counts * fraction
    take = np.floor(raw).astype(np.int64)
    take = np.clip(take, 1, counts - 1)
    # distribute the remainder by largest fractional part
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    i = 0
    while take.sum() < target and i < len(order):
        c = order[i]
        if take[c] < counts[c] - 1:
            take[c] += 1
        i += 1
    first, second = [], []
    for cls, k in zip(classes, take):
        idx = np.flatnonzero(labels == cls)
        idx = rng.permutation(idx)
        first.append(idx[:k])
        second.append(idx[k:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def split_dataset(
    ds: LabeledDataset, fraction: float, stratified: bool = True, seed: int = 0
) -> tuple[LabeledDataset, LabeledDataset]:
    first, second = stratified_split_indices(ds.labels, fraction, seed, stratified)
    return ds.subset(first), ds.subset(second)
