"""Graph datasets: loading, validation, normalization, edge splits,
synthetic generators and the class-node construction used for zero-shot
node classification.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import scipy.sparse as sp

from .sparse_linalg import rng_stream

__all__ = [
    "GraphDataset",
    "NormalizedAdjacency",
    "GraphParseError",
    "GraphValidationError",
    "canonical_edges",
    "load_dataset",
    "save_dataset",
    "read_matrix",
    "write_matrix",
    "normalize_adjacency",
    "split_edges",
    "gen_synthetic",
    "attach_class_nodes",
    "SYNTHETIC_FAMILIES",
]

FORMAT_VERSION = 1
SPLIT_NONE, SPLIT_TRAIN, SPLIT_TEST = 0, 1, 2
_SPLIT_CODES = {"train": SPLIT_TRAIN, "test": SPLIT_TEST}


class GraphParseError(ValueError):
    """A dataset file could not be parsed."""


class GraphValidationError(ValueError):
    """Parsed dataset content violates an invariant."""


def _frozen(a: np.ndarray | None) -> np.ndarray | None:
    if a is not None:
        a.setflags(write=False)
    return a


def canonical_edges(raw: np.ndarray, num_nodes: int) -> np.ndarray:
    """Symmetrize and dedup: each undirected pair once as ``(min, max)``.

    Self-loops are dropped; the normalizer adds them back on request.
    """
    raw = np.asarray(raw, dtype=np.int64).reshape(-1, 2)
    if raw.size and (raw.min() < 0 or raw.max() >= num_nodes):
        bad = raw[(raw < 0).any(axis=1) | (raw >= num_nodes).any(axis=1)][0]
        raise GraphValidationError(
            f"edge ({bad[0]},{bad[1]}) out of range for {num_nodes} nodes"
        )
    pairs = np.sort(raw, axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(pairs, axis=0)


@dataclass(frozen=True, eq=False)
class GraphDataset:
    """An undirected graph with optional node features, labels and an edge split.

    ``labels`` uses -1 for unlabeled nodes; ``label_split`` codes are
    0 (unused), 1 (train), 2 (test). ``test_mask`` marks test edges; when it is
    ``None`` every edge is a training edge.
    """

    name: str
    num_nodes: int
    edges: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    label_split: np.ndarray | None = None
    test_mask: np.ndarray | None = None
    train_isolated: tuple[int, ...] = ()
    class_offset: int | None = None
    family: str | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = int(self.num_nodes)
        if n < 1:
            raise GraphValidationError(f"{self.name}: num_nodes must be >= 1")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise GraphValidationError(f"{self.name}: edge endpoint out of range [0, {n})")
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise GraphValidationError(f"{self.name}: edges must be canonical (src < dst)")
            if len(np.unique(edges, axis=0)) != len(edges):
                raise GraphValidationError(f"{self.name}: duplicate edges")
        object.__setattr__(self, "edges", _frozen(edges))

        if self.features is not None:
            feats = np.asarray(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != n or feats.shape[1] < 1:
                raise GraphValidationError(
                    f"{self.name}: feature matrix shape {feats.shape} does not match {n} nodes"
                )
            if not np.all(np.isfinite(feats)):
                raise GraphValidationError(f"{self.name}: non-finite feature values")
            object.__setattr__(self, "features", _frozen(feats))

        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (n,):
                raise GraphValidationError(f"{self.name}: labels must have length {n}")
            split = (
                np.zeros(n, dtype=np.int8)
                if self.label_split is None
                else np.asarray(self.label_split, dtype=np.int8)
            )
            if split.shape != (n,):
                raise GraphValidationError(f"{self.name}: label split must have length {n}")
            if np.any((split != SPLIT_NONE) & (labels < 0)):
                raise GraphValidationError(f"{self.name}: split assigned to an unlabeled node")
            object.__setattr__(self, "labels", _frozen(labels))
            object.__setattr__(self, "label_split", _frozen(split))
        elif self.label_split is not None:
            raise GraphValidationError(f"{self.name}: label split without labels")

        if self.test_mask is not None:
            mask = np.asarray(self.test_mask, dtype=bool)
            if mask.shape != (len(edges),):
                raise GraphValidationError(f"{self.name}: test mask length mismatch")
            object.__setattr__(self, "test_mask", _frozen(mask))

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def train_edges(self) -> np.ndarray:
        if self.test_mask is None:
            return self.edges
        return self.edges[~self.test_mask]

    @property
    def test_edges(self) -> np.ndarray:
        if self.test_mask is None:
            return self.edges[:0]
        return self.edges[self.test_mask]

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else int(self.features.shape[1])

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            return 0
        known = self.labels[self.labels >= 0]
        return int(known.max()) + 1 if known.size else 0

    @property
    def train_label_mask(self) -> np.ndarray:
        if self.label_split is None:
            return np.zeros(self.num_nodes, dtype=bool)
        return self.label_split == SPLIT_TRAIN

    @property
    def test_label_mask(self) -> np.ndarray:
        if self.label_split is None:
            return np.zeros(self.num_nodes, dtype=bool)
        return self.label_split == SPLIT_TEST

    def replace(self, **changes: Any) -> "GraphDataset":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """``D^-1/2 (A [+ I]) D^-1/2`` as a CSR matrix."""

    matrix: sp.csr_matrix
    self_loops: bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def num_nodes(self) -> int:
        return int(self.matrix.shape[0])

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def normalize_adjacency(
    g: GraphDataset, add_self_loops: bool = True, edges: np.ndarray | None = None
) -> NormalizedAdjacency:
    """Symmetric degree normalization over ``g``'s training edges.

    Isolated nodes without a self-loop get all-zero rows.
    """
    n = g.num_nodes
    e = g.train_edges if edges is None else np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    if add_self_loops:
        loop = np.arange(n, dtype=np.int64)
        rows = np.concatenate([rows, loop])
        cols = np.concatenate([cols, loop])
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    vals = 1.0 / np.sqrt(deg[rows] * deg[cols])
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    mat.sum_duplicates()
    mat.sort_indices()
    mat.eliminate_zeros()
    return NormalizedAdjacency(matrix=mat, self_loops=add_self_loops)


# --- file formats -----------------------------------------------------------

_MATRIX_HEADER = struct.Struct("<QQ")


def write_matrix(path: str | Path, m: np.ndarray) -> None:
    """Binary matrix: two little-endian u64 (rows, cols) then f32 row-major."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError("write_matrix expects a 2-D array")
    with open(path, "wb") as fh:
        fh.write(_MATRIX_HEADER.pack(*m.shape))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _MATRIX_HEADER.size:
        raise GraphParseError(f"{path}: truncated matrix header")
    rows, cols = _MATRIX_HEADER.unpack_from(raw)
    body = raw[_MATRIX_HEADER.size:]
    if len(body) != rows * cols * 4:
        raise GraphParseError(
            f"{path}: expected {rows}x{cols} float32 payload ({rows * cols * 4} bytes), got {len(body)}"
        )
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)


def _read_edges(path: Path) -> np.ndarray:
    pairs = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise GraphParseError(f"{path}:{lineno}: expected 'src,dst', got {row!r}")
            try:
                pairs.append((int(row[0]), int(row[1])))
            except ValueError:
                raise GraphParseError(f"{path}:{lineno}: non-integer node id in {row!r}") from None
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def _read_labels(path: Path, num_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    labels = np.full(num_nodes, -1, dtype=np.int64)
    split = np.zeros(num_nodes, dtype=np.int8)
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise GraphParseError(f"{path}:{lineno}: expected 'node_id,class_id,split'")
            try:
                node, cls = int(row[0]), int(row[1])
            except ValueError:
                raise GraphParseError(f"{path}:{lineno}: non-integer field in {row!r}") from None
            code = _SPLIT_CODES.get(row[2].strip())
            if code is None:
                raise GraphParseError(f"{path}:{lineno}: split must be train|test, got {row[2]!r}")
            if not 0 <= node < num_nodes:
                raise GraphValidationError(f"{path}:{lineno}: node id {node} out of range")
            if cls < 0:
                raise GraphValidationError(f"{path}:{lineno}: negative class id")
            labels[node] = cls
            split[node] = code
    return labels, split


def load_dataset(manifest_path: str | Path) -> GraphDataset:
    """Read a dataset manifest and the files it references."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphParseError(f"{manifest_path}:{exc.lineno}: {exc.msg}") from None
    for key in ("name", "num_nodes", "edges"):
        if key not in manifest:
            raise GraphParseError(f"{manifest_path}: missing field {key!r}")
    if manifest.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
        raise GraphParseError(f"{manifest_path}: unsupported format_version {manifest['format_version']}")
    base = manifest_path.parent
    for key in ("edges", "features", "labels"):
        if manifest.get(key) and not (base / manifest[key]).is_file():
            raise GraphParseError(f"{manifest_path}: {key} file {manifest[key]!r} not found")
    n = int(manifest["num_nodes"])
    edges = canonical_edges(_read_edges(base / manifest["edges"]), n)

    features = None
    if manifest.get("features"):
        features = read_matrix(base / manifest["features"])
        if features.shape[0] != n:
            raise GraphValidationError(
                f"{manifest_path}: feature file has {features.shape[0]} rows for {n} nodes"
            )
    labels = split = None
    if manifest.get("labels"):
        labels, split = _read_labels(base / manifest["labels"], n)
    return GraphDataset(
        name=str(manifest["name"]),
        num_nodes=n,
        edges=edges,
        features=features,
        labels=labels,
        label_split=split,
        family=manifest.get("family"),
    )


def save_dataset(g: GraphDataset, directory: str | Path) -> Path:
    """Write ``g`` as manifest + edges/features/labels files; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = g.name.replace("/", "_")
    edges_file = f"{stem}.edges.csv"
    with open(directory / edges_file, "w", encoding="utf-8", newline="") as fh:
        fh.writelines(f"{s},{d}\n" for s, d in g.edges.tolist())
    features_file = labels_file = None
    if g.features is not None:
        features_file = f"{stem}.features.bin"
        write_matrix(directory / features_file, g.features)
    if g.labels is not None:
        labels_file = f"{stem}.labels.csv"
        names = {SPLIT_TRAIN: "train", SPLIT_TEST: "test"}
        with open(directory / labels_file, "w", encoding="utf-8", newline="") as fh:
            for node in np.flatnonzero(g.label_split != SPLIT_NONE).tolist():
                fh.write(f"{node},{g.labels[node]},{names[int(g.label_split[node])]}\n")
    manifest = {
        "name": g.name,
        "num_nodes": g.num_nodes,
        "edges": edges_file,
        "features": features_file,
        "labels": labels_file,
        "format_version": FORMAT_VERSION,
    }
    if g.family:
        manifest["family"] = g.family
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


# --- splitting --------------------------------------------------------------

def split_edges(g: GraphDataset, test_ratio: float, seed: int) -> GraphDataset:
    """Uniform random train/test edge split.

    Test edges are drawn in random order, skipping any edge whose removal
    would leave an endpoint without training edges. If not enough edges
    qualify, the remainder is filled anyway and the stranded nodes are
    recorded in ``train_isolated``.
    """
    if not 0.0 < test_ratio < 1.0:
        raise ValueError(f"test_ratio must be in (0, 1), got {test_ratio}")
    if g.num_edges == 0:
        raise ValueError(f"{g.name}: cannot split a graph with no edges")
    n_test = int(math.floor(test_ratio * g.num_edges))
    if n_test == 0:
        raise ValueError(f"{g.name}: empty test set (floor({test_ratio}*{g.num_edges}) = 0)")

    rng = rng_stream(seed, f"dataset:{g.name}:split")
    order = rng.permutation(g.num_edges)
    remaining = np.bincount(g.edges.ravel(), minlength=g.num_nodes)
    is_test = np.zeros(g.num_edges, dtype=bool)
    picked = 0
    for idx in order:
        if picked == n_test:
            break
        u, v = g.edges[idx]
        if remaining[u] > 1 and remaining[v] > 1:
            is_test[idx] = True
            remaining[u] -= 1
            remaining[v] -= 1
            picked += 1
    for idx in order:
        if picked == n_test:
            break
        if not is_test[idx]:
            u, v = g.edges[idx]
            is_test[idx] = True
            remaining[u] -= 1
            remaining[v] -= 1
            picked += 1

    touched = np.bincount(g.edges.ravel(), minlength=g.num_nodes) > 0
    stranded = tuple(int(i) for i in np.flatnonzero(touched & (remaining == 0)))
    return g.replace(test_mask=is_test, train_isolated=stranded)


# --- synthetic generators ---------------------------------------------------

SYNTHETIC_FAMILIES = ("sbm", "ba", "bipartite", "grid")


def _pairs_by_probability(prob: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    iu, ju = np.triu_indices(prob.shape[0], k=1)
    keep = rng.random(iu.shape[0]) < prob[iu, ju]
    return np.stack([iu[keep], ju[keep]], axis=1)


def _planted_features(
    labels: np.ndarray | None, n: int, params: dict[str, Any], rng: np.random.Generator
) -> np.ndarray | None:
    dim = int(params.get("feat_dim", 0))
    if dim <= 0:
        return None
    noise = float(params.get("feat_noise", 1.0))
    signal = float(params.get("feat_signal", 1.0))
    feats = noise * rng.standard_normal((n, dim))
    if labels is not None:
        feats[np.arange(n), labels % dim] += signal
    return feats


def _sbm(size: int, params: dict[str, Any], rng: np.random.Generator):
    blocks = int(params.get("blocks", 4))
    p_in = float(params.get("p_in", 0.2))
    p_out = float(params.get("p_out", 0.01))
    labels = rng.permutation(np.arange(size) % blocks)
    prob = np.where(labels[:, None] == labels[None, :], p_in, p_out)
    return _pairs_by_probability(prob, rng), labels


def _bipartite(size: int, params: dict[str, Any], rng: np.random.Generator):
    groups = int(params.get("groups", 4))
    n_users = int(round(size * float(params.get("user_fraction", 0.5))))
    n_users = min(max(n_users, 1), size - 1)
    p_in = float(params.get("p_in", 0.1))
    p_out = float(params.get("p_out", 0.005))
    user_groups = rng.permutation(np.arange(n_users) % groups)
    item_groups = rng.permutation(np.arange(size - n_users) % groups)
    prob = np.where(user_groups[:, None] == item_groups[None, :], p_in, p_out)
    hits = rng.random(prob.shape) < prob
    u, i = np.nonzero(hits)
    edges = np.stack([u, i + n_users], axis=1)
    return edges, np.concatenate([user_groups, item_groups])


def _barabasi_albert(size: int, params: dict[str, Any], rng: np.random.Generator):
    m = int(params.get("m", 2))
    if not 1 <= m < size:
        raise ValueError(f"ba: need 1 <= m < size, got m={m}, size={size}")
    edges = [(i, j) for i in range(m) for j in range(i + 1, m)]
    degree = np.zeros(size, dtype=np.float64)
    for i, j in edges:
        degree[i] += 1
        degree[j] += 1
    for new in range(m, size):
        weights = degree[:new]
        total = weights.sum()
        p = weights / total if total > 0 else None
        targets = rng.choice(new, size=m, replace=False, p=p)
        for t in sorted(int(t) for t in targets):
            edges.append((t, new))
            degree[t] += 1
            degree[new] += 1
    return np.array(edges, dtype=np.int64).reshape(-1, 2), None


def _grid(size: int, params: dict[str, Any], rng: np.random.Generator):
    rows = int(params.get("rows", math.isqrt(size)))
    if rows < 1 or size % rows:
        raise ValueError(f"grid: size {size} is not divisible into {rows} rows")
    cols = size // rows
    ids = np.arange(size).reshape(rows, cols)
    horizontal = np.stack([ids[:, :-1].ravel(), ids[:, 1:].ravel()], axis=1)
    vertical = np.stack([ids[:-1, :].ravel(), ids[1:, :].ravel()], axis=1)
    return np.concatenate([horizontal, vertical]), None


_GENERATORS = {
    "sbm": _sbm,
    "ba": _barabasi_albert,
    "bipartite": _bipartite,
    "grid": _grid,
}


def gen_synthetic(
    family: str,
    size: int,
    params: dict[str, Any] | None = None,
    seed: int = 0,
    name: str | None = None,
) -> GraphDataset:
    """Generate a graph from one of :data:`SYNTHETIC_FAMILIES`.

    Families with communities (``sbm``, ``bipartite``) label nodes by block;
    ``feat_dim > 0`` attaches planted features (block indicator scaled by
    ``feat_signal`` plus Gaussian noise of scale ``feat_noise``).
    """
    if family not in _GENERATORS:
        raise ValueError(f"unknown generator family {family!r}; expected one of {SYNTHETIC_FAMILIES}")
    if size < 2:
        raise ValueError(f"size must be >= 2, got {size}")
    params = dict(params or {})
    name = name or f"{family}-{size}-s{seed}"
    rng = rng_stream(seed, f"synth:{family}:{size}:{json.dumps(params, sort_keys=True)}")
    raw, labels = _GENERATORS[family](size, params, rng)
    features = _planted_features(labels, size, params, rng)
    label_split = None
    if labels is not None:
        frac = float(params.get("label_train_fraction", 0.5))
        label_split = np.where(rng.random(size) < frac, SPLIT_TRAIN, SPLIT_TEST).astype(np.int8)
    return GraphDataset(
        name=name,
        num_nodes=size,
        edges=canonical_edges(raw, size),
        features=features,
        labels=labels,
        label_split=label_split,
        family=family,
        meta={"params": params, "seed": seed},
    )


# --- class nodes ------------------------------------------------------------

def attach_class_nodes(g: GraphDataset) -> GraphDataset:
    """Append one node per class and link each train-labeled node to its class node.

    Class nodes carry zero feature rows. Test-labeled nodes get no class edge.
    """
    if g.labels is None or g.label_split is None:
        raise ValueError(f"{g.name}: class nodes need labels and a label split")
    n, c = g.num_nodes, g.num_classes
    if c == 0:
        raise ValueError(f"{g.name}: no labeled nodes")
    train_nodes = np.flatnonzero(g.train_label_mask)
    class_edges = np.stack([train_nodes, n + g.labels[train_nodes]], axis=1).astype(np.int64)

    edges = np.concatenate([g.edges, class_edges])
    test_mask = None
    if g.test_mask is not None:
        test_mask = np.concatenate([g.test_mask, np.zeros(len(class_edges), dtype=bool)])
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges = edges[order]
    if test_mask is not None:
        test_mask = test_mask[order]

    features = None
    if g.features is not None:
        features = np.vstack([g.features, np.zeros((c, g.feature_dim))])
    return g.replace(
        num_nodes=n + c,
        edges=edges,
        features=features,
        labels=np.concatenate([g.labels, np.full(c, -1, dtype=np.int64)]),
        label_split=np.concatenate([g.label_split, np.zeros(c, dtype=np.int8)]),
        test_mask=test_mask,
        class_offset=n,
    )
