"""
Multi-relation attributed graphs: data model, dataset IO, adjacency
normalization, induced subgraphs, the contextual SBM generator and
feature-noise injection.
"""
import csv
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import ValidationError

from rfgnn.config import MANIFEST_FILE, DEFAULT_CLASS_NAMES
from rfgnn.models import DatasetManifest, SyntheticParams
from rfgnn.services.numkit import derive_rng, NOISE

logger = logging.getLogger(__name__)


class GraphError(Exception):
    """Custom exception for graph construction errors"""
    pass


class DatasetLoadError(GraphError):
    """Dataset file problem, reported as file:line: message"""

    def __init__(self, message: str, path, line: Optional[int] = None):
        self.path = str(path)
        self.line = line
        location = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{location}: {message}")


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _edge_array(pairs) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return arr.reshape(-1, 2)


@dataclass(frozen=True)
class MultiRelationGraph:
    """
    Attributed graph with K typed edge sets.

    labels holds -1 for unlabeled nodes; train/val/test are sorted node index
    arrays. All arrays are read-only after construction.
    """
    features: np.ndarray
    edges: Tuple[np.ndarray, ...]
    labels: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    num_classes: int = 2
    class_names: Tuple[str, ...] = tuple(DEFAULT_CLASS_NAMES)
    name: str = "graph"

    def __post_init__(self):
        features = _frozen(self.features, np.float64)
        if features.ndim != 2:
            raise GraphError(f"features must be N x M, got shape {features.shape}")
        if not np.all(np.isfinite(features)):
            raise GraphError("features contain NaN or Inf")
        n = features.shape[0]

        edges = tuple(_frozen(_edge_array(e), np.int64) for e in self.edges)
        if len(edges) < 1:
            raise GraphError("graph needs at least one relation (K >= 1)")
        for k, e in enumerate(edges):
            if e.size and (e.min() < 0 or e.max() >= n):
                raise GraphError(f"relation {k}: edge endpoint out of range for N={n}")

        labels = _frozen(self.labels, np.int64)
        if labels.shape != (n,):
            raise GraphError(f"labels has shape {labels.shape}, expected ({n},)")
        if labels.size and (labels.min() < -1 or labels.max() >= self.num_classes):
            raise GraphError(f"labels must lie in [-1, {self.num_classes})")
        if len(self.class_names) != self.num_classes:
            raise GraphError("class_names must have one entry per class")

        masks = {}
        for split in ("train", "val", "test"):
            idx = np.unique(np.asarray(getattr(self, split), dtype=np.int64))
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise GraphError(f"{split} mask index out of range for N={n}")
            if idx.size and np.any(labels[idx] < 0):
                raise GraphError(f"{split} mask contains unlabeled nodes")
            masks[split] = _frozen(idx, np.int64)
        if (np.intersect1d(masks["train"], masks["val"]).size
                or np.intersect1d(masks["train"], masks["test"]).size
                or np.intersect1d(masks["val"], masks["test"]).size):
            raise GraphError("train/val/test masks must be pairwise disjoint")

        object.__setattr__(self, "features", features)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        for split, idx in masks.items():
            object.__setattr__(self, split, idx)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    @property
    def k(self) -> int:
        return len(self.edges)

    def with_features(self, features: np.ndarray) -> "MultiRelationGraph":
        return replace(self, features=features)

    def with_edges(self, edges: Sequence[np.ndarray]) -> "MultiRelationGraph":
        return replace(self, edges=tuple(edges))

    def num_edges(self) -> int:
        return int(sum(len(e) for e in self.edges))


def merged_edges(g: MultiRelationGraph) -> np.ndarray:
    """Union of all relations, for backbones that ignore edge types"""
    if g.k == 1:
        return g.edges[0]
    stacked = np.concatenate(g.edges, axis=0)
    if stacked.size == 0:
        return stacked
    return np.unique(stacked, axis=0)


def normalize_adjacency(edges: np.ndarray, n: int) -> sp.csr_matrix:
    """
    Symmetric GCN normalization D^-1/2 (A + I) D^-1/2.

    A is the symmetrized binary adjacency; the diagonal of A + I is 1 even
    when the input already has self-loops. Output is canonical CSR.
    """
    edges = _edge_array(edges)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise GraphError(f"edge endpoint out of range for n={n}")

    loops = np.arange(n, dtype=np.int64)
    rows = np.concatenate([edges[:, 0], edges[:, 1], loops])
    cols = np.concatenate([edges[:, 1], edges[:, 0], loops])
    a = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.data[:] = 1.0

    deg = np.asarray(a.sum(axis=1)).ravel()
    d_inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
    a_hat = (d_inv_sqrt @ a @ d_inv_sqrt).tocsr()
    a_hat.sum_duplicates()
    a_hat.sort_indices()
    return a_hat


def induced_subgraph(
    g: MultiRelationGraph,
    nodes: Sequence[int],
) -> Tuple[MultiRelationGraph, np.ndarray]:
    """
    Restrict a graph to a node subset.

    Node nodes[i] becomes node i of the subgraph. Returns the subgraph and an
    old -> new index map (length N, -1 for dropped nodes).
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise GraphError("induced_subgraph: empty node subset")
    if nodes.min() < 0 or nodes.max() >= g.n:
        raise GraphError(f"induced_subgraph: node index out of range for N={g.n}")
    if np.unique(nodes).size != nodes.size:
        raise GraphError("induced_subgraph: node subset has duplicates")

    index_map = np.full(g.n, -1, dtype=np.int64)
    index_map[nodes] = np.arange(nodes.size)

    sub_edges = []
    for e in g.edges:
        mapped = index_map[e]
        sub_edges.append(mapped[np.all(mapped >= 0, axis=1)])

    def restrict(mask: np.ndarray) -> np.ndarray:
        mapped = index_map[mask]
        return np.sort(mapped[mapped >= 0])

    sub = replace(
        g,
        features=g.features[nodes],
        edges=tuple(sub_edges),
        labels=g.labels[nodes],
        train=restrict(g.train),
        val=restrict(g.val),
        test=restrict(g.test),
    )
    return sub, index_map


def generate_synthetic(params: SyntheticParams) -> MultiRelationGraph:
    """
    Contextual stochastic block model.

    Classes are balanced; each relation draws intra-class edges with
    probability p_in and inter-class edges with p_out. Features are
    [informative | redundant | noise]: informative columns are class centres
    plus unit Gaussian noise, redundant columns are noisy copies of
    informative ones, noise columns are pure Gaussian. Masks are a 1:1:8
    random partition.
    """
    rng = derive_rng(params.seed)
    n, c = params.n, params.classes

    labels = rng.permutation(np.arange(n) % c)

    iu, iv = np.triu_indices(n, k=1)
    same = labels[iu] == labels[iv]
    prob = np.where(same, params.p_in, params.p_out)
    relations = []
    for _ in range(params.relations):
        keep = rng.random(prob.size) < prob
        relations.append(np.stack([iu[keep], iv[keep]], axis=1))

    blocks = []
    if params.informative_dims:
        signs = rng.choice([-1.0, 1.0], size=(c, params.informative_dims))
        if c == 2:
            signs[1] = -signs[0]
        centres = 0.5 * params.class_separation * signs
        informative = centres[labels] + rng.standard_normal((n, params.informative_dims))
        blocks.append(informative)
        if params.redundant_dims:
            source = rng.integers(0, params.informative_dims, size=params.redundant_dims)
            noise = rng.standard_normal((n, params.redundant_dims))
            blocks.append(informative[:, source] + params.redundant_noise * noise)
    if params.noise_dims:
        blocks.append(rng.standard_normal((n, params.noise_dims)))
    features = np.concatenate(blocks, axis=1)

    perm = rng.permutation(n)
    n_train = n_val = int(math.floor(0.1 * n))
    train = np.sort(perm[:n_train])
    val = np.sort(perm[n_train:n_train + n_val])
    test = np.sort(perm[n_train + n_val:])

    class_names = DEFAULT_CLASS_NAMES if c == 2 else [f"class{i}" for i in range(c)]
    g = MultiRelationGraph(
        features=features,
        edges=tuple(relations),
        labels=labels,
        train=train,
        val=val,
        test=test,
        num_classes=c,
        class_names=tuple(class_names),
        name="synthetic",
    )
    logger.info(
        "Generated synthetic graph: n=%d m=%d k=%d edges=%d seed=%d",
        g.n, g.m, g.k, g.num_edges(), params.seed,
    )
    return g


def inject_feature_noise(g: MultiRelationGraph, fraction: float, seed: int) -> MultiRelationGraph:
    """
    Add unit Gaussian noise to floor(fraction * N * M) random feature entries.

    Returns a new graph; edges, labels and masks are shared unchanged.
    """
    if not 0.0 <= fraction <= 1.0:
        raise GraphError(f"noise fraction must be in [0, 1], got {fraction}")
    total = g.n * g.m
    count = min(total, int(math.floor(fraction * total + 1e-9)))

    rng = derive_rng(seed, NOISE)
    chosen = rng.choice(total, size=count, replace=False)
    features = np.array(g.features, copy=True)
    flat = features.reshape(-1)
    flat[chosen] += rng.standard_normal(count)
    return g.with_features(features)


def load_dataset(directory) -> MultiRelationGraph:
    """
    Load a dataset directory (manifest.json + the files it names).

    Raises:
        DatasetLoadError: missing file, count mismatch, bad endpoint or value
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    if not manifest_path.exists():
        raise DatasetLoadError("manifest not found", manifest_path)
    try:
        manifest = DatasetManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise DatasetLoadError(f"invalid manifest: {e}", manifest_path)

    n, m = manifest.num_nodes, manifest.num_features
    features = _read_features(directory / manifest.files.features, n, m)
    edges = _read_edges(directory / manifest.files.edges, n, manifest.num_relations)
    labels = _read_labels(directory / manifest.files.labels, n, manifest.num_classes)
    splits = _read_splits(directory / manifest.files.splits, n)

    try:
        g = MultiRelationGraph(
            features=features,
            edges=edges,
            labels=labels,
            train=splits["train"],
            val=splits["val"],
            test=splits["test"],
            num_classes=manifest.num_classes,
            class_names=tuple(manifest.class_names),
            name=manifest.name,
        )
    except GraphError as e:
        raise DatasetLoadError(str(e), directory)

    logger.info("Loaded dataset %s: n=%d m=%d k=%d edges=%d", manifest.name, g.n, g.m, g.k, g.num_edges())
    return g


def _open_rows(path: Path):
    if not path.exists():
        raise DatasetLoadError("file not found", path)
    with open(path, newline="", encoding="utf-8") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if row:
                yield line_no, row


def _read_features(path: Path, n: int, m: int) -> np.ndarray:
    rows: List[List[float]] = []
    for line_no, row in _open_rows(path):
        if len(row) != m:
            raise DatasetLoadError(f"expected {m} features, found {len(row)}", path, line_no)
        try:
            values = [float(v) for v in row]
        except ValueError:
            raise DatasetLoadError("non-numeric feature value", path, line_no)
        if not all(math.isfinite(v) for v in values):
            raise DatasetLoadError("feature value is NaN or Inf", path, line_no)
        rows.append(values)
    if len(rows) != n:
        raise DatasetLoadError(f"count mismatch: manifest num_nodes={n}, file has {len(rows)} rows", path)
    return np.array(rows, dtype=np.float64).reshape(n, m)


def _read_edges(path: Path, n: int, k: int) -> Tuple[np.ndarray, ...]:
    per_relation: List[List[Tuple[int, int]]] = [[] for _ in range(k)]
    for line_no, row in _open_rows(path):
        if line_no == 1 and [c.strip() for c in row] == ["src", "dst", "rel"]:
            continue
        if len(row) != 3:
            raise DatasetLoadError("expected src,dst,rel", path, line_no)
        try:
            src, dst, rel = (int(v) for v in row)
        except ValueError:
            raise DatasetLoadError("non-integer edge field", path, line_no)
        if not (0 <= src < n and 0 <= dst < n):
            raise DatasetLoadError(f"edge ({src}, {dst}) has an endpoint outside [0, {n})", path, line_no)
        if not 0 <= rel < k:
            raise DatasetLoadError(f"relation {rel} outside [0, {k})", path, line_no)
        per_relation[rel].append((src, dst))

    # duplicates dropped, self-loops kept
    out = []
    for pairs in per_relation:
        arr = _edge_array(pairs)
        out.append(np.unique(arr, axis=0) if arr.size else arr)
    return tuple(out)


def _read_labels(path: Path, n: int, num_classes: int) -> np.ndarray:
    rows = [
        (line_no, row) for line_no, row in _open_rows(path)
        if not (line_no == 1 and [c.strip() for c in row] == ["node", "label"])
    ]
    if len(rows) != n:
        raise DatasetLoadError(f"count mismatch: manifest num_nodes={n}, file has {len(rows)} rows", path)

    labels = np.full(n, -2, dtype=np.int64)
    for line_no, row in rows:
        if len(row) != 2:
            raise DatasetLoadError("expected node,label", path, line_no)
        try:
            node, label = int(row[0]), int(row[1])
        except ValueError:
            raise DatasetLoadError("non-integer label field", path, line_no)
        if not 0 <= node < n:
            raise DatasetLoadError(f"node {node} outside [0, {n})", path, line_no)
        if not -1 <= label < num_classes:
            raise DatasetLoadError(f"label {label} outside [-1, {num_classes})", path, line_no)
        if labels[node] != -2:
            raise DatasetLoadError(f"duplicate label row for node {node}", path, line_no)
        labels[node] = label
    return labels


def _read_splits(path: Path, n: int) -> dict:
    if not path.exists():
        raise DatasetLoadError("file not found", path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetLoadError(f"invalid JSON: {e.msg}", path, e.lineno)
    if not isinstance(raw, dict):
        raise DatasetLoadError("top-level value must be an object", path)
    splits = {}
    for key in ("train", "val", "test"):
        values = raw.get(key)
        if not isinstance(values, list) or not all(isinstance(v, int) for v in values):
            raise DatasetLoadError(f"'{key}' must be a list of node indices", path)
        if any(v < 0 or v >= n for v in values):
            raise DatasetLoadError(f"'{key}' has a node index outside [0, {n})", path)
        splits[key] = np.asarray(values, dtype=np.int64)
    return splits


def write_dataset(
    g: MultiRelationGraph,
    directory,
    source: Optional[dict] = None,
) -> DatasetManifest:
    """
    Write a graph in the dataset directory format.

    Output is a pure function of the graph, so equal graphs give
    byte-identical directories.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(
        name=g.name,
        num_nodes=g.n,
        num_features=g.m,
        num_relations=g.k,
        num_classes=g.num_classes,
        class_names=list(g.class_names),
        source=source,
    )

    with open(directory / manifest.files.features, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        for row in g.features:
            writer.writerow([repr(float(v)) for v in row])

    with open(directory / manifest.files.edges, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["src", "dst", "rel"])
        for rel, e in enumerate(g.edges):
            for src, dst in e:
                writer.writerow([int(src), int(dst), rel])

    with open(directory / manifest.files.labels, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["node", "label"])
        for node, label in enumerate(g.labels):
            writer.writerow([node, int(label)])

    splits = {key: [int(v) for v in getattr(g, key)] for key in ("train", "val", "test")}
    (directory / manifest.files.splits).write_text(json.dumps(splits) + "\n", encoding="utf-8")
    (directory / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return manifest
