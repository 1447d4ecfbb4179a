"""Graph container, on-disk format, splits, class folds, and synthetic graphs.

A dataset directory holds five text files (UTF-8, LF):

    meta.txt      num_nodes=, num_classes=, feature_dim= lines
    edges.txt     one `u v` pair per line, 0-based, undirected
    features.csv  one row of comma-separated decimals per node
    labels.txt    one integer per node
    masks.txt     `train:`, `val:`, `test:` lines with space-separated ids
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .errors import ContractViolation, DatasetFormatError


@dataclass(frozen=True)
class Graph:
    """Immutable node features + symmetric CSR adjacency + labels."""

    features: np.ndarray
    adjacency: sp.csr_matrix
    labels: np.ndarray
    num_classes: int

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def validate(self):
        n = self.n
        adj = self.adjacency
        if adj.shape != (n, n):
            raise ContractViolation(f"adjacency {adj.shape} does not match n={n}")
        if adj.diagonal().any():
            raise ContractViolation("adjacency must not contain self-loops")
        if (adj != adj.T).nnz != 0:
            raise ContractViolation("adjacency must be symmetric")
        if self.labels.shape != (n,):
            raise ContractViolation("labels must have one entry per node")
        if self.labels.size and (
                self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractViolation("labels out of range")
        return self


@dataclass(frozen=True)
class SplitMasks:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def validate(self):
        if (self.train & self.validation).any() or (self.train & self.test).any() \
                or (self.validation & self.test).any():
            raise ContractViolation("split masks must be pairwise disjoint")
        return self


@dataclass(frozen=True)
class ClassFoldPlan:
    """Partition of the class ids into folds of nearly equal size."""

    folds: tuple
    ratio: float


@dataclass(frozen=True)
class OpenWorldSplit:
    """Known/new class sets plus labeled/unlabeled node partition for one fold pair."""

    known_classes: tuple
    validation_new_classes: tuple
    test_new_classes: tuple
    labeled_nodes: np.ndarray
    unlabeled_nodes: np.ndarray


def make_graph(features, edges, labels, num_classes):
    """Build a validated Graph from an undirected edge list (symmetrizing it)."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = features.shape[0]
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        both = np.vstack([edges, edges[:, ::-1]])
        both = np.unique(both, axis=0)
        keep = both[:, 0] != both[:, 1]
        both = both[keep]
        data = np.ones(len(both))
        adj = sp.csr_matrix((data, (both[:, 0], both[:, 1])), shape=(n, n))
    else:
        adj = sp.csr_matrix((n, n))
    return Graph(features, adj, labels, int(num_classes)).validate()


def _parse_int(token, path, line, what):
    try:
        return int(token)
    except ValueError:
        raise DatasetFormatError(path, line, f"expected integer {what}, got {token!r}")


def _read_meta(path):
    meta = {}
    for i, raw in enumerate(path.read_text().splitlines(), start=1):
        raw = raw.strip()
        if not raw:
            continue
        if "=" not in raw:
            raise DatasetFormatError(path, i, "expected key=value")
        key, value = raw.split("=", 1)
        meta[key.strip()] = _parse_int(value.strip(), path, i, f"value for {key}")
    for key in ("num_nodes", "num_classes", "feature_dim"):
        if key not in meta:
            raise DatasetFormatError(path, 0, f"missing {key}")
    return meta


def _read_features(path, n, d):
    try:
        frame = pd.read_csv(path, header=None, dtype=np.float64,
                            float_precision="round_trip")
        arr = frame.to_numpy()
        if arr.shape == (n, d) and np.isfinite(arr).all():
            return arr
    except Exception:
        pass
    # Slow path with precise line diagnostics.
    rows = []
    with open(path) as handle:
        for i, raw in enumerate(handle, start=1):
            if i > n:
                raise DatasetFormatError(path, i, f"more than {n} feature rows")
            parts = raw.strip().split(",")
            if len(parts) != d:
                raise DatasetFormatError(
                    path, i, f"expected {d} values, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise DatasetFormatError(path, i, "non-numeric feature value")
    if len(rows) != n:
        raise DatasetFormatError(path, len(rows), f"expected {n} feature rows")
    return np.array(rows)


def _read_mask_file(path, n):
    masks = {}
    for i, raw in enumerate(path.read_text().splitlines(), start=1):
        raw = raw.strip()
        if not raw:
            continue
        if ":" not in raw:
            raise DatasetFormatError(path, i, "expected `name: ids...`")
        name, rest = raw.split(":", 1)
        name = name.strip()
        if name not in ("train", "val", "test"):
            raise DatasetFormatError(path, i, f"unknown mask {name!r}")
        mask = np.zeros(n, dtype=bool)
        for token in rest.split():
            idx = _parse_int(token, path, i, "node id")
            if not 0 <= idx < n:
                raise DatasetFormatError(path, i, f"node id {idx} out of range")
            mask[idx] = True
        masks[name] = mask
    for name in ("train", "val", "test"):
        if name not in masks:
            raise DatasetFormatError(path, 0, f"missing {name}: line")
    return SplitMasks(masks["train"], masks["val"], masks["test"]).validate()


def load_graph(directory):
    """Load and validate a dataset directory; returns (Graph, SplitMasks)."""
    directory = Path(directory)
    for name in ("meta.txt", "edges.txt", "features.csv", "labels.txt", "masks.txt"):
        if not (directory / name).exists():
            raise DatasetFormatError(directory / name, 0, "missing file")
    meta = _read_meta(directory / "meta.txt")
    n, num_classes, d = meta["num_nodes"], meta["num_classes"], meta["feature_dim"]

    edges = []
    epath = directory / "edges.txt"
    for i, raw in enumerate(epath.read_text().splitlines(), start=1):
        raw = raw.strip()
        if not raw:
            continue
        parts = raw.split()
        if len(parts) != 2:
            raise DatasetFormatError(epath, i, "expected `u v`")
        u = _parse_int(parts[0], epath, i, "node id")
        v = _parse_int(parts[1], epath, i, "node id")
        if not (0 <= u < n and 0 <= v < n):
            raise DatasetFormatError(epath, i, f"edge ({u}, {v}) out of range")
        if u == v:
            raise DatasetFormatError(epath, i, f"self-loop at node {u}")
        edges.append((u, v))

    features = _read_features(directory / "features.csv", n, d)

    labels = []
    lpath = directory / "labels.txt"
    for i, raw in enumerate(lpath.read_text().splitlines(), start=1):
        raw = raw.strip()
        if not raw:
            continue
        label = _parse_int(raw, lpath, i, "label")
        if not 0 <= label < num_classes:
            raise DatasetFormatError(lpath, i, f"label {label} out of range")
        labels.append(label)
    if len(labels) != n:
        raise DatasetFormatError(lpath, len(labels), f"expected {n} labels")

    masks = _read_mask_file(directory / "masks.txt", n)
    graph = make_graph(features, edges, labels, num_classes)
    return graph, masks


def save_graph(graph, masks, directory):
    """Write a dataset directory in the documented format (round-trips exactly)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "meta.txt").write_text(
        f"num_nodes={graph.n}\nnum_classes={graph.num_classes}\n"
        f"feature_dim={graph.d}\n")
    coo = sp.triu(graph.adjacency, k=1).tocoo()
    lines = [f"{u} {v}" for u, v in zip(coo.row, coo.col)]
    (directory / "edges.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    with open(directory / "features.csv", "w") as handle:
        for row in graph.features:
            handle.write(",".join(f"{x:.17g}" for x in row) + "\n")
    (directory / "labels.txt").write_text(
        "".join(f"{y}\n" for y in graph.labels))
    with open(directory / "masks.txt", "w") as handle:
        for name, mask in (("train", masks.train), ("val", masks.validation),
                           ("test", masks.test)):
            ids = " ".join(str(i) for i in np.flatnonzero(mask))
            handle.write(f"{name}: {ids}\n")


def normalize_adjacency(graph):
    """Symmetric degree normalization with self-loops added."""
    n = graph.n
    a_tilde = graph.adjacency + sp.eye(n, format="csr")
    degrees = np.asarray(a_tilde.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(degrees)
    scale = sp.diags(inv_sqrt)
    return (scale @ a_tilde @ scale).tocsr()


def homophily(graph):
    """Class-insensitive edge homophily in [0, 1].

    Per class k: h_k = fraction of edge endpoints at class-k nodes whose other
    endpoint is also class k; excess over the class share |C_k|/n is clipped
    at zero and averaged over classes with a 1/(C-1) normalizer.
    """
    c = graph.num_classes
    if c < 2:
        raise ContractViolation("homophily needs at least 2 classes")
    labels = graph.labels
    adj = graph.adjacency
    degrees = np.diff(adj.indptr)
    src = np.repeat(np.arange(graph.n), degrees)
    same = labels[src] == labels[adj.indices]
    d_same = np.bincount(labels[src], weights=same.astype(float), minlength=c)
    d_total = np.bincount(labels[src], minlength=c).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        h_k = np.where(d_total > 0, d_same / d_total, 0.0)
    share = np.bincount(labels, minlength=c) / graph.n
    return float(np.maximum(0.0, h_k - share).sum() / (c - 1))


def feasible_fold_count(num_classes, ratio):
    """Largest feasible fold count <= round(1/ratio) with >= 2 classes per fold."""
    wanted = round(1.0 / ratio)
    return max(2, min(wanted, num_classes // 2))


def make_class_folds(num_classes, ratio, seed, num_folds=None):
    """Seeded partition of class ids into folds whose sizes differ by at most 1."""
    if not 0.0 < ratio <= 0.5:
        raise ContractViolation(f"new-class ratio must be in (0, 0.5], got {ratio}")
    folds = num_folds if num_folds is not None else round(1.0 / ratio)
    if folds < 2:
        raise ContractViolation("need at least 2 folds")
    if num_classes // folds < 2:
        raise ContractViolation(
            f"{num_classes} classes cannot fill {folds} folds with >= 2 classes each")
    rng = np.random.default_rng(seed)
    order = rng.permutation(num_classes)
    groups = np.array_split(order, folds)
    return ClassFoldPlan(tuple(tuple(sorted(int(c) for c in g)) for g in groups),
                         float(ratio))


def open_world_split(graph, masks, plan, test_fold, val_fold):
    """Assign classes/nodes to their open-world roles for one fold pair.

    Known classes are everything outside the two chosen folds; labeled nodes
    are train-mask nodes of known classes; all other nodes are unlabeled.
    """
    nf = len(plan.folds)
    if not (0 <= test_fold < nf and 0 <= val_fold < nf):
        raise ContractViolation("fold index out of range")
    if test_fold == val_fold:
        raise ContractViolation("test and validation folds must differ")
    test_new = plan.folds[test_fold]
    val_new = plan.folds[val_fold]
    known = tuple(sorted(
        c for f in plan.folds for c in f if c not in test_new and c not in val_new))
    known_mask = np.isin(graph.labels, known)
    labeled = np.flatnonzero(masks.train & known_mask)
    unlabeled = np.setdiff1d(np.arange(graph.n), labeled)
    return OpenWorldSplit(known, tuple(val_new), tuple(test_new), labeled, unlabeled)


def subgraph(graph, nodes):
    """Induced subgraph with labels re-indexed to a dense 0..k-1 range."""
    nodes = np.asarray(nodes, dtype=np.intp)
    adj = graph.adjacency[nodes][:, nodes].tocsr()
    old_labels = graph.labels[nodes]
    classes = np.unique(old_labels)
    new_labels = np.searchsorted(classes, old_labels)
    return Graph(graph.features[nodes], adj, new_labels,
                 int(classes.size)).validate()


def planetoid_masks(labels, rng, train_per_class=20, num_val=500, num_test=1000):
    """Random masks: `train_per_class` labeled per class, then val and test pools.

    On graphs too small for the requested pools, validation is capped at half
    of the non-train nodes so the test pool is never empty.
    """
    n = len(labels)
    train = np.zeros(n, dtype=bool)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        pick = rng.permutation(members)[:train_per_class]
        train[pick] = True
    rest = rng.permutation(np.flatnonzero(~train))
    n_val = min(num_val, rest.size // 2)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    val[rest[:n_val]] = True
    test[rest[n_val:n_val + num_test]] = True
    return SplitMasks(train, val, test).validate()


def generate_sbm(num_nodes, num_classes, p_in, p_out, feature_dim,
                 feature_noise, seed):
    """Balanced stochastic block model with noisy one-hot class centroids.

    Returns (Graph, SplitMasks) with Planetoid-style masks.
    """
    if not (p_in > p_out >= 0.0):
        raise ContractViolation(f"need p_in > p_out >= 0, got {p_in}, {p_out}")
    if p_in > 1.0:
        raise ContractViolation("p_in must be a probability")
    if num_classes < 4:
        raise ContractViolation("need at least 4 classes")
    if feature_dim < num_classes:
        raise ContractViolation("feature_dim must be >= num_classes")
    rng = np.random.default_rng(seed)
    sizes = np.full(num_classes, num_nodes // num_classes)
    sizes[: num_nodes % num_classes] += 1
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    labels = np.repeat(np.arange(num_classes), sizes)

    rows, cols = [], []
    for a in range(num_classes):
        for b in range(a, num_classes):
            p = p_in if a == b else p_out
            block = rng.random((sizes[a], sizes[b])) < p
            if a == b:
                block = np.triu(block, k=1)
            r, c = np.nonzero(block)
            rows.append(r + bounds[a])
            cols.append(c + bounds[b])
    edges = np.column_stack([np.concatenate(rows), np.concatenate(cols)])

    centroids = np.zeros((num_classes, feature_dim))
    centroids[np.arange(num_classes), np.arange(num_classes)] = 1.0
    features = centroids[labels] + rng.normal(0.0, feature_noise,
                                              (num_nodes, feature_dim))
    graph = make_graph(features, edges, labels, num_classes)
    masks = planetoid_masks(labels, rng)
    return graph, masks
