"""Graph representation, normalization, synthetic generation, and protocols.

Graphs are undirected, unweighted, with dense float64 node features and
optional integer labels (-1 marks an unlabeled node). Edges are stored once
as (i, j) with i < j; self-loops appear only inside the symmetric
normalization D^{-1/2}(A+I)D^{-1/2}. Every randomized operation takes an
explicit seed and is a pure function of (inputs, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .tensor import as_matrix

UNLABELED = -1


class ParseError(ValueError):
    """A graph bundle file failed validation; message names file and line."""


@dataclass
class Graph:
    num_nodes: int
    edges: np.ndarray  # (E, 2) int64, canonical i < j, unique
    features: np.ndarray  # (N, d) float64
    labels: np.ndarray | None = None  # (N,) int64, -1 = unlabeled
    num_classes: int | None = None

    def __post_init__(self):
        self.features = as_matrix(self.features, rows=self.num_nodes)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= self.num_nodes:
                raise ValueError("edge endpoint outside [0, num_nodes)")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ValueError("self-loops may not be stored explicitly")
            lo = np.minimum(self.edges[:, 0], self.edges[:, 1])
            hi = np.maximum(self.edges[:, 0], self.edges[:, 1])
            self.edges = np.column_stack([lo, hi])
            order = np.lexsort((self.edges[:, 1], self.edges[:, 0]))
            self.edges = self.edges[order]
            if len(np.unique(self.edges, axis=0)) != len(self.edges):
                raise ValueError("duplicate undirected edge")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.num_nodes,):
                raise ValueError("labels length must equal num_nodes")
            if self.num_classes is not None and np.any(self.labels >= self.num_classes):
                raise ValueError("label id outside [0, num_classes)")
            if np.any(self.labels < UNLABELED):
                raise ValueError("labels must be class ids or -1")

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def normalize_adjacency(g: Graph) -> sp.csr_matrix:
    """Symmetric normalization A_hat = D^{-1/2} (A + I) D^{-1/2} as CSR.

    An isolated node keeps only its self-loop, giving A_hat_ii = 1.
    """
    n = g.num_nodes
    if g.num_edges:
        i, j = g.edges[:, 0], g.edges[:, 1]
        rows = np.concatenate([i, j, np.arange(n)])
        cols = np.concatenate([j, i, np.arange(n)])
    else:
        rows = cols = np.arange(n)
    vals = np.ones(len(rows))
    a_loop = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    deg = np.asarray(a_loop.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    d_half = sp.diags(inv_sqrt)
    return sp.csr_matrix(d_half @ a_loop @ d_half)


@dataclass
class SbmConfig:
    """Planted-partition testbed: equal blocks, well-separated feature centers.

    Centers are scaled standard basis vectors, so every pair of centers is
    exactly ``center_separation`` apart (requires feature_dim >= blocks).
    """

    blocks: int = 3
    nodes_per_block: int = 100
    p_in: float = 0.3
    p_out: float = 0.02
    feature_dim: int = 8
    center_separation: float = 6.0
    feature_noise: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.p_out <= self.p_in <= 1.0:
            raise ValueError("need 0 <= p_out <= p_in <= 1")
        if self.feature_dim < self.blocks:
            raise ValueError("feature_dim must be >= blocks for basis-vector centers")
        if self.center_separation <= 0:
            raise ValueError("center_separation must be positive")

    def centers(self) -> np.ndarray:
        c = np.zeros((self.blocks, self.feature_dim))
        # |a e_i - a e_j| = a sqrt(2); choose a so the pairwise gap is exact
        np.fill_diagonal(c[:, : self.blocks], self.center_separation / np.sqrt(2.0))
        return c


def generate_sbm(cfg: SbmConfig, seed: int) -> Graph:
    """Sample a stochastic block model graph with Gaussian block features."""
    rng = np.random.default_rng(seed)
    n = cfg.blocks * cfg.nodes_per_block
    block = np.repeat(np.arange(cfg.blocks), cfg.nodes_per_block)
    iu, ju = np.triu_indices(n, k=1)
    p = np.where(block[iu] == block[ju], cfg.p_in, cfg.p_out)
    keep = rng.random(len(iu)) < p
    edges = np.column_stack([iu[keep], ju[keep]])
    feats = cfg.centers()[block] + cfg.feature_noise * rng.standard_normal((n, cfg.feature_dim))
    return Graph(n, edges, feats, labels=block.astype(np.int64), num_classes=cfg.blocks)


def inject_label_noise(labels: np.ndarray, rate: float, num_classes: int, seed: int) -> np.ndarray:
    """Corrupt exactly round(rate * #labeled) labels to uniform different classes.

    Selection is without replacement over labeled nodes; unlabeled entries
    are never touched. rate=1.0 therefore flips every labeled node.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("noise rate must lie in [0, 1]")
    labels = np.asarray(labels, dtype=np.int64)
    out = labels.copy()
    labeled = np.flatnonzero(labels != UNLABELED)
    n_corrupt = int(np.floor(rate * len(labeled) + 0.5))
    if n_corrupt == 0:
        return out
    if num_classes < 2:
        raise ValueError("cannot corrupt labels with fewer than 2 classes")
    rng = np.random.default_rng(seed)
    picked = rng.choice(labeled, size=n_corrupt, replace=False)
    # uniform over the num_classes-1 classes different from the original
    draw = rng.integers(0, num_classes - 1, size=n_corrupt)
    out[picked] = draw + (draw >= labels[picked])
    return out


@dataclass
class GraphPart:
    """One induced subgraph plus the original ids of its (re-indexed) nodes."""

    graph: Graph
    node_ids: np.ndarray  # node_ids[local] = original index


def partition_sources(g: Graph, m: int, seed: int) -> list[GraphPart]:
    """Random near-equal node partition into m induced subgraphs.

    Cross-part edges are dropped; each part keeps the original node order
    internally and records the mapping back to original ids.
    """
    if m < 1:
        raise ValueError("need at least one part")
    if m > g.num_nodes:
        raise ValueError(f"cannot split {g.num_nodes} nodes into {m} parts")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(g.num_nodes)
    base, extra = divmod(g.num_nodes, m)
    parts, start = [], 0
    for i in range(m):
        size = base + (1 if i < extra else 0)
        ids = np.sort(perm[start : start + size])
        start += size
        local = np.full(g.num_nodes, -1, dtype=np.int64)
        local[ids] = np.arange(size)
        inside = (local[g.edges[:, 0]] >= 0) & (local[g.edges[:, 1]] >= 0) if g.num_edges else np.zeros(0, bool)
        sub_edges = local[g.edges[inside]] if g.num_edges else np.zeros((0, 2), np.int64)
        sub = Graph(
            size,
            sub_edges,
            g.features[ids],
            labels=None if g.labels is None else g.labels[ids],
            num_classes=g.num_classes,
        )
        parts.append(GraphPart(sub, ids))
    return parts


def augment(g: Graph, edge_drop: float, feature_mask: float, seed: int) -> Graph:
    """Drop each edge and zero each feature column independently at the given rates."""
    if not (0.0 <= edge_drop <= 1.0 and 0.0 <= feature_mask <= 1.0):
        raise ValueError("augmentation rates must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    keep = rng.random(g.num_edges) >= edge_drop
    feats = g.features.copy()
    feats[:, rng.random(g.feature_dim) < feature_mask] = 0.0
    return Graph(g.num_nodes, g.edges[keep], feats, labels=g.labels, num_classes=g.num_classes)


@dataclass
class EdgeSplit:
    train_edges: np.ndarray
    val_edges: np.ndarray
    test_edges: np.ndarray
    train_neg: np.ndarray
    val_neg: np.ndarray
    test_neg: np.ndarray


def split_edges(g: Graph, seed: int) -> EdgeSplit:
    """Shuffle edges into a 1:1:2 train/val/test split with sampled negatives.

    Each split gets as many uniformly sampled non-edges as it has edges;
    negatives are distinct and verified absent from the edge set.
    """
    e = g.num_edges
    if e < 4:
        raise ValueError(f"need at least 4 edges to split 1:1:2, got {e}")
    max_pairs = g.num_nodes * (g.num_nodes - 1) // 2
    if max_pairs - e < e:
        raise ValueError("not enough non-edges to sample negatives")
    rng = np.random.default_rng(seed)
    order = rng.permutation(e)
    n_tr = e // 4
    n_va = e // 4
    tr, va, te = order[:n_tr], order[n_tr : n_tr + n_va], order[n_tr + n_va :]

    edge_keys = set(map(tuple, g.edges.tolist()))
    negatives: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    while len(negatives) < e:
        u, v = rng.integers(0, g.num_nodes, size=2)
        if u == v:
            continue
        key = (min(u, v), max(u, v))
        if key in edge_keys or key in seen:
            continue
        seen.add(key)
        negatives.append(key)
    neg = np.array(negatives, dtype=np.int64)
    return EdgeSplit(
        train_edges=g.edges[tr],
        val_edges=g.edges[va],
        test_edges=g.edges[te],
        train_neg=neg[:n_tr],
        val_neg=neg[n_tr : n_tr + n_va],
        test_neg=neg[n_tr + n_va :],
    )


# -- bundle I/O ---------------------------------------------------------------
#
# A graph bundle directory holds features.tsv (N x d), edges.tsv (one "i j"
# per line, zero-based, stored once), optional labels.tsv (-1 = unlabeled),
# and meta.json with {"num_nodes", "feature_dim", "num_classes"}.


def save_graph(g: Graph, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    from .tensor import save_matrix_tsv

    save_matrix_tsv(g.features, directory / "features.tsv")
    with open(directory / "edges.tsv", "w") as fh:
        for i, j in g.edges:
            fh.write(f"{i} {j}\n")
    if g.labels is not None:
        with open(directory / "labels.tsv", "w") as fh:
            for y in g.labels:
                fh.write(f"{y}\n")
    meta = {
        "num_nodes": g.num_nodes,
        "feature_dim": g.feature_dim,
        "num_classes": g.num_classes,
    }
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_graph(directory: str | Path) -> Graph:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise ParseError(f"{meta_path}: missing meta.json") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{meta_path} line {exc.lineno}: invalid JSON") from None
    for key in ("num_nodes", "feature_dim"):
        if key not in meta:
            raise ParseError(f"{meta_path}: missing key {key!r}")
    n, d = int(meta["num_nodes"]), int(meta["feature_dim"])
    num_classes = meta.get("num_classes")
    num_classes = None if num_classes is None else int(num_classes)

    feat_path = directory / "features.tsv"
    try:
        feats = np.loadtxt(feat_path, dtype=np.float64, ndmin=2)
    except OSError:
        raise ParseError(f"{feat_path}: missing features.tsv") from None
    except ValueError as exc:
        raise ParseError(f"{feat_path}: malformed row ({exc})") from None
    if feats.shape != (n, d):
        raise ParseError(f"{feat_path}: expected {n}x{d} values, got {feats.shape[0]}x{feats.shape[1]}")

    edges = _load_edges(directory / "edges.tsv", n)

    labels = None
    label_path = directory / "labels.tsv"
    if label_path.exists():
        labels = _load_labels(label_path, n, num_classes)
    return Graph(n, edges, feats, labels=labels, num_classes=num_classes)


def _load_edges(path: Path, n: int) -> np.ndarray:
    if not path.exists():
        raise ParseError(f"{path}: missing edges.tsv")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ParseError(f"{path} line {lineno}: expected two indices")
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"{path} line {lineno}: non-integer endpoint") from None
            if not (0 <= i < n and 0 <= j < n):
                raise ParseError(f"{path} line {lineno}: endpoint outside [0, {n})")
            if i == j:
                raise ParseError(f"{path} line {lineno}: self-loop")
            rows.append((i, j))
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def _load_labels(path: Path, n: int, num_classes: int | None) -> np.ndarray:
    labels = np.empty(n, dtype=np.int64)
    count = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                y = int(text)
            except ValueError:
                raise ParseError(f"{path} line {lineno}: non-integer label") from None
            if y < UNLABELED or (num_classes is not None and y >= num_classes):
                raise ParseError(f"{path} line {lineno}: label {y} out of range")
            if count >= n:
                raise ParseError(f"{path} line {lineno}: more labels than nodes")
            labels[count] = y
            count += 1
    if count != n:
        raise ParseError(f"{path}: expected {n} labels, got {count}")
    return labels
