"""Frozen-backbone fine-tuning heads, metrics, and few-shot sampling.

Node classification uses a single linear head on the backbone embeddings
(softmax cross-entropy); link prediction scores sigmoid(w^T (z_u * z_v) + b)
with a logistic loss, message-passing over training edges only. The backbone
is never written to: fine-tuning reads its embeddings once. AUROC uses the
tie-aware rank-sum estimator, which agrees exactly with pair enumeration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor
from .encoder import EncoderConfig, EncoderParams, encode, encode_on_tape, init_encoder
from .graph import EdgeSplit, Graph, normalize_adjacency
from .tensor import Tape


@dataclass
class HeadParams:
    weight: np.ndarray  # e x C (node head) or e x 1 (link head)
    bias: np.ndarray  # 1 x C or 1 x 1

    def __post_init__(self):
        self.weight = tensor.as_matrix(self.weight)
        self.bias = tensor.as_matrix(self.bias, rows=1, cols=self.weight.shape[1])


@dataclass
class EvalReport:
    task: str  # "node" | "link"
    metric: str  # "accuracy" | "auroc"
    value: float
    n_eval: int
    seed: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} outside [0, 1]")

    def to_json(self) -> str:
        payload = {
            "task": self.task,
            "metric": self.metric,
            "value": self.value,
            "n_eval": self.n_eval,
            "seed": self.seed,
            "config": self.config,
        }
        return json.dumps(payload, sort_keys=True)


def sample_few_shot(
    labels: np.ndarray, n_per_class: int, seed: int, num_classes: int | None = None
) -> np.ndarray:
    """Up to n_per_class labeled node indices per class, without replacement.

    Classes smaller than n_per_class contribute everything they have; a class
    with no labeled node at all is an error.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    labels = np.asarray(labels, dtype=np.int64)
    classes = range(num_classes) if num_classes is not None else np.unique(labels[labels >= 0])
    rng = np.random.default_rng(seed)
    picked = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            raise ValueError(f"class {c} has no labeled nodes")
        take = min(n_per_class, len(members))
        picked.append(np.sort(rng.choice(members, size=take, replace=False)))
    return np.concatenate(picked)


def _init_head(e: int, c: int, seed: int) -> HeadParams:
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (e + c))
    return HeadParams(rng.uniform(-limit, limit, size=(e, c)), np.zeros((1, c)))


def _train_linear(features, loss_kind, targets, epochs, lr, seed):
    """Full-batch gradient descent of a linear head on fixed features."""
    head = _init_head(features.shape[1], targets.shape[1], seed)
    w, b = head.weight, head.bias
    for _ in range(epochs):
        t = Tape()
        wv, bv = t.var(w), t.var(b)
        logits = t.add(t.matmul(t.var(features), wv), bv)
        if loss_kind == "softmax":
            losses = t.softmax_cross_entropy(logits, targets)
        else:
            losses = t.sigmoid_bce(logits, targets)
        loss = t.mean_all(losses)
        t.backward(loss)
        w = w - lr * wv.grad
        b = b - lr * bv.grad
    return HeadParams(w, b)


def finetune_node_head(
    backbone: EncoderParams,
    g: Graph,
    train_idx: np.ndarray,
    epochs: int = 200,
    lr: float = 0.5,
    seed: int = 0,
) -> HeadParams:
    """Train a linear classifier on frozen-backbone embeddings of train_idx."""
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if g.labels is None or np.any(g.labels[train_idx] < 0):
        raise ValueError("train_idx must be labeled")
    num_classes = g.num_classes if g.num_classes is not None else int(g.labels.max()) + 1
    z = encode(backbone, normalize_adjacency(g), g.features)
    targets = np.zeros((len(train_idx), num_classes))
    targets[np.arange(len(train_idx)), g.labels[train_idx]] = 1.0
    return _train_linear(z[train_idx], "softmax", targets, epochs, lr, seed)


def evaluate_node(
    backbone: EncoderParams, head: HeadParams, g: Graph, test_idx: np.ndarray, seed: int = 0
) -> EvalReport:
    """Accuracy of argmax predictions on test_idx (logit ties pick class 0 first)."""
    test_idx = np.asarray(test_idx, dtype=np.int64)
    if len(test_idx) == 0:
        raise ValueError("empty test set")
    if g.labels is None or np.any(g.labels[test_idx] < 0):
        raise ValueError("test_idx must be labeled")
    z = encode(backbone, normalize_adjacency(g), g.features)
    logits = z[test_idx] @ head.weight + head.bias
    pred = np.argmax(logits, axis=1)
    acc = float(np.mean(pred == g.labels[test_idx]))
    return EvalReport("node", "accuracy", acc, len(test_idx), seed)


def _train_graph(g: Graph, edges: np.ndarray) -> Graph:
    return Graph(g.num_nodes, edges, g.features, labels=g.labels, num_classes=g.num_classes)


def _pair_features(z: np.ndarray, pos: np.ndarray, neg: np.ndarray):
    pairs = np.vstack([pos, neg])
    feats = z[pairs[:, 0]] * z[pairs[:, 1]]
    labels = np.zeros((len(pairs), 1))
    labels[: len(pos), 0] = 1.0
    return feats, labels


def finetune_link_head(
    backbone: EncoderParams,
    g: Graph,
    split: EdgeSplit,
    epochs: int = 200,
    lr: float = 0.5,
    seed: int = 0,
) -> HeadParams:
    """Logistic head on Hadamard pair features; message passing on train edges."""
    z = encode(backbone, normalize_adjacency(_train_graph(g, split.train_edges)), g.features)
    feats, labels = _pair_features(z, split.train_edges, split.train_neg)
    return _train_linear(feats, "sigmoid", labels, epochs, lr, seed)


def evaluate_link(
    backbone: EncoderParams, head: HeadParams, g: Graph, split: EdgeSplit, seed: int = 0
) -> EvalReport:
    """AUROC of test edges vs test negatives under the trained link head."""
    z = encode(backbone, normalize_adjacency(_train_graph(g, split.train_edges)), g.features)
    feats, labels = _pair_features(z, split.test_edges, split.test_neg)
    scores = (feats @ head.weight + head.bias).ravel()
    value = auroc(scores, labels.ravel().astype(np.int64))
    return EvalReport("link", "auroc", value, len(scores), seed)


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outscores a random negative (ties count 1/2).

    Tie-aware rank-sum form: (sum of positive ranks - P(P+1)/2) / (P * N),
    with mid-ranks on ties. Identical, pair for pair, to brute enumeration.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    pos = int(np.sum(labels == 1))
    neg = int(np.sum(labels == 0))
    if pos + neg != len(labels):
        raise ValueError("labels must be 0 or 1")
    if pos == 0 or neg == 0:
        raise ValueError("need at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * ((i + 1) + (j + 1))  # mid-rank, exact in halves
        i = j + 1
    r_pos = float(np.sum(ranks[labels == 1]))
    return (r_pos - pos * (pos + 1) / 2.0) / (pos * neg)


def train_supervised_encoder(
    adj,
    features: np.ndarray,
    labels: np.ndarray,
    train_idx: np.ndarray,
    num_classes: int,
    enc_cfg: EncoderConfig,
    epochs: int = 200,
    lr: float = 0.2,
    seed: int = 0,
) -> EncoderParams:
    """Cross-entropy training of encoder + linear head; returns the encoder.

    The supervised comparator: both GCN layers and a classification head are
    optimized jointly on the labeled nodes, then the head is discarded (all
    evaluation paths fit fresh heads on frozen embeddings).
    """
    train_idx = np.asarray(train_idx, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    params = init_encoder(features.shape[1], EncoderConfig(enc_cfg.hidden_dim, enc_cfg.embed_dim, int(rng.integers(2**63))))
    head = _init_head(enc_cfg.embed_dim, num_classes, int(rng.integers(2**63)))
    w1, w2, hw, hb = params.w1, params.w2, head.weight, head.bias
    targets = np.zeros((len(train_idx), num_classes))
    targets[np.arange(len(train_idx)), labels[train_idx]] = 1.0
    selector = np.zeros((len(train_idx), features.shape[0]))
    selector[np.arange(len(train_idx)), train_idx] = 1.0
    for _ in range(epochs):
        t = Tape()
        w1v, w2v, hwv, hbv = t.var(w1), t.var(w2), t.var(hw), t.var(hb)
        z = encode_on_tape(t, w1v, w2v, adj, t.var(features))
        z_train = t.matmul(t.var(selector), z)
        logits = t.add(t.matmul(z_train, hwv), hbv)
        loss = t.mean_all(t.softmax_cross_entropy(logits, targets))
        t.backward(loss)
        w1 = w1 - lr * w1v.grad
        w2 = w2 - lr * w2v.grad
        hw = hw - lr * hwv.grad
        hb = hb - lr * hbv.grad
    return EncoderParams(w1, w2)


def save_head(head: HeadParams, directory: str | Path, stem: str = "head") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / f"{stem}.bin", "wb") as fh:
        tensor._write_matrix_bin(head.weight, fh)
        tensor._write_matrix_bin(head.bias, fh)


def load_head(directory: str | Path, stem: str = "head") -> HeadParams:
    directory = Path(directory)
    with open(directory / f"{stem}.bin", "rb") as fh:
        weight = tensor._read_matrix_bin(fh, f"{stem}.bin[weight]")
        bias = tensor._read_matrix_bin(fh, f"{stem}.bin[bias]")
    return HeadParams(weight, bias)
