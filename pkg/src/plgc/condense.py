"""Condensed-graph synthesis, backbone reconstruction, and the supervised baseline.

A condensed graph is K synthetic feature rows with an implicit identity
adjacency; row k is tied one-to-one to prototype k. Condensation freezes the
pseudo-label encoder and prototypes and descends only on the synthetic
features until their embeddings sit on the prototypes (sum of squared
distances). The backbone is a fresh encoder trained the same way from the
condensed sets alone. The supervised comparator condenses per-class
embedding means instead of prototypes, inheriting whatever damage label
noise did to those means.

All three solvers use plain gradient descent with per-step halving
backtracking, so recorded losses are monotone non-increasing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor
from .encoder import EncoderConfig, EncoderParams, encode, encode_on_tape, identity_adjacency, init_encoder
from .graph import Graph, normalize_adjacency
from .pseudo import Assignment, PrototypeBank
from .tensor import ContractViolation, Tape


class DivergenceError(FloatingPointError):
    """Optimization produced non-finite values even at tiny step sizes."""


@dataclass
class CondensedGraph:
    features: np.ndarray  # K x d
    bank: PrototypeBank  # the paired prototypes, row k <-> feature row k
    source_id: int = 0
    final_loss: float | None = None
    loss_history: list[float] | None = None  # per-step losses, not persisted

    def __post_init__(self):
        self.features = tensor.as_matrix(self.features)
        if self.features.shape[0] != self.bank.k:
            raise ValueError("condensed rows must match prototype count")

    @property
    def k(self) -> int:
        return self.bank.k


@dataclass
class LabeledCondensedGraph:
    """Output of the supervised class-mean baseline: labeled synthetic rows."""

    features: np.ndarray  # (C * per_class) x d
    labels: np.ndarray  # class id per synthetic row
    class_targets: np.ndarray | None = None  # matched per-class embedding means
    final_loss: float | None = None


def _descend(xs, loss_and_grad, steps, lr):
    """Backtracking gradient descent over a list of matrices.

    Halves the step for one iteration whenever it would increase the loss
    (resetting to lr the next iteration); a step that still fails at the
    minimal size leaves the iterate unchanged. Non-finite trial points count
    as increases, so divergence only surfaces when no finite step exists.
    """
    loss, grads = loss_and_grad(xs)
    history = [loss]
    for _ in range(steps):
        step = lr
        while True:
            trial = [x - step * g for x, g in zip(xs, grads)]
            try:
                trial_loss, trial_grads = loss_and_grad(trial)
            except ContractViolation:
                trial_loss = np.inf
                trial_grads = None
            if trial_loss <= loss:
                xs, loss, grads = trial, trial_loss, trial_grads
                break
            if step < 1e-15:
                if not np.isfinite(trial_loss):
                    raise DivergenceError(
                        "loss is non-finite even at vanishing step size; lower lr"
                    )
                break  # flat/noisy bottom: keep the current iterate
            step /= 2.0
        history.append(loss)
    return xs, history


def init_condensed(g: Graph, q: Assignment, k: int) -> np.ndarray:
    """Per-prototype mean of the original features of its assigned nodes."""
    if not q.hard:
        raise ValueError("initialization needs a hard assignment")
    if q.matrix.shape != (g.num_nodes, k):
        raise ValueError(f"assignment shape {q.matrix.shape} != ({g.num_nodes}, {k})")
    rows = np.empty((k, g.feature_dim))
    for proto in range(k):
        members = np.flatnonzero(q.matrix[:, proto] == 1.0)
        if len(members) == 0:
            raise ValueError(f"prototype {proto} has no assigned nodes")
        rows[proto] = g.features[members].mean(axis=0)
    return rows


def condense(
    init: np.ndarray,
    encoder: EncoderParams,
    bank: PrototypeBank,
    steps: int = 300,
    lr: float = 0.1,
    source_id: int = 0,
) -> CondensedGraph:
    """Descend on synthetic features so their embeddings match the prototypes.

    Encoder and bank are frozen; the objective is sum_k ||y_k - z_k||^2 with
    z = encode(theta', I, X').
    """
    init = tensor.as_matrix(init, rows=bank.k)
    if encoder.embed_dim != bank.embed_dim:
        raise ValueError("encoder embedding width must match prototype width")
    adj = identity_adjacency(bank.k)

    def loss_and_grad(xs):
        t = Tape()
        xv = t.var(xs[0])
        z = encode_on_tape(t, t.var(encoder.w1), t.var(encoder.w2), adj, xv)
        loss = t.sse(z, t.var(bank.protos))
        t.backward(loss)
        return float(loss.value[0, 0]), [xv.grad]

    (features,), history = _descend([init], loss_and_grad, steps, lr)
    return CondensedGraph(
        features, bank, source_id=source_id, final_loss=history[-1], loss_history=history
    )


def reconstruct_backbone(
    sets: list[CondensedGraph],
    enc_cfg: EncoderConfig,
    epochs: int = 300,
    lr: float = 0.1,
    seed: int = 0,
) -> EncoderParams:
    """Train a fresh encoder to map every condensed set onto its prototypes.

    The objective sums the per-source squared distances; the step size is
    lr / num_sources so that duplicating a source leaves the iterate
    sequence unchanged.
    """
    if not sets:
        raise ValueError("need at least one condensed set")
    d = sets[0].features.shape[1]
    e = sets[0].bank.embed_dim
    for cg in sets:
        if cg.features.shape[1] != d or cg.bank.embed_dim != e:
            raise ValueError("condensed sets disagree on feature or embedding dims")
    if enc_cfg.embed_dim != e:
        raise ValueError(f"encoder embed_dim {enc_cfg.embed_dim} != prototype width {e}")
    params = init_encoder(d, EncoderConfig(enc_cfg.hidden_dim, enc_cfg.embed_dim, seed))
    adjs = [identity_adjacency(cg.k) for cg in sets]

    def loss_and_grad(xs):
        t = Tape()
        w1, w2 = t.var(xs[0]), t.var(xs[1])
        total = None
        for cg, adj in zip(sets, adjs):
            z = encode_on_tape(t, w1, w2, adj, t.var(cg.features))
            term = t.sse(z, t.var(cg.bank.protos))
            total = term if total is None else t.add(total, term)
        t.backward(total)
        return float(total.value[0, 0]), [w1.grad, w2.grad]

    (w1, w2), _ = _descend([params.w1, params.w2], loss_and_grad, epochs, lr / len(sets))
    return EncoderParams(w1, w2)


def backbone_objective(params: EncoderParams, sets: list[CondensedGraph]) -> float:
    """Summed squared prototype distance of the condensed sets under params."""
    total = 0.0
    for cg in sets:
        z = encode(params, identity_adjacency(cg.k), cg.features)
        total += float(np.sum((z - cg.bank.protos) ** 2))
    return total


def supervised_baseline_condense(
    g: Graph,
    labels: np.ndarray,
    encoder: EncoderParams,
    per_class: int = 10,
    steps: int = 300,
    lr: float = 0.1,
    seed: int = 0,
) -> LabeledCondensedGraph:
    """Class-mean-matching comparator: condense on (possibly noisy) labels.

    Synthesizes per_class feature rows per class and optimizes them so each
    class's mean embedding matches the mean embedding of the nodes carrying
    that (given) label in the original graph. Rows of one class start at the
    features of per_class random nodes holding that label, so the synthetic
    set inherits the label's (possibly corrupted) spread; only the class
    mean is constrained by the objective.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (g.num_nodes,):
        raise ValueError("labels length must equal num_nodes")
    num_classes = g.num_classes if g.num_classes is not None else int(labels.max()) + 1
    rng = np.random.default_rng(seed)
    z_full = encode(encoder, normalize_adjacency(g), g.features)
    targets = np.empty((num_classes, encoder.embed_dim))
    init = np.empty((num_classes * per_class, g.feature_dim))
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            raise ValueError(f"class {c} has no labeled nodes")
        targets[c] = z_full[members].mean(axis=0)
        picked = rng.choice(members, size=per_class, replace=len(members) < per_class)
        init[c * per_class : (c + 1) * per_class] = g.features[picked]

    # class-mean selector: row c averages that class's synthetic rows
    selector = np.zeros((num_classes, num_classes * per_class))
    for c in range(num_classes):
        selector[c, c * per_class : (c + 1) * per_class] = 1.0 / per_class
    adj = identity_adjacency(num_classes * per_class)
    syn_labels = np.repeat(np.arange(num_classes), per_class)

    def loss_and_grad(xs):
        t = Tape()
        xv = t.var(xs[0])
        z = encode_on_tape(t, t.var(encoder.w1), t.var(encoder.w2), adj, xv)
        means = t.matmul(t.var(selector), z)
        loss = t.sse(means, t.var(targets))
        t.backward(loss)
        return float(loss.value[0, 0]), [xv.grad]

    (features,), history = _descend([init], loss_and_grad, steps, lr)
    return LabeledCondensedGraph(features, syn_labels, class_targets=targets, final_loss=history[-1])


# -- persistence --------------------------------------------------------------


def save_condensed(cg: CondensedGraph, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensor.save_matrix_tsv(cg.features, directory / "features.tsv")
    tensor.save_matrix_tsv(cg.bank.protos, directory / "prototypes.tsv")
    meta = {
        "K": cg.k,
        "d": cg.features.shape[1],
        "embed_dim": cg.bank.embed_dim,
        "source_id": cg.source_id,
        "final_loss": cg.final_loss,
    }
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_condensed(directory: str | Path) -> CondensedGraph:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    features = tensor.load_matrix_tsv(directory / "features.tsv")
    protos = tensor.load_matrix_tsv(directory / "prototypes.tsv")
    cg = CondensedGraph(
        features,
        PrototypeBank(protos),
        source_id=int(meta["source_id"]),
        final_loss=meta["final_loss"],
    )
    if cg.k != int(meta["K"]) or features.shape[1] != int(meta["d"]):
        raise ValueError(f"{directory}: meta.json disagrees with stored matrices")
    return cg
