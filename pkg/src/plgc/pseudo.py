"""Pseudo-label learning: balanced Sinkhorn assignment + swapped view prediction.

The learner alternates two moves. (1) Given embeddings of an augmented view,
a soft assignment plan over K prototypes is computed by Sinkhorn-Knopp
scaling of exp(scores/epsilon) to uniform marginals (1/B per node row, 1/K
per prototype column) and then rounded row-wise to one-hot. The balanced
marginals rule out the collapse where every node picks the same prototype.
(2) Each view's embeddings are trained to predict the *other* view's rounded
assignment through a softmax over prototype similarities; that cross-entropy
updates both the encoder and the prototype rows, which are re-projected to
unit norm after every step. Assignments act as fixed targets: no gradient
flows through them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor
from .encoder import EncoderConfig, EncoderParams, encode_on_tape, init_encoder, load_encoder, save_encoder
from .graph import Graph, augment, normalize_adjacency
from .tensor import Tape, Var


class SinkhornOverflowError(FloatingPointError):
    """exp(scores/epsilon) overflowed; rerun with a larger epsilon."""


class EmptyPrototypeError(RuntimeError):
    """A prototype ended with no assigned node and reassignment was impossible."""


@dataclass
class PrototypeBank:
    """K unit-norm pseudo-label rows in embedding space."""

    protos: np.ndarray  # K x e

    def __post_init__(self):
        self.protos = tensor.as_matrix(self.protos)

    @property
    def k(self) -> int:
        return self.protos.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.protos.shape[1]


def init_bank(k: int, embed_dim: int, seed: int) -> PrototypeBank:
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((k, embed_dim))
    return PrototypeBank(tensor.row_l2_normalize(protos))


def normalize_bank(bank: PrototypeBank) -> PrototypeBank:
    """Project every prototype row back to the unit sphere."""
    return PrototypeBank(tensor.row_l2_normalize(bank.protos))


@dataclass
class SinkhornConfig:
    epsilon: float = 0.05
    iters: int = 100  # minimum sweep count
    batch_size: int | None = None  # None = full graph
    tol: float = 1e-9  # marginal tolerance that ends the sweep loop
    max_sweeps: int = 500_000

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.tol <= 0 or self.max_sweeps < self.iters:
            raise ValueError("need tol > 0 and max_sweeps >= iters")


@dataclass
class Assignment:
    """B x K transport plan (soft) or row-wise one-hot matrix (hard)."""

    matrix: np.ndarray
    hard: bool

    def __post_init__(self):
        self.matrix = tensor.as_matrix(self.matrix)
        if self.hard:
            ok = np.all(np.isin(self.matrix, (0.0, 1.0))) and np.all(self.matrix.sum(axis=1) == 1.0)
            if not ok:
                raise ValueError("hard assignment rows must be exactly one-hot")

    @property
    def labels(self) -> np.ndarray:
        """Per-row prototype index (argmax; for hard mode, the single 1)."""
        return np.argmax(self.matrix, axis=1)


def marginal_errors(a: Assignment) -> tuple[float, float]:
    """(max row-sum error vs 1/B, max col-sum error vs 1/K) of a soft plan."""
    b, k = a.matrix.shape
    row = float(np.max(np.abs(a.matrix.sum(axis=1) - 1.0 / b)))
    col = float(np.max(np.abs(a.matrix.sum(axis=0) - 1.0 / k)))
    return row, col


def sinkhorn_assign(z: np.ndarray, bank: PrototypeBank, cfg: SinkhornConfig) -> Assignment:
    """Balanced soft assignment of B embedding rows to K prototypes.

    Maximizes the prototype-alignment trace plus epsilon * entropy subject to
    uniform marginals (1/B rows, 1/K columns), via alternating row/column
    scalings of exp(Z Y^T / epsilon). Runs at least cfg.iters sweeps and keeps
    sweeping until the row-marginal error drops below cfg.tol; the final
    column scaling makes the column marginals exact up to rounding.
    """
    z = tensor.as_matrix(z)
    b, k = z.shape[0], bank.k
    if z.shape[1] != bank.embed_dim:
        raise tensor.ContractViolation(
            f"embedding dim {z.shape[1]} != prototype dim {bank.embed_dim}"
        )
    if b < k:
        warnings.warn(f"batch size {b} below prototype count {k}; marginals force splits")
    scores = z @ bank.protos.T
    ratio = float(np.max(np.abs(scores))) / cfg.epsilon
    if ratio > 700.0:
        raise SinkhornOverflowError(
            f"|scores|/epsilon = {ratio:.1f} would overflow exp; increase epsilon"
        )
    kernel = np.exp(scores / cfg.epsilon)
    r = 1.0 / b
    c = 1.0 / k
    v = np.ones(k)
    kv = kernel @ v
    sweeps = 0
    checkpoint = np.inf  # row error 128 sweeps ago; detects fp-floor stalls
    while True:
        u = r / kv
        v = c / (kernel.T @ u)
        sweeps += 1
        kv = kernel @ v  # feeds both the row-error check and the next sweep
        row_err = float(np.max(np.abs(u * kv - r)))
        if sweeps >= cfg.iters and row_err <= cfg.tol:
            break
        stalled = False
        if sweeps % 128 == 0:
            # progress below 1% per 128 sweeps means the iteration is at its
            # floating-point floor (or crawling); further sweeps buy nothing
            stalled = sweeps >= cfg.iters and row_err > 0.99 * checkpoint
            checkpoint = row_err
        if stalled or sweeps >= cfg.max_sweeps:
            # near-tied plans (common in the first training epochs) stall at
            # harmless error levels; only a grossly unbalanced plan is worth
            # a warning
            if row_err > 1e-3:
                warnings.warn(
                    f"sinkhorn stopped at {sweeps} sweeps with row error {row_err:.2e}"
                )
            break
    plan = u[:, None] * kernel * v[None, :]
    return Assignment(plan, hard=False)


def round_assignment(q: Assignment) -> Assignment:
    """Row-wise argmax one-hot; ties resolve to the lowest prototype index."""
    idx = np.argmax(q.matrix, axis=1)
    out = np.zeros_like(q.matrix)
    out[np.arange(len(idx)), idx] = 1.0
    return Assignment(out, hard=True)


def swapped_loss_on_tape(tape: Tape, z: Var, q: Assignment, bank: Var, tau: float) -> Var:
    """Mean cross-entropy of softmax(Z Y^T / tau) rows against q rows (1x1 Var)."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if q.matrix.shape[0] != z.value.shape[0]:
        raise tensor.ContractViolation("assignment row count must match embeddings")
    logits = tape.scale(tape.matmul(z, tape.transpose(bank)), 1.0 / tau)
    return tape.mean_all(tape.softmax_cross_entropy(logits, q.matrix))


def swapped_loss(
    z_view_a: np.ndarray, q_view_b: Assignment, bank: PrototypeBank, tau: float = 0.1
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss plus gradients on the embeddings and on the (pre-projection) bank."""
    t = Tape()
    zv = t.var(z_view_a)
    bv = t.var(bank.protos)
    loss = swapped_loss_on_tape(t, zv, q_view_b, bv, tau)
    t.backward(loss)
    return float(loss.value[0, 0]), zv.grad, bv.grad


@dataclass
class PseudoLabelResult:
    encoder: EncoderParams
    bank: PrototypeBank
    q_full: Assignment  # hard, N x K, on the unaugmented graph
    epoch_losses: list[float] = field(default_factory=list)


def _fill_empty_prototypes(hard: np.ndarray, soft: np.ndarray) -> np.ndarray:
    """Give every empty prototype the node holding the most soft mass for it.

    A node may only move if its current prototype keeps at least one member;
    if no such donor exists the condensed graph cannot have K nodes.
    """
    hard = hard.copy()
    counts = hard.sum(axis=0)
    for k in np.flatnonzero(counts == 0):
        for node in np.argsort(-soft[:, k], kind="stable"):
            current = int(np.argmax(hard[node]))
            if counts[current] >= 2:
                hard[node, current] = 0.0
                hard[node, k] = 1.0
                counts[current] -= 1
                counts[k] += 1
                break
        else:
            raise EmptyPrototypeError(f"prototype {k} cannot be assigned any node")
    return hard


def full_assignment(
    params: EncoderParams, bank: PrototypeBank, g: Graph, cfg: SinkhornConfig
) -> tuple[Assignment, Assignment]:
    """(hard, soft) balanced assignment of the whole unaugmented graph (B=N)."""
    from .encoder import encode

    z = encode(params, normalize_adjacency(g), g.features)
    soft = sinkhorn_assign(z, bank, cfg)
    hard = round_assignment(soft)
    filled = _fill_empty_prototypes(hard.matrix, soft.matrix)
    return Assignment(filled, hard=True), soft


def train_pseudo_labels(
    g: Graph,
    k: int,
    *,
    epochs: int = 80,
    lr_encoder: float = 0.01,
    lr_bank: float = 0.05,
    sinkhorn: SinkhornConfig | None = None,
    edge_drop: float = 0.2,
    feature_mask: float = 0.2,
    tau: float = 0.1,
    hidden_dim: int = 128,
    embed_dim: int = 64,
    refine_steps: int = 5,
    seed: int = 0,
) -> PseudoLabelResult:
    """Learn encoder, prototypes and the full-graph hard assignment.

    Per epoch: draw two augmented views, encode both with the shared encoder,
    Sinkhorn-assign and round each view, then take one gradient step on the
    summed swapped losses l(Z_i, Q_j) + l(Z_j, Q_i) and re-normalize the
    bank. After the last epoch, refine_steps rounds of plain alternation on
    the unaugmented graph (balanced assignment, then snap each prototype to
    its normalized assignment-weighted embedding mean) push the bank to the
    stationarity fixed point before the final B = N assignment is taken.
    Deterministic given the seed.
    """
    if k > g.num_nodes:
        raise ValueError(f"cannot learn {k} prototypes from {g.num_nodes} nodes")
    scfg = sinkhorn or SinkhornConfig()
    rng = np.random.default_rng(seed)
    enc_seed = int(rng.integers(2**63))
    bank_seed = int(rng.integers(2**63))
    params = init_encoder(g.feature_dim, EncoderConfig(hidden_dim, embed_dim, enc_seed))
    bank = init_bank(k, embed_dim, bank_seed)

    batch = scfg.batch_size
    if batch is not None and batch % k != 0:
        raise ValueError("batch_size must be a multiple of the prototype count")

    losses: list[float] = []
    for _ in range(epochs):
        seed_i = int(rng.integers(2**63))
        seed_j = int(rng.integers(2**63))
        view_i = augment(g, edge_drop, feature_mask, seed_i)
        view_j = augment(g, edge_drop, feature_mask, seed_j)
        adj_i, adj_j = normalize_adjacency(view_i), normalize_adjacency(view_j)

        tape = Tape()
        w1, w2 = tape.var(params.w1), tape.var(params.w2)
        bank_var = tape.var(bank.protos)
        z_i = encode_on_tape(tape, w1, w2, adj_i, tape.var(view_i.features))
        z_j = encode_on_tape(tape, w1, w2, adj_j, tape.var(view_j.features))

        if batch is None or batch >= g.num_nodes:
            zi_val, zj_val, idx = z_i, z_j, None
        else:
            idx = rng.choice(g.num_nodes, size=batch, replace=False)
            sel = np.zeros((batch, g.num_nodes))
            sel[np.arange(batch), idx] = 1.0
            sel_var = tape.var(sel)
            zi_val = tape.matmul(sel_var, z_i)
            zj_val = tape.matmul(sel_var, z_j)

        q_i = round_assignment(sinkhorn_assign(zi_val.value, bank, scfg))
        q_j = round_assignment(sinkhorn_assign(zj_val.value, bank, scfg))

        loss = tape.add(
            swapped_loss_on_tape(tape, zi_val, q_j, bank_var, tau),
            swapped_loss_on_tape(tape, zj_val, q_i, bank_var, tau),
        )
        tape.backward(loss)
        losses.append(float(loss.value[0, 0]))

        params = EncoderParams(params.w1 - lr_encoder * w1.grad, params.w2 - lr_encoder * w2.grad)
        bank = normalize_bank(PrototypeBank(bank.protos - lr_bank * bank_var.grad))

    bank = refine_bank(params, bank, g, scfg, refine_steps)
    q_hard, _ = full_assignment(params, bank, g, scfg)
    return PseudoLabelResult(params, bank, q_hard, losses)


def refine_bank(
    params: EncoderParams,
    bank: PrototypeBank,
    g: Graph,
    cfg: SinkhornConfig,
    steps: int,
) -> PrototypeBank:
    """Alternate balanced assignment and the stationarity update on the full graph.

    Each round reassigns all nodes and snaps every prototype to the unit-norm
    assignment-weighted mean of its members (the stationary point of the
    simplified alignment objective). Prototypes with a vanishing weighted sum
    keep their previous value.
    """
    from .encoder import encode

    if steps == 0:
        return bank
    z = encode(params, normalize_adjacency(g), g.features)
    protos = bank.protos.copy()
    for _ in range(steps):
        hard = round_assignment(sinkhorn_assign(z, PrototypeBank(protos), cfg))
        sums = hard.matrix.T @ z
        norms = np.linalg.norm(sums, axis=1)
        live = norms > 1e-12
        protos[live] = sums[live] / norms[live, None]
    return PrototypeBank(protos)


# -- persistence --------------------------------------------------------------


def save_pseudo_result(res: PseudoLabelResult, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensor.save_matrix_tsv(res.bank.protos, directory / "prototypes.tsv")
    with open(directory / "assignments.tsv", "w") as fh:
        for label in res.q_full.labels:
            fh.write(f"{label}\n")
    save_encoder(res.encoder, directory)


def load_pseudo_result(directory: str | Path, num_nodes: int) -> PseudoLabelResult:
    directory = Path(directory)
    protos = tensor.load_matrix_tsv(directory / "prototypes.tsv")
    bank = PrototypeBank(protos)
    labels = np.loadtxt(directory / "assignments.tsv", dtype=np.int64, ndmin=1)
    if labels.shape != (num_nodes,):
        raise ValueError(f"assignments.tsv holds {labels.shape[0]} rows, expected {num_nodes}")
    hard = np.zeros((num_nodes, bank.k))
    hard[np.arange(num_nodes), labels] = 1.0
    return PseudoLabelResult(load_encoder(directory), bank, Assignment(hard, hard=True))
