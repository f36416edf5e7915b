"""Two-layer graph-convolutional encoder with unit-norm output rows.

The same architecture serves three roles: the pseudo-label learner's encoder,
the embedding model during condensation, and the reconstructed backbone.
Forward pass: Z = row_l2_normalize( A_hat · relu(A_hat · X · W1) · W2 ).
Embeddings therefore live on the unit sphere, matching the inner-product
geometry of the prototype losses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import tensor
from .tensor import Tape, Var


@dataclass
class EncoderConfig:
    hidden_dim: int = 128
    embed_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim < 1 or self.embed_dim < 1:
            raise ValueError("encoder dims must be >= 1")


@dataclass
class EncoderParams:
    w1: np.ndarray  # d x hidden
    w2: np.ndarray  # hidden x embed

    def __post_init__(self):
        self.w1 = tensor.as_matrix(self.w1)
        self.w2 = tensor.as_matrix(self.w2)
        if self.w1.shape[1] != self.w2.shape[0]:
            raise ValueError(f"layer shapes incompatible: {self.w1.shape} then {self.w2.shape}")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w2.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.w1.copy(), self.w2.copy())


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_encoder(d: int, cfg: EncoderConfig) -> EncoderParams:
    """Glorot-uniform weights, deterministic in cfg.seed."""
    if d < 1:
        raise ValueError("input dim must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    w1 = _glorot(rng, d, cfg.hidden_dim)
    w2 = _glorot(rng, cfg.hidden_dim, cfg.embed_dim)
    return EncoderParams(w1, w2)


def encode_on_tape(tape: Tape, w1: Var, w2: Var, adj: sp.spmatrix, x: Var) -> Var:
    """Differentiable forward pass; gradients flow to w1, w2 and x."""
    h = tape.relu(tape.spmm(adj, tape.matmul(x, w1)))
    return tape.row_l2_normalize(tape.spmm(adj, tape.matmul(h, w2)))


def encode(params: EncoderParams, adj: sp.spmatrix, x: np.ndarray) -> np.ndarray:
    """Plain forward pass returning the N x embed_dim unit-row embedding matrix.

    Uses the exact same op sequence as encode_on_tape, so taped and untaped
    paths produce bit-identical values.
    """
    tape = Tape()
    z = encode_on_tape(tape, tape.var(params.w1), tape.var(params.w2), adj, tape.var(x))
    return z.value


def identity_adjacency(k: int) -> sp.csr_matrix:
    """Propagation operator of an edgeless graph: self-loops only."""
    return sp.identity(k, format="csr")


def save_encoder(params: EncoderParams, directory: str | Path, stem: str = "params") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "in_dim": params.in_dim,
        "hidden_dim": params.w1.shape[1],
        "embed_dim": params.embed_dim,
    }
    with open(directory / f"{stem}.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(directory / f"{stem}.bin", "wb") as fh:
        tensor._write_matrix_bin(params.w1, fh)
        tensor._write_matrix_bin(params.w2, fh)


def load_encoder(directory: str | Path, stem: str = "params") -> EncoderParams:
    directory = Path(directory)
    meta = json.loads((directory / f"{stem}.json").read_text())
    with open(directory / f"{stem}.bin", "rb") as fh:
        w1 = tensor._read_matrix_bin(fh, f"{stem}.bin[w1]")
        w2 = tensor._read_matrix_bin(fh, f"{stem}.bin[w2]")
    params = EncoderParams(w1, w2)
    if [params.in_dim, params.w1.shape[1], params.embed_dim] != [
        meta["in_dim"], meta["hidden_dim"], meta["embed_dim"]
    ]:
        raise ValueError(f"{stem}.bin shapes disagree with {stem}.json")
    return params
