"""Dense float64 matrix primitives with reverse-mode gradients.

Matrices are plain 2-D C-contiguous ``numpy.float64`` arrays. Every training
loop in this package builds its loss on a :class:`Tape`, which records the
primitive ops of one forward pass and replays them in reverse to accumulate
gradients. The primitive set is deliberately small: matmul, sparse@dense,
relu, add, scale, transpose, row-sum, total-sum, MSE, row L2 normalization,
row-wise softmax cross-entropy and row-wise logistic loss. Each primitive has
a hand-written backward rule checked against central finite differences.

All reductions use numpy's fixed summation order, so repeating a forward or
backward pass with identical inputs is bit-reproducible on a given machine.
"""

from __future__ import annotations

import struct
from collections.abc import Callable
from pathlib import Path

import numpy as np
import scipy.sparse as sp


# matrices are plain 2-D C-contiguous float64 arrays throughout the package
Matrix = np.ndarray


class ContractViolation(ValueError):
    """An operation was called with inputs that break its preconditions."""


class DegenerateRowError(ValueError):
    """A row that must be normalized has (near-)zero norm."""


class TapeError(RuntimeError):
    """Tape misuse: backward without forward, or backward called twice."""


_NORM_FLOOR = 1e-12


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate and return a 2-D float64 C-order matrix.

    Raises ContractViolation on wrong rank, non-finite entries, or a shape
    mismatch with the expected (rows, cols).
    """
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ContractViolation(f"expected a 2-D matrix, got ndim={m.ndim}")
    if not np.isfinite(m).all():
        raise ContractViolation("matrix contains NaN or Inf entries")
    if rows is not None and m.shape[0] != rows:
        raise ContractViolation(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ContractViolation(f"expected {cols} cols, got {m.shape[1]}")
    return m


def _check_finite(m: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(m).all():
        raise ContractViolation(f"{op} produced non-finite entries")
    return m


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def row_norms(m: np.ndarray) -> np.ndarray:
    """Column vector of row L2 norms."""
    return np.sqrt(np.sum(m * m, axis=1, keepdims=True))


def row_l2_normalize(m: np.ndarray) -> np.ndarray:
    """Rescale each row to unit L2 norm; near-zero rows are an error."""
    norms = row_norms(m)
    if np.any(norms <= _NORM_FLOOR):
        bad = int(np.argmax(norms <= _NORM_FLOOR))
        raise DegenerateRowError(f"row {bad} has norm {norms[bad, 0]:.3e} <= {_NORM_FLOOR}")
    return m / norms


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, stabilized by max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _validate_target_rows(targets: np.ndarray) -> None:
    if np.any(targets < 0.0):
        raise ContractViolation("cross-entropy target has negative entries")
    sums = targets.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        bad = int(np.argmax(np.abs(sums - 1.0) > 1e-9))
        raise ContractViolation(f"cross-entropy target row {bad} sums to {sums[bad]!r}, not 1")


class Var:
    """A matrix node on a tape. ``grad`` is filled by Tape.backward."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def _bump(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g


class Tape:
    """Single-use, single-threaded record of one forward pass.

    Primitives append (output, backward_fn) records in call order; backward
    seeds the final scalar with 1 and visits the records exactly once in
    reverse. A second backward without rebuilding the tape raises TapeError.
    """

    def __init__(self):
        self._records: list[tuple[Var, Callable[[np.ndarray], None]]] = []
        self._spent = False

    def var(self, data) -> Var:
        """Register a leaf matrix (weights, features, prototypes...)."""
        return Var(as_matrix(data))

    def _emit(self, value: np.ndarray, backward: Callable[[np.ndarray], None], op: str) -> Var:
        out = Var(_check_finite(value, op))
        self._records.append((out, backward))
        return out

    # -- primitives ---------------------------------------------------------

    def matmul(self, a: Var, b: Var) -> Var:
        if a.value.shape[1] != b.value.shape[0]:
            raise ContractViolation(
                f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}"
            )
        av, bv = a.value, b.value

        def backward(g: np.ndarray) -> None:
            a._bump(g @ bv.T)
            b._bump(av.T @ g)

        return self._emit(av @ bv, backward, "matmul")

    def spmm(self, s: sp.spmatrix, b: Var) -> Var:
        """Sparse constant @ dense variable; gradient flows to the dense side."""
        s = sp.csr_matrix(s)
        if s.shape[1] != b.value.shape[0]:
            raise ContractViolation(f"spmm shape mismatch: {s.shape} @ {b.value.shape}")
        st = s.T.tocsr()

        def backward(g: np.ndarray) -> None:
            b._bump(np.asarray(st @ g))

        return self._emit(np.asarray(s @ b.value), backward, "spmm")

    def relu(self, a: Var) -> Var:
        mask = a.value > 0.0

        def backward(g: np.ndarray) -> None:
            a._bump(g * mask)

        return self._emit(np.maximum(a.value, 0.0), backward, "relu")

    def add(self, a: Var, b: Var) -> Var:
        """Elementwise add; b may also be a 1-row matrix broadcast over rows."""
        bshape = b.value.shape
        if bshape == a.value.shape:
            broadcast = False
        elif bshape == (1, a.value.shape[1]):
            broadcast = True
        else:
            raise ContractViolation(f"add shape mismatch: {a.value.shape} + {bshape}")

        def backward(g: np.ndarray) -> None:
            a._bump(g)
            b._bump(g.sum(axis=0, keepdims=True) if broadcast else g)

        return self._emit(a.value + b.value, backward, "add")

    def scale(self, a: Var, c: float) -> Var:
        c = float(c)

        def backward(g: np.ndarray) -> None:
            a._bump(g * c)

        return self._emit(a.value * c, backward, "scale")

    def transpose(self, a: Var) -> Var:
        def backward(g: np.ndarray) -> None:
            a._bump(g.T)

        return self._emit(np.ascontiguousarray(a.value.T), backward, "transpose")

    def row_sum(self, a: Var) -> Var:
        cols = a.value.shape[1]

        def backward(g: np.ndarray) -> None:
            a._bump(np.repeat(g, cols, axis=1))

        return self._emit(a.value.sum(axis=1, keepdims=True), backward, "row_sum")

    def sum_all(self, a: Var) -> Var:
        shape = a.value.shape

        def backward(g: np.ndarray) -> None:
            a._bump(np.full(shape, g[0, 0]))

        return self._emit(np.array([[a.value.sum()]]), backward, "sum_all")

    def mse(self, a: Var, b: Var) -> Var:
        """Mean squared error over all entries, as a 1x1 matrix."""
        if a.value.shape != b.value.shape:
            raise ContractViolation(f"mse shape mismatch: {a.value.shape} vs {b.value.shape}")
        diff = a.value - b.value
        n = diff.size

        def backward(g: np.ndarray) -> None:
            d = (2.0 * g[0, 0] / n) * diff
            a._bump(d)
            b._bump(-d)

        return self._emit(np.array([[np.mean(diff * diff)]]), backward, "mse")

    def sse(self, a: Var, b: Var) -> Var:
        """Sum of squared differences: mse scaled back up by the entry count."""
        return self.scale(self.mse(a, b), a.value.size)

    def row_l2_normalize(self, a: Var) -> Var:
        norms = row_norms(a.value)
        if np.any(norms <= _NORM_FLOOR):
            bad = int(np.argmax(norms <= _NORM_FLOOR))
            raise DegenerateRowError(f"row {bad} has norm {norms[bad, 0]:.3e} <= {_NORM_FLOOR}")
        y = a.value / norms

        def backward(g: np.ndarray) -> None:
            # d/dx (x/||x||) applied to upstream g: (g - (g.y) y) / ||x||
            inner = np.sum(g * y, axis=1, keepdims=True)
            a._bump((g - inner * y) / norms)

        return self._emit(y, backward, "row_l2_normalize")

    def softmax_cross_entropy(self, logits: Var, targets: np.ndarray) -> Var:
        """Per-row CE losses (Bx1) against constant probability rows.

        Loss per row is -sum_k target_k * log softmax(logits)_k; the gradient
        on the logits row is softmax(logits) - target. No gradient flows into
        the targets (they act as fixed assignments).
        """
        targets = as_matrix(targets, *logits.value.shape)
        _validate_target_rows(targets)
        logp = log_softmax(logits.value)
        probs = np.exp(logp)

        def backward(g: np.ndarray) -> None:
            logits._bump(g * (probs - targets))

        losses = -np.sum(targets * logp, axis=1, keepdims=True)
        return self._emit(losses, backward, "softmax_cross_entropy")

    def sigmoid_bce(self, logits: Var, targets: np.ndarray) -> Var:
        """Per-row logistic losses (Bx1) for binary 0/1 targets."""
        targets = as_matrix(targets, *logits.value.shape)
        if np.any((targets != 0.0) & (targets != 1.0)):
            raise ContractViolation("sigmoid_bce targets must be 0 or 1")
        z = logits.value
        # max(z,0) - z*y + log1p(exp(-|z|)) is the stable softplus form
        losses = np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))
        sig = 1.0 / (1.0 + np.exp(-z))

        def backward(g: np.ndarray) -> None:
            logits._bump(g * (sig - targets))

        return self._emit(losses, backward, "sigmoid_bce")

    def mean_all(self, a: Var) -> Var:
        return self.scale(self.sum_all(a), 1.0 / a.value.size)

    # -- reverse pass -------------------------------------------------------

    def backward(self, out: Var) -> None:
        """Seed d(out)/d(out)=1 and accumulate grads into every upstream Var."""
        if self._spent:
            raise TapeError("backward already ran on this tape; rebuild the forward pass")
        if out.value.shape != (1, 1):
            raise ContractViolation(f"backward needs a 1x1 scalar output, got {out.value.shape}")
        self._spent = True
        out.grad = np.ones((1, 1))
        for node, backward_fn in reversed(self._records):
            if node.grad is not None:
                backward_fn(node.grad)


def finite_difference_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max relative error between f's analytic gradient and central differences.

    ``f(x)`` must return ``(value, gradient)`` with gradient shaped like x.
    Relative error per entry is |g_an - g_fd| / max(1, |g_fd|).
    """
    if not 1e-7 <= h <= 1e-4:
        raise ContractViolation(f"finite-difference step {h} outside [1e-7, 1e-4]")
    x = as_matrix(x)
    _, grad = f(x)
    grad = as_matrix(grad, *x.shape)
    worst = 0.0
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g_fd = (f(xp)[0] - f(xm)[0]) / (2.0 * h)
        err = abs(grad[idx] - g_fd) / max(1.0, abs(g_fd))
        worst = max(worst, err)
    return worst


# -- persistence ------------------------------------------------------------

_BIN_HEADER = struct.Struct("<QQ")


def save_matrix_bin(m: np.ndarray, path: str | Path) -> None:
    """Write rows, cols as little-endian u64 then row-major little-endian f64."""
    m = as_matrix(m)
    with open(path, "wb") as fh:
        _write_matrix_bin(m, fh)


def _write_matrix_bin(m: np.ndarray, fh) -> None:
    fh.write(_BIN_HEADER.pack(m.shape[0], m.shape[1]))
    fh.write(m.astype("<f8", copy=False).tobytes(order="C"))


def load_matrix_bin(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return _read_matrix_bin(fh, str(path))


def _read_matrix_bin(fh, name: str) -> np.ndarray:
    header = fh.read(_BIN_HEADER.size)
    if len(header) != _BIN_HEADER.size:
        raise ContractViolation(f"{name}: truncated matrix header")
    rows, cols = _BIN_HEADER.unpack(header)
    payload = fh.read(8 * rows * cols)
    if len(payload) != 8 * rows * cols:
        raise ContractViolation(f"{name}: expected {rows}x{cols} f64 payload, file truncated")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)
    return as_matrix(data)


def save_matrix_tsv(m: np.ndarray, path: str | Path) -> None:
    """Whitespace-separated decimals at 17 significant digits (round-trip exact)."""
    m = as_matrix(m)
    with open(path, "w") as fh:
        for row in m:
            fh.write(" ".join(f"{v:.17g}" for v in row))
            fh.write("\n")


def load_matrix_tsv(path: str | Path) -> np.ndarray:
    try:
        data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ContractViolation(f"{path}: malformed matrix text: {exc}") from exc
    return as_matrix(data)
