import numpy as np
import pytest

from plgc.tensor import (
    ContractViolation,
    DegenerateRowError,
    Tape,
    TapeError,
    as_matrix,
    finite_difference_check,
    load_matrix_bin,
    load_matrix_tsv,
    row_l2_normalize,
    save_matrix_bin,
    save_matrix_tsv,
)


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    t = Tape()
    out = t.matmul(t.var(np.eye(3)), t.var(m))
    assert np.array_equal(out.value, m)


def test_matmul_hand_case():
    t = Tape()
    a = t.var([[1.0, 2.0], [3.0, 4.0]])
    b = t.var([[0.0, 1.0], [1.0, 0.0]])
    out = t.matmul(a, b)
    assert np.array_equal(out.value, [[2.0, 1.0], [4.0, 3.0]])


def test_matmul_backward_contract():
    # L = sum(a @ b) with upstream all-ones: dL/da = 1 @ b.T, dL/db = a.T @ 1
    rng = np.random.default_rng(0)
    av = rng.normal(size=(3, 4))
    bv = rng.normal(size=(4, 2))
    t = Tape()
    a, b = t.var(av), t.var(bv)
    loss = t.sum_all(t.matmul(a, b))
    t.backward(loss)
    ones = np.ones((3, 2))
    assert np.allclose(a.grad, ones @ bv.T)
    assert np.allclose(b.grad, av.T @ ones)

    def f(x):
        tt = Tape()
        xv = tt.var(x)
        out = tt.sum_all(tt.matmul(xv, tt.var(bv)))
        tt.backward(out)
        return out.value[0, 0], xv.grad

    assert finite_difference_check(f, av) <= 1e-6


def test_matmul_dimension_mismatch():
    t = Tape()
    with pytest.raises(ContractViolation):
        t.matmul(t.var(np.ones((2, 3))), t.var(np.ones((2, 3))))


def test_row_l2_normalize_values():
    out = row_l2_normalize(np.array([[3.0, 4.0]]))
    assert np.allclose(out, [[0.6, 0.8]], atol=1e-15)
    unit = np.array([[1.0, 0.0], [0.0, -1.0]])
    assert np.array_equal(row_l2_normalize(unit), unit)


def test_row_l2_normalize_degenerate_row():
    with pytest.raises(DegenerateRowError):
        row_l2_normalize(np.array([[1.0, 1.0], [0.0, 0.0]]))


def test_row_l2_normalize_gradient():
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 3))  # fixed weights make the loss non-symmetric

    def f(x):
        t = Tape()
        xv = t.var(x)
        out = t.sum_all(t.mse(t.row_l2_normalize(xv), t.var(w)))
        t.backward(out)
        return out.value[0, 0], xv.grad

    assert finite_difference_check(f, x0) <= 1e-5


def test_softmax_cross_entropy_uniform_case():
    t = Tape()
    losses = t.softmax_cross_entropy(t.var([[0.3, 0.3]]), np.array([[1.0, 0.0]]))
    assert losses.value[0, 0] == pytest.approx(np.log(2.0), abs=1e-12)


def test_softmax_cross_entropy_closed_form():
    t = Tape()
    losses = t.softmax_cross_entropy(t.var([[1.0, 0.0]]), np.array([[1.0, 0.0]]))
    assert losses.value[0, 0] == pytest.approx(np.log1p(np.exp(-1.0)), abs=1e-12)


def test_softmax_cross_entropy_fixed_point_gradient():
    logits = np.array([[0.2, -1.0, 0.5]])
    shifted = logits - logits.max()
    target = np.exp(shifted) / np.exp(shifted).sum()
    t = Tape()
    lv = t.var(logits)
    loss = t.sum_all(t.softmax_cross_entropy(lv, target))
    t.backward(loss)
    assert np.allclose(lv.grad, 0.0, atol=1e-12)


def test_softmax_cross_entropy_rejects_bad_target():
    t = Tape()
    with pytest.raises(ContractViolation):
        t.softmax_cross_entropy(t.var([[1.0, 0.0]]), np.array([[0.7, 0.7]]))
    with pytest.raises(ContractViolation):
        t.softmax_cross_entropy(t.var([[1.0, 0.0]]), np.array([[-0.5, 1.5]]))


def test_finite_difference_check_quadratic():
    def f(x):
        return float(np.sum(x * x)), 2.0 * x

    rng = np.random.default_rng(3)
    assert finite_difference_check(f, rng.normal(size=(3, 3))) <= 1e-8


def test_finite_difference_check_constant():
    def f(x):
        return 1.5, np.zeros_like(x)

    assert finite_difference_check(f, np.ones((2, 2))) == 0.0


def test_finite_difference_check_step_bounds():
    def f(x):
        return float(np.sum(x)), np.ones_like(x)

    with pytest.raises(ContractViolation):
        finite_difference_check(f, np.ones((1, 1)), h=1e-2)


def test_matmul_associativity():
    rng = np.random.default_rng(11)
    a = rng.uniform(-1, 1, size=(4, 5))
    b = rng.uniform(-1, 1, size=(5, 6))
    c = rng.uniform(-1, 1, size=(6, 3))
    t = Tape()
    left = t.matmul(t.matmul(t.var(a), t.var(b)), t.var(c)).value
    right = t.matmul(t.var(a), t.matmul(t.var(b), t.var(c))).value
    assert np.max(np.abs(left - right)) <= 1e-9


def _loss_through(op_name, x, aux):
    """Scalar loss exercising one primitive, returning (value, grad on x)."""
    t = Tape()
    xv = t.var(x)
    if op_name == "matmul":
        y = t.matmul(xv, t.var(aux))
    elif op_name == "transpose":
        y = t.transpose(xv)
    elif op_name == "relu":
        y = t.relu(xv)
    elif op_name == "add":
        y = t.add(xv, t.var(aux))
    elif op_name == "add_broadcast":
        y = t.add(t.var(aux), xv)
    elif op_name == "scale":
        y = t.scale(xv, -1.7)
    elif op_name == "row_sum":
        y = t.row_sum(xv)
    elif op_name == "row_l2_normalize":
        y = t.row_l2_normalize(xv)
    elif op_name == "mse":
        y = t.mse(xv, t.var(aux))
    elif op_name == "softmax_cross_entropy":
        y = t.softmax_cross_entropy(xv, aux)
    elif op_name == "sigmoid_bce":
        y = t.sigmoid_bce(xv, aux)
    elif op_name == "spmm":
        import scipy.sparse as sp

        y = t.spmm(sp.csr_matrix(aux), xv)
    else:
        raise AssertionError(op_name)
    # weight the entries so the reduction is not symmetric in them
    w = np.arange(1, y.value.size + 1, dtype=float).reshape(y.value.shape)
    loss = t.sum_all(t.mse(y, t.var(w)))
    t.backward(loss)
    return loss.value[0, 0], xv.grad


PRIMITIVES = [
    "matmul",
    "transpose",
    "relu",
    "add",
    "add_broadcast",
    "scale",
    "row_sum",
    "row_l2_normalize",
    "mse",
    "softmax_cross_entropy",
    "sigmoid_bce",
    "spmm",
]


@pytest.mark.parametrize("op_name", PRIMITIVES)
def test_primitive_gradients_match_finite_differences(op_name):
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        x = rng.uniform(-2.0, 2.0, size=(4, 3))
        if op_name == "relu":
            # keep entries away from the kink, where FD is meaningless
            x = x + 0.2 * np.sign(x) + 0.01 * (x == 0)
        if op_name == "matmul":
            aux = rng.normal(size=(3, 5))
        elif op_name == "add":
            aux = rng.normal(size=(4, 3))
        elif op_name == "add_broadcast":
            aux = rng.normal(size=(1, 3))
            x = rng.uniform(-2.0, 2.0, size=(1, 3))
        elif op_name == "mse":
            aux = rng.normal(size=(4, 3))
        elif op_name == "softmax_cross_entropy":
            raw = rng.uniform(0.1, 1.0, size=(4, 3))
            aux = raw / raw.sum(axis=1, keepdims=True)
        elif op_name == "sigmoid_bce":
            aux = (rng.random(size=(4, 3)) > 0.5).astype(float)
        elif op_name == "spmm":
            aux = (rng.random(size=(5, 4)) > 0.5).astype(float)
        else:
            aux = None
        err = finite_difference_check(lambda m: _loss_through(op_name, m, aux), x)
        assert err <= 1e-4, f"{op_name} seed {seed}: rel err {err:.3e}"


def test_forward_backward_bit_reproducible():
    rng = np.random.default_rng(42)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 3))
    target = rng.normal(size=(5, 3))

    def run():
        t = Tape()
        xv, wv = t.var(x), t.var(w)
        z = t.row_l2_normalize(t.relu(t.matmul(xv, wv)))
        loss = t.sum_all(t.mse(z, t.var(target)))
        t.backward(loss)
        return loss.value.copy(), xv.grad.copy(), wv.grad.copy()

    first = run()
    second = run()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


def test_backward_twice_is_an_error():
    t = Tape()
    x = t.var(np.ones((2, 2)))
    loss = t.sum_all(x)
    t.backward(loss)
    with pytest.raises(TapeError):
        t.backward(loss)


def test_backward_needs_scalar():
    t = Tape()
    x = t.var(np.ones((2, 2)))
    y = t.relu(x)
    with pytest.raises(ContractViolation):
        t.backward(y)


def test_as_matrix_rejects_nan():
    with pytest.raises(ContractViolation):
        as_matrix(np.array([[np.nan, 1.0]]))


def test_bin_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    m = rng.normal(size=(7, 3))
    path = tmp_path / "m.bin"
    save_matrix_bin(m, path)
    back = load_matrix_bin(path)
    assert np.array_equal(m, back)
    raw = path.read_bytes()
    assert len(raw) == 16 + 8 * 21
    assert int.from_bytes(raw[:8], "little") == 7
    assert int.from_bytes(raw[8:16], "little") == 3


def test_tsv_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    m = rng.normal(size=(4, 5)) * 1e-7
    path = tmp_path / "m.tsv"
    save_matrix_tsv(m, path)
    assert np.array_equal(load_matrix_tsv(path), m)


def test_bin_truncated_file(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x02\x00\x00\x00\x00\x00\x00\x00")
    with pytest.raises(ContractViolation):
        load_matrix_bin(path)
