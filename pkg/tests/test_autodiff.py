"""Tensor kernel: oracles for forward values, finite differences for gradients."""

import numpy as np
import pytest

from kvlatent import autodiff as ad
from kvlatent.autodiff import NumericsError, Tape, Tensor, grad_check


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity_bit_exact():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 5))
    out = ad.matmul(t64(np.eye(3)), t64(a))
    assert np.array_equal(out.data, a)
    out2 = ad.matmul(t64(a), t64(np.eye(5)))
    assert np.array_equal(out2.data, a)


def test_matmul_hand_case():
    out = ad.matmul(t64([[1, 2], [3, 4]]), t64([[0], [1]]))
    assert out.data.tolist() == [[2.0], [4.0]]


def triple_loop_matmul(a, b):
    n, m = a.shape
    m2, k = b.shape
    out = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            s = 0.0
            for p in range(m):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(5, 7)).astype(np.float32)
    b = rng.normal(size=(7, 3)).astype(np.float32)
    out = ad.matmul(Tensor(a), Tensor(b))
    expect = triple_loop_matmul(a.astype(np.float64), b.astype(np.float64))
    assert np.abs(out.data - expect).max() < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(NumericsError):
        ad.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_matmul_mixed_dtype_rejected():
    with pytest.raises(NumericsError):
        ad.matmul(Tensor(np.ones((2, 2), np.float32)), t64(np.ones((2, 2))))


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def test_softmax_symmetry():
    out = ad.softmax_rows(t64([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_no_overflow():
    out = ad.softmax_rows(t64([1000.0, 0.0]))
    assert abs(out.data[0] - 1.0) < 1e-6
    assert abs(out.data[1]) < 1e-6


def test_softmax_matches_direct_oracle():
    rng = np.random.default_rng(2)
    row = rng.normal(size=17)
    out = ad.softmax_rows(t64(row))
    direct = np.exp(row) / np.exp(row).sum()
    assert np.abs(out.data - direct).max() < 1e-7


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 9))
    out = ad.softmax_rows(t64(x))
    assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-6
    shifted = ad.softmax_rows(t64(x + 5.0))
    assert np.abs(out.data - shifted.data).max() < 1e-12


# ---------------------------------------------------------------------------
# tape mechanics
# ---------------------------------------------------------------------------


def test_gradients_accumulate_across_branches():
    x = t64([[1.0, 2.0], [3.0, 4.0]])
    tape = Tape()
    y = ad.add(ad.mul(x, x, tape), x, tape)        # x^2 + x
    loss = ad.sum_all(y, tape)
    tape.backward(loss)
    assert np.allclose(tape.grad(x), 2 * x.data + 1)


def test_backward_requires_scalar_root():
    x = t64([[1.0, 2.0]])
    tape = Tape()
    y = ad.mul(x, x, tape)
    with pytest.raises(NumericsError):
        tape.backward(y)


def test_tape_single_use():
    x = t64([1.0])
    tape = Tape()
    y = ad.sum_all(x, tape)
    tape.backward(y)
    with pytest.raises(NumericsError):
        tape.backward(y)


def test_nonfinite_aborts():
    big = t64([1e200])
    with np.errstate(over="ignore"), pytest.raises(NumericsError):
        ad.mul(big, big)


def test_constant_operands_get_no_gradient():
    x = t64([[1.0, 2.0]])
    mask = np.array([[0.0, -1.0]])
    tape = Tape()
    loss = ad.sum_all(ad.add(x, mask, tape), tape)
    tape.backward(loss)
    assert np.allclose(tape.grad(x), 1.0)


# ---------------------------------------------------------------------------
# per-primitive gradient checks (10 random instances each)
# ---------------------------------------------------------------------------

def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


PRIMS = {
    "matmul_left": lambda x, tape, c: ad.sum_all(ad.matmul(x, c["b"], tape), tape),
    "matmul_right": lambda x, tape, c: ad.sum_all(ad.matmul(c["a"], x, tape), tape),
    "matmul_tb": lambda x, tape, c: ad.sum_all(
        ad.matmul(x, c["bt"], tape, transpose_b=True), tape),
    "add": lambda x, tape, c: ad.sum_all(ad.add(x, c["x2"], tape), tape),
    "sub": lambda x, tape, c: ad.sum_all(ad.mul(ad.sub(x, c["x2"], tape),
                                                ad.sub(x, c["x2"], tape), tape), tape),
    "mul": lambda x, tape, c: ad.sum_all(ad.mul(x, c["x2"], tape), tape),
    "scale": lambda x, tape, c: ad.sum_all(ad.scale(x, 0.37, tape), tape),
    "add_scalar": lambda x, tape, c: ad.sum_all(
        ad.mul(ad.add_scalar(x, 1.5, tape), x, tape), tape),
    "mul_rowvec": lambda x, tape, c: ad.sum_all(ad.mul_rowvec(x, c["v"], tape), tape),
    "silu": lambda x, tape, c: ad.sum_all(ad.silu(x, tape), tape),
    "softmax": lambda x, tape, c: ad.sum_all(
        ad.mul(ad.softmax_rows(x, tape), c["x2"], tape), tape),
    "log_softmax": lambda x, tape, c: ad.sum_all(
        ad.mul(ad.log_softmax_rows(x, tape), c["x2"], tape), tape),
    "rms_norm": lambda x, tape, c: ad.sum_all(
        ad.mul(ad.rms_norm_rows(x, 1e-6, tape), c["x2"], tape), tape),
    "rotate_adjacent": lambda x, tape, c: ad.sum_all(
        ad.mul(ad.rotate_pairs(x, c["cos"], c["sin"], "adjacent", tape), c["x2"], tape),
        tape),
    "rotate_half_split": lambda x, tape, c: ad.sum_all(
        ad.mul(ad.rotate_pairs(x, c["cos"], c["sin"], "half_split", tape), c["x2"], tape),
        tape),
    "embedding": lambda x, tape, c: ad.sum_all(
        ad.mul(ad.embedding(x, c["ids"], tape), c["emb_w"], tape), tape),
    "slice_cols": lambda x, tape, c: ad.sum_all(
        ad.mul(ad.slice_cols(x, 1, 4, tape), ad.slice_cols(x, 2, 5, tape), tape), tape),
    "slice_rows": lambda x, tape, c: ad.sum_all(ad.slice_rows(x, 0, 3, tape), tape),
    "take_rows": lambda x, tape, c: ad.sum_all(ad.take_rows(x, c["rows"], tape), tape),
    "pick_columns": lambda x, tape, c: ad.sum_all(
        ad.pick_columns(x, c["cols"], tape), tape),
    "mean_all": lambda x, tape, c: ad.mean_all(ad.mul(x, x, tape), tape),
}


@pytest.mark.parametrize("name", sorted(PRIMS))
def test_primitive_gradients_vs_finite_differences(name):
    fn = PRIMS[name]
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = _rand(rng, 4, 6)
        angles = rng.uniform(0, 2 * np.pi, size=(4, 3))
        consts = {
            "a": _rand(rng, 3, 4).data, "b": _rand(rng, 6, 3).data,
            "bt": _rand(rng, 5, 6).data,
            "x2": _rand(rng, 4, 6).data, "v": _rand(rng, 6).data,
            "cos": np.cos(angles), "sin": np.sin(angles),
            "ids": rng.integers(0, 4, size=5), "emb_w": _rand(rng, 5, 6).data,
            "rows": rng.integers(0, 4, size=7), "cols": rng.integers(0, 6, size=4),
        }
        err = grad_check(lambda t, tape: fn(t, tape, consts), x, eps=1e-5)
        assert err < 1e-4, f"{name} seed {seed}: rel err {err}"


def test_grad_check_sum_is_exact():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(3, 4)))
    err = grad_check(lambda t, tape: ad.sum_all(t, tape), x)
    assert err < 1e-9


def test_grad_check_requires_f64():
    x = Tensor(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(NumericsError):
        grad_check(lambda t, tape: ad.sum_all(t, tape), x)


def test_grad_check_rejects_nonscalar():
    x = Tensor(np.ones((2, 2)))
    with pytest.raises(NumericsError):
        grad_check(lambda t, tape: ad.mul(t, t, tape), x)


def test_grad_check_eps_bounds():
    x = Tensor(np.ones(3))
    with pytest.raises(NumericsError):
        grad_check(lambda t, tape: ad.sum_all(t, tape), x, eps=1e-2)
