import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kvlab import tensor as T
from kvlab.checks import op_cases, run_suite
from kvlab.tensor import GradTape, NumericError, ShapeError, Tensor

finite = st.floats(-50, 50, allow_nan=False, width=32)


# --- matmul --------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)


def test_matmul_hand_value():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_sum_grad_is_b_transposed_rows(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)))
    with GradTape() as tape:
        out = T.tsum(T.matmul(a, b))
    tape.backward(out)
    expect = np.tile(b.data.sum(axis=1), (3, 1))
    np.testing.assert_allclose(a.grad, expect, rtol=1e-6)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@given(arrays(np.float32, (3, 4), elements=finite))
def test_matmul_identity_exact(x):
    out = T.matmul(Tensor(x), Tensor(np.eye(4)))
    assert np.abs(out.data - x).max() <= 1e-7


# --- softmax -------------------------------------------------------------------

def test_softmax_examples():
    assert T.softmax_rows(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]
    big = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert big[0, 0] == pytest.approx(1.0) and big[0, 1] == pytest.approx(0.0, abs=1e-30)
    np.testing.assert_allclose(T.softmax_rows(Tensor([[math.log(1), math.log(3)]])).data,
                               [[0.25, 0.75]], rtol=1e-6)


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 7)),
              elements=st.floats(float(np.float32(-3e38)), float(np.float32(3e38)), width=32)))
def test_softmax_rows_sum_to_one(x):
    p = T.softmax_rows(Tensor(x)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


# --- rmsnorm -------------------------------------------------------------------

def test_rmsnorm_examples():
    ones = Tensor(np.ones(4))
    assert np.allclose(T.rmsnorm(Tensor(np.ones((1, 4))), ones, eps=0.0).data, 1.0)
    np.testing.assert_allclose(T.rmsnorm(Tensor([[3.0, 4.0]]), Tensor(np.ones(2)), eps=0.0).data,
                               [[0.8485281, 1.1313709]], rtol=1e-6)
    z = T.rmsnorm(Tensor(np.zeros((1, 4))), ones, eps=1e-6).data
    assert np.array_equal(z, np.zeros((1, 4)))


def test_rmsnorm_gain_length_checked():
    with pytest.raises(ShapeError):
        T.rmsnorm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)))


# --- rope ----------------------------------------------------------------------

def test_rope_position_zero_is_identity(rng):
    x = rng.normal(size=(1, 6)).astype(np.float32)
    assert np.array_equal(T.rope_apply(Tensor(x), [0]).data, x)


@pytest.mark.parametrize("p", [1, 2, 7, 100])
def test_rope_first_pair_rotation(p):
    out = T.rope_apply(Tensor([[1.0, 0.0, 0.0, 0.0]]), [p]).data
    np.testing.assert_allclose(out[0, :2], [math.cos(p), math.sin(p)], atol=1e-6)


def test_rope_odd_dim_rejected():
    with pytest.raises(ShapeError):
        T.rope_apply(Tensor(np.ones((2, 3))), [0, 1])


@given(st.integers(0, 10_000), st.integers(0, 2**31 - 1))
def test_rope_preserves_pair_norms(pos, seed):
    x = np.random.default_rng(seed).uniform(-2, 2, size=(1, 8)).astype(np.float32)
    out = T.rope_apply(Tensor(x), [pos]).data
    n_in = np.hypot(x[0, 0::2], x[0, 1::2])
    n_out = np.hypot(out[0, 0::2], out[0, 1::2])
    np.testing.assert_allclose(n_out, n_in, atol=1e-6)


@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500), st.integers(0, 2**31 - 1))
def test_rope_relative_position(m, n, s, seed):
    rng = np.random.default_rng(seed)
    q, k = rng.uniform(-1, 1, size=(2, 1, 16))
    with T.precision(np.float64):
        dot = lambda a, b: float((T.rope_apply(Tensor(q), [a]).data * T.rope_apply(Tensor(k), [b]).data).sum())  # noqa: E731
        assert abs(dot(m, n) - dot(m + s, n + s)) <= 1e-5


# --- tape, finiteness, grad check ------------------------------------------------

@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_is_an_error():
    with pytest.raises(NumericError):
        T.mul(Tensor([3e38]), Tensor([10.0]))


def test_no_silent_broadcast():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_tape_only_records_grad_ops():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 2)))
    with GradTape() as tape:
        T.add(b, b)
        T.add(a, b)
    assert len(tape) == 1
    tape.clear()
    assert len(tape) == 0


def test_grad_shape_matches_data(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    g = Tensor(np.ones(4), requires_grad=True)
    with GradTape() as tape:
        out = T.tsum(T.rmsnorm(x, g))
    tape.backward(out)
    assert x.grad.shape == x.shape and g.grad.shape == g.shape


def test_grad_check_examples(rng):
    assert T.grad_check(lambda a, b: T.tsum(T.matmul(a, b)), [rng.uniform(-2, 2, (3, 4)),
                                                              rng.uniform(-2, 2, (4, 2))]) < 1e-4
    assert T.grad_check(lambda x: T.tsum(T.softmax_rows(x)), [rng.uniform(-2, 2, (3, 5))]) < 1e-4
    assert T.grad_check(lambda x: T.scale(T.tsum(x), 0.0), [rng.uniform(-2, 2, (3,))]) == 0.0


def test_grad_check_detects_wrong_rule(rng):
    def bad_square(x):
        return T.custom_op("bad", [x], x.data ** 2, lambda g: [g * x.data])  # missing factor 2
    assert T.grad_check(lambda x: T.tsum(bad_square(x)), [rng.uniform(-2, 2, (4,))]) > 0.1


@pytest.mark.parametrize("case", op_cases(seed=7), ids=lambda c: c.name)
def test_every_op_matches_central_differences(case):
    (res,) = run_suite([case])
    assert res.error < 1e-4, res
