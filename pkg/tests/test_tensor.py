"""Tape autodiff: forward values against loop oracles, gradients against
central differences, and the binary tensor format."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixscene import tensor as T
from mixscene.errors import (
    ContractViolationError,
    DegenerateVectorError,
    FormatError,
    NumericError,
    ShapeMismatchError,
)

import oracles

RNG = np.random.default_rng(20260826)


def test_matmul_matches_loop_oracle():
    a = RNG.normal(size=(4, 6))
    b = RNG.normal(size=(6, 3))
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    want = np.array(oracles.matmul_loops(a.tolist(), b.tolist()))
    assert np.allclose(got, want, atol=1e-12, rtol=0)


def test_pairwise_dist_matches_loop_oracle():
    a = RNG.normal(size=(5, 7))
    b = RNG.normal(size=(3, 7))
    got = T.pairwise_dist(T.Tensor(a), T.Tensor(b)).data
    want = np.array(oracles.pairwise_loops(a.tolist(), b.tolist()))
    assert got.shape == (5, 3)
    assert np.allclose(got, want, atol=1e-12, rtol=0)


def test_logsumexp_rows_matches_direct_sum():
    a = RNG.normal(size=(4, 5))
    got = T.logsumexp_rows(T.Tensor(a)).data
    want = [math.log(sum(math.exp(v) for v in row)) for row in a.tolist()]
    assert np.allclose(got, want, atol=1e-12, rtol=0)


def test_logsumexp_rows_is_overflow_safe():
    a = np.array([[1000.0, 1000.0]])
    got = T.logsumexp_rows(T.Tensor(a)).data
    assert np.allclose(got, 1000.0 + math.log(2.0))


def test_l2_normalize_unit_norm_and_floor():
    v = RNG.normal(size=12)
    out = T.l2_normalize(T.Tensor(v)).data
    assert abs(np.linalg.norm(out) - 1.0) < 1e-12
    with pytest.raises(DegenerateVectorError):
        T.l2_normalize(T.Tensor(np.zeros(4)))
    rows = np.vstack([v, np.zeros(12)])
    with pytest.raises(DegenerateVectorError):
        T.l2_normalize(T.Tensor(rows))


def test_structural_ops_values():
    m = RNG.normal(size=(3, 4))
    t = T.Tensor(m)
    assert np.array_equal(T.narrow(t, 1, 1, 3).data, m[:, 1:3])
    assert np.array_equal(T.transpose(t).data, m.T)
    assert np.array_equal(T.reshape(t, (4, 3)).data, m.reshape(4, 3))
    sq = RNG.normal(size=(4, 4))
    assert np.array_equal(T.diag_part(T.Tensor(sq)).data, np.diagonal(sq))
    rows = [T.Tensor(m[i]) for i in range(3)]
    assert np.array_equal(T.stack_rows(rows).data, m)


def test_shape_contracts():
    with pytest.raises(ShapeMismatchError):
        T.matmul(T.Tensor(RNG.normal(size=(2, 3))), T.Tensor(RNG.normal(size=(2, 3))))
    with pytest.raises(ShapeMismatchError):
        T.diag_part(T.Tensor(RNG.normal(size=(2, 3))))
    with pytest.raises(ShapeMismatchError):
        T.stack_rows([T.Tensor(np.zeros(3)), T.Tensor(np.zeros(4))])
    with pytest.raises(ContractViolationError):
        T.stack_rows([])


def test_non_finite_values_rejected():
    with pytest.raises(NumericError):
        T.exp(T.Tensor(np.array([1e4])))
    with pytest.raises(NumericError):
        T.Tensor(np.array([np.nan])) + T.Tensor(np.array([1.0]))


def test_backward_requires_tracked_scalar():
    g = T.GradGraph()
    x = g.leaf(RNG.normal(size=(3,)))
    with pytest.raises(ContractViolationError):
        g.backward(x)  # not a scalar
    other = T.GradGraph()
    y = other.leaf(np.array(1.0))
    with pytest.raises(ContractViolationError):
        g.backward(y)  # wrong graph


def test_untouched_leaf_gets_zero_grad():
    g = T.GradGraph()
    x = g.leaf(RNG.normal(size=(3,)))
    unused = g.leaf(RNG.normal(size=(2,)))
    loss = T.sum_all(T.mul(x, x))
    g.backward(loss)
    assert np.array_equal(g.grad(unused), np.zeros(2))
    assert np.allclose(g.grad(x), 2.0 * x.data)


_W = T.Tensor(RNG.normal(size=(5, 4)))
_B = T.Tensor(RNG.normal(size=4))
_M = T.Tensor(RNG.normal(size=(3, 5)))
_C = T.Tensor(RNG.normal(size=(4, 5)))


@pytest.mark.parametrize("name,f", [
    ("affine_relu", lambda x: T.sum_all(T.relu(T.matmul(x, _W) + _B))),
    ("exp_log", lambda x: T.sum_all(T.log(T.exp(T.scale(x, 0.3)) + T.Tensor(np.ones((3, 5)))))),
    ("normalize", lambda x: T.sum_all(T.mul(T.l2_normalize(x), _M))),
    ("lse_dist", lambda x: T.sum_all(T.logsumexp_rows(T.neg(T.pairwise_dist(x, _C))))),
    ("narrow_diag", lambda x: T.sum_all(T.diag_part(T.matmul(
        T.narrow(x, 1, 0, 3), T.transpose(T.narrow(x, 1, 2, 5)))))),
])
def test_gradients_match_central_differences(name, f):
    x = T.Tensor(RNG.normal(size=(3, 5)))
    assert T.finite_diff_check(f, x) < 1e-4, name


def test_finite_diff_handles_constant_function():
    # losses that never touch the probe should report a zero gradient cleanly
    err = T.finite_diff_check(lambda x: T.Tensor(np.array(2.5)), np.ones(3))
    assert err < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=9).filter(
    lambda xs: sum(abs(v) for v in xs) > 1e-3))
def test_normalize_scale_invariance(values):
    v = np.asarray(values)
    a = T.l2_normalize(T.Tensor(v)).data
    b = T.l2_normalize(T.Tensor(3.7 * v)).data
    assert np.allclose(a, b, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_pairwise_dist_nonnegative_and_symmetric(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    dab = T.pairwise_dist(T.Tensor(a), T.Tensor(b)).data
    dba = T.pairwise_dist(T.Tensor(b), T.Tensor(a)).data
    assert np.all(dab >= 0)
    assert np.allclose(dab, dba.T, atol=1e-12)


def test_tensor_bytes_roundtrip_and_format_errors(tmp_path):
    for shape in ((), (5,), (3, 4), (2, 3, 2)):
        t = T.Tensor(RNG.normal(size=shape))
        back = T.tensor_from_bytes(T.tensor_to_bytes(t))
        assert back.shape == t.shape
        assert np.array_equal(back.data, t.data)
    t = T.Tensor(RNG.normal(size=(3, 2)))
    path = tmp_path / "t.bin"
    T.save_tensor(t, path)
    assert np.array_equal(T.load_tensor(path).data, t.data)
    # repeat serialization is byte-identical
    assert T.tensor_to_bytes(t) == T.tensor_to_bytes(t)
    blob = T.tensor_to_bytes(t)
    with pytest.raises(FormatError):
        T.tensor_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        T.tensor_from_bytes(blob[:-4])
    with pytest.raises(FormatError):
        T.tensor_from_bytes(blob[:4] + bytes([9]) + blob[5:])
