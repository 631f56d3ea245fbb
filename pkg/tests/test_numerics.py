from __future__ import annotations

import math
import zlib
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csmoe import numerics as nx
from csmoe.numerics import Tensor, grad_check, logsumexp, rng_stream, softmax_rows

getcontext().prec = 50
finite = st.floats(-50, 50, allow_nan=False)


def _decimal_lse(xs):
    return float(sum(Decimal(x).exp() for x in xs).ln())


# -- logsumexp --------------------------------------------------------------------------
def test_logsumexp_singleton_is_exact():
    assert logsumexp([0.0]) == 0.0
    assert logsumexp([-3.25]) == -3.25


def test_logsumexp_equal_pair():
    assert logsumexp([0.0, 0.0]) == pytest.approx(math.log(2.0), abs=1e-15)


def test_logsumexp_matches_extended_precision_oracle():
    assert logsumexp([0.0, -1.0, -2.0]) == pytest.approx(_decimal_lse([0.0, -1.0, -2.0]), abs=1e-15)


def test_logsumexp_empty_is_an_error():
    with pytest.raises(ValueError, match="empty logsumexp"):
        logsumexp([])


@given(st.lists(finite, min_size=1, max_size=8))
def test_logsumexp_bounds_max(xs):
    assert logsumexp(xs) >= max(xs)


@given(st.lists(finite, min_size=1, max_size=8), finite)
def test_logsumexp_shift(xs, c):
    assert logsumexp([x + c for x in xs]) == pytest.approx(logsumexp(xs) + c, abs=1e-12)


# -- softmax -----------------------------------------------------------------------------
def test_softmax_symmetric_row():
    np.testing.assert_array_equal(softmax_rows(np.array([[0.0, 0.0]])).data, [[0.5, 0.5]])


@pytest.mark.parametrize("c", [-40.0, 0.0, 7.5])
def test_softmax_constant_row(c):
    np.testing.assert_allclose(softmax_rows(np.full((1, 3), c)).data, [[1 / 3] * 3], atol=1e-15)


def test_softmax_matches_direct_normalization():
    exps = [Decimal(v).exp() for v in (1, 2, 3)]
    oracle = [float(e / sum(exps)) for e in exps]
    np.testing.assert_allclose(softmax_rows(np.array([[1.0, 2.0, 3.0]])).data[0], oracle, atol=1e-15)


@given(st.lists(st.lists(finite, min_size=3, max_size=3), min_size=1, max_size=4), finite)
def test_softmax_rows_normalised_and_shift_invariant(rows, c):
    m = np.array(rows)
    p = softmax_rows(m).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(np.argmax(softmax_rows(m + c).data, axis=1), np.argmax(p, axis=1))


def test_non_finite_results_are_hard_errors():
    with pytest.raises(FloatingPointError):
        nx.log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(FloatingPointError):
        nx.exp(Tensor(np.array([1000.0])))


# -- grad_check -----------------------------------------------------------------------------
def test_grad_check_quadratic():
    theta = Tensor(np.array([3.0]), requires_grad=True)
    rep = grad_check(lambda: nx.tsum(theta * theta), {"theta": theta})
    assert rep.max_rel_error < 1e-8 and rep.passed


def test_grad_check_constant():
    theta = Tensor(np.array([3.0, -1.0]), requires_grad=True)
    rep = grad_check(lambda: nx.tsum(theta * 0.0) + 5.0, {"theta": theta})
    assert rep.max_rel_error == 0.0 and rep.passed


def test_grad_check_rejects_nondeterministic_loss():
    theta = Tensor(np.array([1.0]), requires_grad=True)
    calls = iter(range(100))
    with pytest.raises(RuntimeError, match="not deterministic"):
        grad_check(lambda: nx.tsum(theta * float(next(calls))), {"theta": theta})


def test_grad_check_batched_evaluator_matches_serial():
    rng = np.random.default_rng(1)
    w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    x = rng.standard_normal((4, 3))

    def loss():
        return nx.tsum(nx.log_softmax(Tensor(x) @ w, axis=-1))

    def perturbed(name, stacked):
        with nx.no_grad():
            return nx.log_softmax(Tensor(x) @ Tensor(stacked), axis=-1).data.sum(axis=(1, 2))

    serial = grad_check(loss, {"w": w}, epsilon=1e-6)
    batched = grad_check(loss, {"w": w}, epsilon=1e-6, perturbed=perturbed, chunk=4)
    assert serial.passed and batched.passed
    assert batched.max_rel_error == pytest.approx(serial.max_rel_error, abs=1e-6)


def _leaf(rng, *shape, positive=False):
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


OPS = {
    "add_broadcast": lambda a, b: a + b[0],
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "exp": lambda a, b: nx.exp(a * 0.3),
    "log": lambda a, b: nx.log(a * a + 1.0),
    "relu": lambda a, b: nx.relu(a + 0.05),
    "matmul": lambda a, b: a @ nx.transpose(b, (1, 0)),
    "batched_matmul": lambda a, b: nx.reshape(a, (1, 3, 4)) @ nx.reshape(nx.transpose(b, (1, 0)), (1, 4, 3)),
    "logsumexp": lambda a, b: nx.logsumexp_t(a, axis=-1),
    "log_softmax": lambda a, b: nx.log_softmax(a * b, axis=-1),
    "softmax": lambda a, b: nx.softmax(a + b, axis=0) * b,
    "layer_norm": lambda a, b: nx.layer_norm(a, b[0], b[1]),
    "getitem": lambda a, b: a[np.array([0, 2, 2]), np.array([1, 0, 3])] * 2.0,
    "concat_stack": lambda a, b: nx.stack([nx.concat([a, b], axis=0), nx.concat([b, a], axis=0)]) * a[0, 0],
    "sum_mean": lambda a, b: nx.tsum(a * b, axis=1) + nx.mean(a, axis=0)[1],
    "where_masked": lambda a, b: nx.masked_fill(nx.where(a.data > 0, a, b), np.eye(3, 4, dtype=bool), -2.0) * b,
    "swapaxes": lambda a, b: nx.swapaxes(nx.reshape(a * b, (3, 2, 2)), 0, 2),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_grad_check(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    weights = rng.standard_normal(OPS[name](a, b).shape)
    rep = grad_check(lambda: nx.tsum(OPS[name](a, b) * Tensor(weights)), {"a": a, "b": b})
    assert rep.passed, (name, rep.per_param)


def test_no_grad_builds_no_graph():
    a = Tensor(np.ones(3), requires_grad=True)
    with nx.no_grad():
        out = a * 2.0
    assert not out.requires_grad


def test_float32_arithmetic_stays_float32():
    a = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    assert (a * 0.5 + 1.0).dtype == np.float32


# -- RNG streams --------------------------------------------------------------------------------
def test_rng_streams_are_reproducible_and_independent():
    a = rng_stream(5, "x", 1).standard_normal(4)
    np.testing.assert_array_equal(a, rng_stream(5, "x", 1).standard_normal(4))
    assert not np.array_equal(a, rng_stream(5, "x", 2).standard_normal(4))
    assert not np.array_equal(a, rng_stream(6, "x", 1).standard_normal(4))
