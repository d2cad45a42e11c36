import math

import numpy as np
import pytest

from cellsearch import functional as F
from cellsearch.gradcheck import DEFAULT_TOL, DENOM_FLOOR, format_table, max_relative_error, run_suite
from cellsearch.tensor import Tape, Tensor, parameter

from oracles import conv2d_oracle, pool_oracle


def test_conv_center_of_ones_is_nine():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), 1, 1)
    assert out.data[0, 0, 1, 1] == 9.0


@pytest.mark.parametrize("stride,padding,dilation,groups,k", [
    (1, 1, 1, 1, 3), (2, 1, 1, 1, 3), (1, 2, 2, 1, 3), (1, 0, 1, 1, 1), (2, 0, 1, 1, 1),
    (1, 1, 1, 2, 3), (1, 1, 1, 4, 3), (2, 2, 1, 4, 5), (1, 4, 2, 4, 5), (2, 2, 2, 4, 3),
])
def test_conv_matches_direct_loop(stride, padding, dilation, groups, k):
    rng = np.random.default_rng(stride * 100 + padding * 10 + groups)
    x = rng.standard_normal((2, 4, 7, 7))
    w = rng.standard_normal((4, 4 // groups, k, k))
    got = F.conv2d(Tensor(x), Tensor(w), stride, padding, dilation, groups).data
    np.testing.assert_allclose(got, conv2d_oracle(x, w, stride, padding, dilation, groups), atol=1e-12)


@pytest.mark.parametrize("mode,stride", [("max", 1), ("max", 2), ("avg", 1), ("avg", 2)])
def test_pools_match_direct_loop(mode, stride):
    x = np.random.default_rng(7).standard_normal((2, 3, 6, 6))
    fn = F.max_pool2d if mode == "max" else F.avg_pool2d
    np.testing.assert_allclose(fn(Tensor(x), 3, stride, 1).data, pool_oracle(x, mode, 3, stride, 1),
                               atol=1e-14)


@pytest.mark.parametrize("fn", [F.max_pool2d, F.avg_pool2d])
def test_pool_of_constant_is_constant(fn):
    x = np.full((2, 3, 5, 5), 1.75)
    np.testing.assert_array_equal(fn(Tensor(x), 3, 1, 1).data, 1.75)
    np.testing.assert_array_equal(fn(Tensor(x[:, :, :4, :4]), 3, 2, 1).data, 1.75)


def test_softmax_closed_form():
    np.testing.assert_allclose(F.softmax(Tensor([0.0, math.log(2)])).data, [1 / 3, 2 / 3], atol=1e-15)


def test_concat_then_split_is_identity_on_data_and_grads():
    rng = np.random.default_rng(1)
    a, b = parameter(rng.standard_normal((2, 3, 4))), parameter(rng.standard_normal((2, 5, 4)))
    g_out = rng.standard_normal((2, 8, 4))
    with Tape() as tape:
        ra, rb = F.split(F.concat([a, b], axis=1), [3, 5], axis=1)
        loss = F.sum(F.mul(F.concat([ra, rb], axis=1), g_out))
        tape.backward(loss)
    np.testing.assert_array_equal(ra.data, a.data)
    np.testing.assert_array_equal(rb.data, b.data)
    np.testing.assert_array_equal(a.grad, g_out[:, :3])
    np.testing.assert_array_equal(b.grad, g_out[:, 3:])


def test_batch_norm_train_normalises_each_channel():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((8, 3, 5, 5)) * np.array([0.5, 3.0, 10.0])[None, :, None, None] + 4.0
    # with eps = 0 the normalised output has exactly unit variance
    out = F.batch_norm(Tensor(x), None, None, np.zeros(3), np.ones(3), True, eps=0.0).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-6)
    # with the default eps the variance is v / (v + eps)
    v = x.var(axis=(0, 2, 3))
    out = F.batch_norm(Tensor(x), None, None, np.zeros(3), np.ones(3), True).data
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), v / (v + 1e-5), atol=1e-12)


def test_batch_norm_running_stats_and_eval_mode():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 2, 3, 3)) + 1.0
    rm, rv = np.zeros(2), np.ones(2)
    F.batch_norm(Tensor(x), None, None, rm, rv, True)
    n = 4 * 9
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-15)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1), atol=1e-15)
    out = F.batch_norm(Tensor(x), None, None, rm, rv, False).data
    expect = (x - rm[None, :, None, None]) / np.sqrt(rv + 1e-5)[None, :, None, None]
    np.testing.assert_allclose(out, expect, atol=1e-14)


def test_dropout_is_inverted_and_identity_at_zero():
    x = Tensor(np.ones((200, 50)))
    assert F.dropout(x, 0.0, np.random.default_rng(0)) is x
    y = F.dropout(x, 0.25, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 1 / 0.75}
    assert abs(y.mean() - 1.0) < 0.02
    np.testing.assert_array_equal(F.dropout(x, 1.0, np.random.default_rng(0)).data, 0.0)


def test_weighted_sum_matches_manual():
    rng = np.random.default_rng(4)
    w = rng.random(3)
    ts = [rng.standard_normal((2, 2)) for _ in range(3)]
    got = F.weighted_sum(Tensor(w), [Tensor(t) for t in ts]).data
    np.testing.assert_allclose(got, sum(wk * t for wk, t in zip(w, ts)), atol=1e-15)


def test_primitives_are_bit_deterministic():
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((3, 4, 8, 8)), rng.standard_normal((4, 1, 5, 5))
    a = F.conv2d(Tensor(x), Tensor(w), 1, 4, 2, 4).data
    b = F.conv2d(Tensor(x), Tensor(w), 1, 4, 2, 4).data
    assert a.tobytes() == b.tobytes()


def test_gradcheck_smoke():
    # the full 20-seed sweep lives in the acceptance module
    results = run_suite(seeds=2)
    assert all(r.passed for r in results), format_table(results)


def test_gradcheck_metric_flags_small_relative_errors():
    g = np.array([1.0, -3e-3, DENOM_FLOOR])
    assert max_relative_error([g * (1 + 2e-4)], [g]) > DEFAULT_TOL
    assert max_relative_error([g + 1e-10], [g]) < DEFAULT_TOL
