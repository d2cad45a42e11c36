import math

import numpy as np
import pytest

from cellsearch import functional as F
from cellsearch.exceptions import ConfigError, SearchSpaceError
from cellsearch.ops import (OP_KINDS, EdgeState, build_candidate, canonical_order, mixed_forward,
                            mixture_weights, op_param_count)
from cellsearch.tensor import Tape, Tensor, parameter

from oracles import OPS, softmax


def _edge(kinds, alpha, stride=1, channels=4, seed=0, rate=0.0):
    return EdgeState(0, 2, kinds, parameter(np.asarray(alpha, dtype=float)), channels, stride,
                     rng=np.random.default_rng(seed), skip_dropout_rate=rate)


def _branch_oracle(edge, x):
    w = softmax(list(edge.alpha.data))
    out = 0.0
    for wk, op in zip(w, edge.ops):
        out = out + wk * op(Tensor(x)).data
    return out


def test_op_order_is_canonical():
    assert OP_KINDS == OPS
    assert canonical_order(["dil_conv_5x5", "zero", "skip_connect"]) == ("zero", "skip_connect", "dil_conv_5x5")
    with pytest.raises(SearchSpaceError):
        canonical_order(["sep_conv_7x7"])


def test_skip_and_zero_mixture_example():
    x = np.random.default_rng(0).standard_normal((2, 4, 4, 4))
    # alphas follow canonical order: zero first
    edge = _edge(["zero", "skip_connect"], [math.log(3), 0.0])
    np.testing.assert_allclose(mixed_forward(edge, Tensor(x), "eval").data, 0.25 * x, atol=1e-15)


def test_single_candidate_is_that_operation():
    x = np.random.default_rng(1).standard_normal((2, 4, 4, 4))
    edge = _edge(["max_pool_3x3"], [7.3])
    np.testing.assert_allclose(mixed_forward(edge, Tensor(x), "eval").data, edge.ops[0](Tensor(x)).data,
                               atol=1e-15)


def test_mixed_forward_matches_branch_oracle():
    for k in range(50):
        rng = np.random.default_rng(100 + k)
        size = int(rng.integers(1, 9))
        kinds = [OPS[i] for i in sorted(rng.choice(8, size, replace=False))]
        stride = int(rng.choice([1, 2]))
        edge = _edge(kinds, rng.standard_normal(size) * 2, stride=stride, seed=k)
        x = rng.standard_normal((2, 4, 8, 8))
        got = mixed_forward(edge, Tensor(x), "eval").data
        np.testing.assert_allclose(got, _branch_oracle(edge, x), rtol=0, atol=1e-10)
        assert abs(mixture_weights(edge).sum() - 1.0) <= 1e-12


def test_mixture_is_shift_invariant_in_alpha():
    x = np.random.default_rng(2).standard_normal((2, 4, 4, 4))
    a = np.array([0.2, -1.0, 0.5])
    kinds = ["skip_connect", "avg_pool_3x3", "sep_conv_3x3"]
    y0 = mixed_forward(_edge(kinds, a), Tensor(x), "eval").data
    y1 = mixed_forward(_edge(kinds, a + 123.0), Tensor(x), "eval").data
    np.testing.assert_allclose(y0, y1, atol=1e-12)


def test_zero_only_edge_gives_zero_alpha_gradient():
    x = np.random.default_rng(3).standard_normal((2, 4, 4, 4))
    edge = _edge(["zero"], [0.4])
    with Tape() as tape:
        out = mixed_forward(edge, Tensor(x), "eval")
        tape.backward(F.sum(out))
    np.testing.assert_array_equal(out.data, 0.0)
    np.testing.assert_array_equal(edge.alpha.grad, 0.0)


def test_dropout_zero_makes_train_equal_eval():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 4, 4, 4))
    edge = _edge(["skip_connect", "max_pool_3x3"], [0.1, 0.2])
    a = mixed_forward(edge, Tensor(x), "train", np.random.default_rng(0)).data
    b = mixed_forward(edge, Tensor(x), "eval").data
    np.testing.assert_array_equal(a, b)


def test_skip_dropout_only_touches_skip_branch_in_train():
    x = np.ones((4, 4, 4, 4))
    edge = _edge(["zero", "skip_connect"], [0.0, 0.0], rate=0.5)
    y = mixed_forward(edge, Tensor(x), "train", np.random.default_rng(0)).data
    assert set(np.unique(y)) == {0.0, 1.0}
    np.testing.assert_array_equal(mixed_forward(edge, Tensor(x), "eval").data, 0.5)
    with pytest.raises(ValueError):
        mixed_forward(edge, Tensor(x), "train")


def test_nan_alpha_and_bad_construction_rejected():
    edge = _edge(["skip_connect"], [np.nan])
    with pytest.raises(SearchSpaceError, match="NaN"):
        mixed_forward(edge, Tensor(np.ones((1, 4, 4, 4))), "eval")
    with pytest.raises(SearchSpaceError):
        _edge([], [])
    with pytest.raises(SearchSpaceError):
        _edge(["zero", "skip_connect"], [0.0])
    with pytest.raises(SearchSpaceError):
        EdgeState(2, 2, ["zero"], parameter([0.0]), 4, 1, rng=np.random.default_rng(0))
    with pytest.raises(SearchSpaceError):
        _edge(["skip_connect"], [0.0], rate=1.5)


@pytest.mark.parametrize("kind", OPS)
@pytest.mark.parametrize("stride", [1, 2])
def test_candidate_shapes_and_parameter_counts(kind, stride):
    op = build_candidate(kind, 6, stride, rng=np.random.default_rng(0))
    y = op(Tensor(np.random.default_rng(1).standard_normal((2, 6, 8, 8))))
    assert y.shape == (2, 6, 8 // stride, 8 // stride)
    assert op.num_parameters() == op_param_count(kind, 6, stride)


def test_parameter_counts_by_hand():
    # depthwise 3x3 + pointwise + BN affine, twice
    assert op_param_count("sep_conv_3x3", 4, 1) == 2 * (9 * 4 + 16 + 8)
    assert op_param_count("dil_conv_5x5", 4, 1) == 25 * 4 + 16 + 8
    assert op_param_count("skip_connect", 4, 2) == 2 * (4 * 2) + 8
    assert op_param_count("skip_connect", 4, 1) == 0
    assert op_param_count("max_pool_3x3", 4, 2) == 0


def test_build_candidate_rejects_bad_arguments():
    with pytest.raises(SearchSpaceError):
        build_candidate("conv_7x1_1x7", 4, 1, rng=np.random.default_rng(0))
    with pytest.raises(ConfigError):
        build_candidate("skip_connect", 4, 3, rng=np.random.default_rng(0))
