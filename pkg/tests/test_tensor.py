import numpy as np
import pytest

from cellsearch import functional as F
from cellsearch.exceptions import NonFiniteError, ShapeError, TapeError
from cellsearch.tensor import Tape, Tensor, parameter


def test_quadratic_gradient():
    w = parameter([1.0, 2.0])
    with Tape() as tape:
        loss = F.sum(w * w)
        tape.backward(loss)
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_walks_nodes_in_reverse_insertion_order():
    visited = []
    x = parameter([1.0, 2.0])
    with Tape() as tape:
        y = F.relu(x)
        z = F.mul(y, 3.0)
        loss = F.sum(z)
        for node in tape.nodes:
            fn = node.backward_fn

            def spy(g, fn=fn, name=node.name):
                visited.append(name)
                return fn(g)
            node.backward_fn = spy
        tape.backward(loss)
    assert visited == ["sum", "mul", "relu"]


def test_tape_is_topologically_ordered_with_unique_ids():
    a, b = parameter(np.ones(3)), parameter(np.ones(3))
    with Tape() as tape:
        c = a + b
        d = c * a
        F.sum(d + c)
    ids = [n.out_id for n in tape.nodes]
    assert len(set(ids)) == len(ids)
    seen = set()
    for n in tape.nodes:
        for t in n.inputs:
            assert t.tape_id is None or t.tape_id in seen
        seen.add(n.out_id)


def test_second_backward_without_reset_raises():
    w = parameter([1.0])
    with Tape() as tape:
        loss = F.sum(w * w)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)
    tape.reset()
    with tape:
        loss = F.sum(w * w)
        tape.backward(loss)


def test_leaf_gradients_accumulate_across_tapes():
    w = parameter([3.0])
    for _ in range(2):
        with Tape() as tape:
            tape.backward(F.sum(w * 2.0))
    np.testing.assert_array_equal(w.grad, [4.0])


def test_unreachable_parameter_has_no_grad():
    used, unused = parameter([1.0]), parameter([1.0])
    with Tape() as tape:
        tape.backward(F.sum(used))
    assert unused.grad is None


def test_non_scalar_loss_rejected():
    w = parameter(np.ones(3))
    with Tape() as tape:
        with pytest.raises(TapeError):
            tape.backward(w * 2.0)


def test_foreign_tape_input_rejected():
    w = parameter(np.ones(2))
    with Tape():
        y = w * 2.0
    with Tape():
        with pytest.raises(TapeError):
            F.add(y, w)


def test_no_tape_means_constants():
    w = parameter(np.ones(2))
    y = w * 3.0
    assert y.tape_id is None and not y.requires_grad
    with pytest.raises(TapeError):
        y.backward()


def test_cross_entropy_gradient_closed_form():
    logits = parameter(np.array([[0.3, -1.0, 2.0]]))
    with Tape() as tape:
        tape.backward(F.cross_entropy(logits, [2]))
    p = np.exp(logits.data) / np.exp(logits.data).sum()
    np.testing.assert_allclose(logits.grad, p - np.array([[0, 0, 1.0]]), atol=1e-15)


def test_non_finite_loss_names_its_location():
    logits = parameter(np.array([[np.inf, 0.0]]))
    with Tape():
        with pytest.raises(NonFiniteError) as exc:
            F.cross_entropy(logits, [1])
    assert "tape node" in str(exc.value)


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(ShapeError) as exc:
        F.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))
    msg = str(exc.value)
    assert "add" in msg and "(2, 3)" in msg and "(4, 3)" in msg
    with pytest.raises(ShapeError, match="matmul"):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="conv2d"):
        F.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))))


def test_grad_shape_matches_data():
    x = parameter(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    with Tape() as tape:
        tape.backward(F.sum(F.max_pool2d(x, 3, 2, 1)))
    assert x.grad.shape == x.shape
