import math

import numpy as np
import pytest

from cellsearch.optim import SGD, Adam, clip_grad_norm, cosine_lr
from cellsearch.tensor import parameter


def test_sgd_momentum_and_decay_by_hand():
    p = parameter([1.0])
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.5)
    p.grad = np.array([2.0])
    opt.step()
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 2.5)
    p.grad = np.array([2.0])
    opt.step()
    d2 = 0.9 * 2.5 + (2.0 + 0.5 * 0.75)
    assert p.data[0] == pytest.approx(0.75 - 0.1 * d2)


def test_adam_first_step_moves_by_lr():
    p = parameter([3.0, -3.0])
    opt = Adam([p], lr=0.01, betas=(0.5, 0.999))
    p.grad = np.array([10.0, -0.001])
    opt.step()
    np.testing.assert_allclose(p.data, [2.99, -2.99], atol=1e-6)


def test_params_without_grad_are_untouched():
    p, q = parameter([1.0]), parameter([1.0])
    p.grad = np.array([1.0])
    for opt in (SGD([p, q], lr=0.1), Adam([p, q], lr=0.1)):
        opt.step()
    assert q.data[0] == 1.0


def test_cosine_schedule_endpoints():
    assert cosine_lr(0.025, 0.001, 0, 12) == 0.025
    assert cosine_lr(0.025, 0.001, 11, 12) == pytest.approx(0.001)
    mid = cosine_lr(0.025, 0.001, 5.5, 12)
    assert mid == pytest.approx(0.013)
    assert cosine_lr(0.1, 0.0, 0, 1) == 0.1
    lrs = [cosine_lr(0.025, 0.001, e, 12) for e in range(12)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_clip_grad_norm():
    p, q = parameter([0.0, 0.0]), parameter([0.0])
    p.grad, q.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([p, q], 1.0) == pytest.approx(5.0)
    assert math.hypot(p.grad[0], q.grad[0]) == pytest.approx(1.0, abs=1e-6)
    p.grad = np.array([0.1, 0.0])
    q.grad = np.array([0.0])
    clip_grad_norm([p, q], 1.0)
    np.testing.assert_array_equal(p.grad, [0.1, 0.0])


def test_invalid_hyperparameters():
    with pytest.raises(ValueError):
        SGD([], lr=0.0)
    with pytest.raises(ValueError):
        Adam([], lr=0.1, betas=(1.0, 0.9))
