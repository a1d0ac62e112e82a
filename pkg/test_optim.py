#!/usr/bin/env python3
"""
测试优化器
"""

import numpy as np
import pytest

from errors import NumericError
from models import OptimizerKind
from optim import Adam, GradientDescent, create_optimizer
from tensorcore import parameter


def test_gradient_descent_step():
    p = parameter(np.array([1.0, 2.0]))
    p.grad = np.array([0.5, -1.0])
    GradientDescent([p], lr=0.1).step()
    assert np.allclose(p.data, [0.95, 2.1])


def test_parameters_without_grad_are_skipped():
    p = parameter(np.array([1.0]))
    GradientDescent([p], lr=0.1).step()
    assert p.data[0] == 1.0


def test_adam_first_step_is_signed_lr():
    p = parameter(np.array([1.0, 1.0]))
    p.grad = np.array([3.0, -0.01])
    Adam([p], lr=0.01).step()
    assert np.allclose(p.data, [0.99, 1.01], atol=1e-6)


def test_zero_grad():
    p = parameter(np.array([1.0]))
    p.grad = np.array([1.0])
    create_optimizer(OptimizerKind.SGD, [p], 0.1).zero_grad()
    assert p.grad is None


def test_non_finite_update_raises():
    p = parameter(np.array([1.0]))
    p.grad = np.array([np.inf])
    with pytest.raises(NumericError):
        GradientDescent([p], lr=0.1).step()


def test_factory():
    p = parameter(np.zeros(1))
    assert type(create_optimizer(OptimizerKind.SGD, [p], 0.1)) is GradientDescent
    assert isinstance(create_optimizer(OptimizerKind.ADAM, [p], 0.1), Adam)


def test_global_norm_clipping():
    a, b = parameter(np.zeros(1)), parameter(np.zeros(1))
    a.grad, b.grad = np.array([30.0]), np.array([40.0])
    GradientDescent([a, b], lr=0.1, grad_clip=5.0).step()
    assert np.allclose([a.data[0], b.data[0]], [-0.3, -0.4])


def test_small_gradients_are_not_clipped():
    p = parameter(np.array([1.0]))
    p.grad = np.array([0.5])
    optimizer = create_optimizer(OptimizerKind.SGD, [p], 0.1, grad_clip=1.0)
    assert optimizer.clip_gradients() == pytest.approx(0.5)
    optimizer.step()
    assert p.data[0] == pytest.approx(0.95)


def test_clipping_rejects_non_finite_norm():
    p = parameter(np.array([1.0]))
    p.grad = np.array([np.nan])
    with pytest.raises(NumericError):
        GradientDescent([p], lr=0.1, grad_clip=1.0).step()
