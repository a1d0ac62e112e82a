#!/usr/bin/env python3
"""
测试 CADE 统计量组合、白化/重着色、熵和 KL
"""

import numpy as np
import pytest

from cade import (
    block_product,
    compose_statistics,
    draw_kernel_t,
    entangle,
    entropy_inequality_check,
    fit_modality_stats,
    gaussian_entropy,
    gaussian_kl,
    gaussian_kl_tensor,
    joint_normalize,
    path_stats,
    projection_moment_check,
    quadrature_rule,
    recolor,
    relative_variance_floor,
    whiten,
)
from errors import InsufficientBatchError, ParameterError, ShapeError
from models import GaussianStats, KernelMode, KernelSpec
from tensorcore import constant

GAMMAS = (0.1, 0.3, 0.5, 0.7, 0.9)


def random_stats(rng, dim=4):
    return GaussianStats(rng.normal(size=dim), rng.uniform(0.1, 5.0, size=dim))


def test_path_endpoints():
    rng = np.random.default_rng(0)
    g, i = random_stats(rng), random_stats(rng)
    assert np.array_equal(path_stats(0.0, g, i).mean, g.mean)
    assert np.array_equal(path_stats(1.0, g, i).var, i.var)
    with pytest.raises(ParameterError):
        path_stats(1.5, g, i)


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        path_stats(0.5, GaussianStats(np.zeros(2), np.ones(2)), GaussianStats(np.zeros(3), np.ones(3)))


@pytest.mark.parametrize("gamma", GAMMAS)
def test_quadrature_weights_normalized(gamma):
    nodes, weights = quadrature_rule(KernelSpec(gamma=gamma, mode=KernelMode.EXPECTATION, quadrature_points=64))
    assert nodes.shape == (64,)
    assert np.all((nodes > 0) & (nodes < 1))
    assert weights.sum() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("gamma", GAMMAS)
def test_expectation_mode_equals_midpoint(gamma):
    """对称核下期望组合等于 t = 1/2 处的路径统计量"""
    rng = np.random.default_rng(1)
    k = KernelSpec(gamma=gamma, mode=KernelMode.EXPECTATION, quadrature_points=64)
    for _ in range(20):
        g, i = random_stats(rng), random_stats(rng)
        composed = compose_statistics(g, i, k)
        mid = path_stats(0.5, g, i)
        assert np.max(np.abs(composed.mean - mid.mean)) <= 1e-10
        assert np.max(np.abs(composed.var - mid.var)) <= 1e-10


def test_centered_mode_concentrates_on_gamma():
    rng = np.random.default_rng(2)
    g = GaussianStats(np.zeros(4), np.ones(4))
    i = GaussianStats(np.full(4, 0.5), np.full(4, 1.5))
    for gamma in GAMMAS:
        k = KernelSpec(gamma=gamma, mode=KernelMode.CENTERED, concentration=1e4)
        composed = compose_statistics(g, i, k, rng)
        target = path_stats(gamma, g, i)
        assert np.max(np.abs(composed.mean - target.mean)) <= 1e-2
        assert np.max(np.abs(composed.var - target.var)) <= 1e-2


def test_stochastic_mode_uses_drawn_position():
    rng = np.random.default_rng(3)
    g, i = random_stats(rng), random_stats(rng)
    k = KernelSpec(gamma=0.3, mode=KernelMode.STOCHASTIC)
    composed = compose_statistics(g, i, k, t=0.25)
    assert np.allclose(composed.mean, path_stats(0.25, g, i).mean)
    t = draw_kernel_t(k, np.random.default_rng(4))
    assert 0.0 <= t <= 1.0
    assert draw_kernel_t(KernelSpec(mode=KernelMode.EXPECTATION), None) is None
    with pytest.raises(ParameterError):
        draw_kernel_t(k, None)


def test_stochastic_draws_follow_beta_mean():
    k = KernelSpec(gamma=0.3, mode=KernelMode.CENTERED, concentration=10.0)
    rng = np.random.default_rng(5)
    draws = np.array([draw_kernel_t(k, rng) for _ in range(20_000)])
    assert draws.mean() == pytest.approx(0.3, abs=0.01)


def test_whiten_recolor_round_trip():
    rng = np.random.default_rng(6)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        z_I = rng.normal(size=(n, 4)) * rng.uniform(0.5, 3.0) + rng.normal()
        z_G = rng.normal(size=(n, 4)) * rng.uniform(0.5, 3.0) + rng.normal()
        z_tilde, joint = joint_normalize(z_I, z_G)
        back = recolor(z_tilde, joint).data
        assert np.max(np.abs(back - np.hstack([z_I, z_G]))) <= 1e-10


def test_whitened_batch_is_standardized():
    rng = np.random.default_rng(7)
    z_tilde, _ = joint_normalize(rng.normal(size=(50, 3)) * 4.0 + 2.0, rng.normal(size=(50, 3)))
    assert np.allclose(z_tilde.data.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(z_tilde.data.var(axis=0), 1.0, atol=1e-9)


def test_joint_normalize_errors():
    with pytest.raises(InsufficientBatchError):
        joint_normalize(np.ones((1, 3)), np.ones((1, 3)))
    with pytest.raises(ShapeError):
        joint_normalize(np.ones((4, 3)), np.ones((4, 2)))
    with pytest.raises(ShapeError):
        whiten(np.ones((4, 3)), GaussianStats(np.zeros(4), np.ones(4)))


def test_entangle_recolors_both_blocks():
    s = GaussianStats(np.array([1.0, -1.0]), np.array([4.0, 9.0]))
    out = entangle(constant(np.array([[1.0, 1.0, 0.0, -1.0]])), s).data
    assert np.allclose(out, [[3.0, 2.0, 1.0, -4.0]])
    assert block_product(s).dim == 4


def test_entangle_matches_target_moments():
    n = 10_000
    s = GaussianStats(np.array([0.5, -2.0, 3.0]), np.array([0.25, 1.0, 4.0]))
    out = entangle(constant(np.random.default_rng(12).standard_normal((n, 6))), s).data
    for block in (out[:, :3], out[:, 3:]):
        assert np.all(np.abs(block.mean(axis=0) - s.mean) <= 5.0 * np.sqrt(s.var / n))
        assert np.all(np.abs(block.var(axis=0) - s.var) <= 5.0 * s.var * np.sqrt(2.0 / n))


def test_entropy_expansion():
    rng = np.random.default_rng(8)
    for gamma in GAMMAS:
        k = KernelSpec(gamma=gamma, mode=KernelMode.EXPECTATION, quadrature_points=64)
        for _ in range(1000):
            g, i = random_stats(rng), random_stats(rng)
            ok, slack = entropy_inequality_check(g, i, k)
            assert ok and slack >= -1e-9
            # 方差不同则严格扩张
            assert slack > 0


def test_entropy_equal_variances_has_zero_slack():
    g = GaussianStats(np.zeros(3), np.full(3, 2.0))
    i = GaussianStats(np.ones(3), np.full(3, 2.0))
    _, slack = entropy_inequality_check(g, i, KernelSpec(gamma=0.3, mode=KernelMode.EXPECTATION))
    assert abs(slack) <= 1e-9


def test_entropy_check_needs_expectation_mode():
    g = GaussianStats(np.zeros(2), np.ones(2))
    with pytest.raises(ParameterError):
        entropy_inequality_check(g, g, KernelSpec(mode=KernelMode.STOCHASTIC))


def test_gaussian_entropy_unit_normal():
    s = GaussianStats(np.zeros(1), np.ones(1))
    assert gaussian_entropy(s) == pytest.approx(0.5 * np.log(2 * np.pi * np.e))


def test_kl_values():
    p = GaussianStats(np.array([0.3, -1.0]), np.array([2.0, 0.5]))
    assert abs(gaussian_kl(p, p)) <= 1e-12
    unit = GaussianStats(np.zeros(1), np.ones(1))
    shifted = GaussianStats(np.ones(1), np.ones(1))
    assert abs(gaussian_kl(unit, shifted) - 0.5) <= 1e-12


def test_kl_non_negative():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        assert gaussian_kl(random_stats(rng), random_stats(rng)) >= 0.0


def test_kl_tensor_matches_closed_form():
    rng = np.random.default_rng(10)
    p, q = random_stats(rng), random_stats(rng)
    value = gaussian_kl_tensor(constant(p.mean), constant(p.var), q).item()
    assert value == pytest.approx(gaussian_kl(p, q), abs=1e-12)


def test_fit_modality_stats_floors_variance():
    stats = fit_modality_stats(np.ones((5, 3)), eps=1e-5)
    assert np.all(stats.var == 1e-5)
    assert np.allclose(stats.mean, 1.0)


def test_projection_check_on_composed_distribution():
    """随机一维投影的均值/方差偏差在 5 个标准误以内"""
    rng = np.random.default_rng(11)
    for mode in (KernelMode.STOCHASTIC, KernelMode.EXPECTATION, KernelMode.CENTERED):
        composed = compose_statistics(random_stats(rng), random_stats(rng), KernelSpec(gamma=0.3, mode=mode), rng)
        assert projection_moment_check(block_product(composed), 100_000, 32, rng) <= 5.0


def test_projection_check_needs_samples():
    with pytest.raises(ParameterError):
        projection_moment_check(GaussianStats(np.zeros(2), np.ones(2)), 100, 4, np.random.default_rng(0))


def test_relative_variance_floor():
    joint = GaussianStats(np.zeros(4), np.array([1.0, 3.0, 1e-6, 4.0]))
    assert relative_variance_floor(joint, 1e-5, 0.1) == pytest.approx(0.1 * (8.0 + 1e-5) / 4)
    assert relative_variance_floor(joint, 1e-5, 0.0) == 1e-5
    tiny = GaussianStats(np.zeros(2), np.full(2, 1e-5))
    assert relative_variance_floor(tiny, 1e-5, 0.1) == 1e-5
    with pytest.raises(ParameterError):
        relative_variance_floor(joint, 1e-5, 1.0)
