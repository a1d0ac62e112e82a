"""
癌症感知分布纠缠 (CADE)
模态统计量、沿 基因→图像 路径的核加权组合、联合白化与重着色，
以及高斯熵/KL 工具和一维投影分布检查
"""

import logging
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import roots_legendre
from scipy.stats import beta as beta_dist

from errors import InsufficientBatchError, NumericError, ParameterError, ShapeError
from models import DEFAULT_VARIANCE_EPS, GaussianStats, KernelMode, KernelSpec
from tensorcore import Tensor, as_tensor, batch_stats, concat, constant, log


logger = logging.getLogger(__name__)

ENTROPY_TOLERANCE = 1e-9
MIN_PROJECTION_SAMPLES = 10_000


def fit_modality_stats(features, eps: float = DEFAULT_VARIANCE_EPS) -> GaussianStats:
    """批内均值和有偏方差，方差截断到 eps"""
    mu, var = batch_stats(constant(as_tensor(features).data))
    return GaussianStats(mean=mu.data, var=var.data, eps=eps)


def relative_variance_floor(joint: GaussianStats, eps: float = DEFAULT_VARIANCE_EPS, ratio: float = 0.0) -> float:
    """方差下限取 max(eps, ratio · 联合方差均值)；随潜空间整体尺度缩放"""
    if not 0.0 <= ratio < 1.0:
        raise ParameterError(f"relative floor ratio must lie in [0, 1), got {ratio}")
    return float(max(eps, ratio * float(np.mean(joint.var))))


def _check_same_dim(g: GaussianStats, i: GaussianStats):
    if g.dim != i.dim:
        raise ShapeError(f"statistics dimensions differ: {g.dim} vs {i.dim}")


def path_stats(t: float, g: GaussianStats, i: GaussianStats) -> GaussianStats:
    """μ(t) = (1-t)μ_G + tμ_I，方差同样线性插值"""
    if not 0.0 <= t <= 1.0:
        raise ParameterError(f"path position t must lie in [0, 1], got {t}")
    _check_same_dim(g, i)
    return GaussianStats(
        mean=(1.0 - t) * g.mean + t * i.mean,
        var=(1.0 - t) * g.var + t * i.var,
        eps=min(g.eps, i.eps),
    )


def quadrature_rule(k: KernelSpec) -> Tuple[np.ndarray, np.ndarray]:
    """[0,1] 上的 Gauss-Legendre 节点，权重乘以 Beta(γ,γ) 密度后归一化"""
    x, w = roots_legendre(k.quadrature_points)
    nodes = 0.5 * (x + 1.0)
    weights = 0.5 * w * beta_dist.pdf(nodes, k.gamma, k.gamma)
    total = weights.sum()
    if not (np.all(np.isfinite(weights)) and np.isfinite(total) and total > 0):
        raise NumericError(f"quadrature weights diverged for gamma={k.gamma}, points={k.quadrature_points}")
    return nodes, weights / total


def draw_kernel_t(k: KernelSpec, rng: Optional[np.random.Generator]) -> Optional[float]:
    """随机模式下抽取路径位置 t；期望模式返回 None"""
    if k.mode is KernelMode.EXPECTATION:
        return None
    if rng is None:
        raise ParameterError(f"{k.mode.value} kernel mode needs a random generator")
    if k.mode is KernelMode.STOCHASTIC:
        return float(rng.beta(k.gamma, k.gamma))
    c = k.concentration
    return float(rng.beta(c * k.gamma, c * (1.0 - k.gamma)))


def compose_statistics(
    g: GaussianStats,
    i: GaussianStats,
    k: KernelSpec,
    rng: Optional[np.random.Generator] = None,
    t: Optional[float] = None,
) -> GaussianStats:
    """沿路径的核加权统计量组合；给定 t 时使用冻结的抽样结果"""
    _check_same_dim(g, i)
    if k.mode is KernelMode.EXPECTATION:
        nodes, weights = quadrature_rule(k)
        means = np.stack([(1.0 - t_j) * g.mean + t_j * i.mean for t_j in nodes])
        variances = np.stack([(1.0 - t_j) * g.var + t_j * i.var for t_j in nodes])
        return GaussianStats(mean=weights @ means, var=weights @ variances, eps=min(g.eps, i.eps))
    if t is None:
        t = draw_kernel_t(k, rng)
    return path_stats(t, g, i)


def _row_constant(vector: np.ndarray, n: int) -> Tensor:
    return constant(np.tile(vector, (n, 1)))


def joint_normalize(z_I, z_G, eps: float = DEFAULT_VARIANCE_EPS) -> Tuple[Tensor, GaussianStats]:
    """拼接 [z_I; z_G] 后按批统计量逐维标准化（统计量不回传梯度）"""
    z_I, z_G = as_tensor(z_I), as_tensor(z_G)
    if z_I.ndim != 2 or z_I.shape != z_G.shape:
        raise ShapeError(f"modality latents must share an n×d shape, got {z_I.shape} and {z_G.shape}")
    n = z_I.shape[0]
    if n < 2:
        raise InsufficientBatchError(f"joint normalization needs n >= 2 samples, got {n}")
    z = concat([z_I, z_G], axis=1)
    joint = fit_modality_stats(z.data, eps=eps)
    return whiten(z, joint), joint


def whiten(z, stats: GaussianStats) -> Tensor:
    """(z - μ) / sqrt(Σ)，统计量视为常数"""
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[1] != stats.dim:
        raise ShapeError(f"cannot whiten shape {z.shape} with {stats.dim}-dimensional statistics")
    n = z.shape[0]
    return (z - _row_constant(stats.mean, n)) * _row_constant(1.0 / np.sqrt(stats.var), n)


def recolor(z_tilde, stats: GaussianStats) -> Tensor:
    """白化的逆变换: μ + sqrt(Σ) ⊙ z"""
    z_tilde = as_tensor(z_tilde)
    if z_tilde.ndim != 2 or z_tilde.shape[1] != stats.dim:
        raise ShapeError(f"cannot recolor shape {z_tilde.shape} with {stats.dim}-dimensional statistics")
    n = z_tilde.shape[0]
    return _row_constant(stats.mean, n) + z_tilde * _row_constant(np.sqrt(stats.var), n)


def block_product(s: GaussianStats) -> GaussianStats:
    """图像和基因两个分块使用同一组统计量"""
    return s.concat(s)


def entangle(z_tilde, s: GaussianStats) -> Tensor:
    z_tilde = as_tensor(z_tilde)
    if z_tilde.ndim != 2 or z_tilde.shape[1] != 2 * s.dim:
        raise ShapeError(f"entangle expects n×{2 * s.dim} input, got {z_tilde.shape}")
    return recolor(z_tilde, block_product(s))


def gaussian_entropy(s: GaussianStats) -> float:
    return float(0.5 * np.sum(np.log(2.0 * np.pi * np.e * s.var)))


def entropy_inequality_check(g: GaussianStats, i: GaussianStats, k: KernelSpec) -> Tuple[bool, float]:
    """S(组合分布) - E_κ[S(路径分布)]，Jensen 不等式保证非负"""
    if k.mode is not KernelMode.EXPECTATION:
        raise ParameterError("entropy inequality is defined for the expectation kernel mode")
    composed = compose_statistics(g, i, k)
    nodes, weights = quadrature_rule(k)
    expected = float(sum(w * gaussian_entropy(path_stats(float(t), g, i)) for t, w in zip(nodes, weights)))
    slack = gaussian_entropy(composed) - expected
    return slack >= -ENTROPY_TOLERANCE, slack


def gaussian_kl(p: GaussianStats, q: GaussianStats) -> float:
    """KL(p ‖ q)，对角高斯闭式解"""
    _check_same_dim(p, q)
    diff = p.mean - q.mean
    return float(0.5 * np.sum(np.log(q.var / p.var) + (p.var + diff * diff) / q.var - 1.0))


def gaussian_kl_tensor(p_mean: Tensor, p_var: Tensor, q: GaussianStats) -> Tensor:
    """可微版本，q 视为常数"""
    if p_mean.shape != (q.dim,) or p_var.shape != (q.dim,):
        raise ShapeError(f"KL operands {p_mean.shape}/{p_var.shape} do not match dimension {q.dim}")
    diff = p_mean - constant(q.mean)
    inv_q = constant(1.0 / q.var)
    per_dim = (p_var + diff * diff) * inv_q - log(p_var)
    return 0.5 * (per_dim.sum() + float(np.sum(np.log(q.var))) - float(q.dim))


def projection_moment_check(
    s: GaussianStats, n_samples: int, n_directions: int, rng: np.random.Generator
) -> float:
    """随机单位方向上的一维投影均值/方差偏差（以标准误为单位）的最大值"""
    if n_samples < MIN_PROJECTION_SAMPLES:
        raise ParameterError(f"projection check needs at least {MIN_PROJECTION_SAMPLES} samples, got {n_samples}")
    if n_directions < 1:
        raise ParameterError("need at least one projection direction")
    x = s.mean + np.sqrt(s.var) * rng.standard_normal((n_samples, s.dim))
    directions = rng.normal(size=(s.dim, n_directions))
    directions /= np.linalg.norm(directions, axis=0, keepdims=True)

    projected = x @ directions
    expected_mean = s.mean @ directions
    expected_var = s.var @ (directions * directions)
    se_mean = np.sqrt(expected_var / n_samples)
    se_var = expected_var * np.sqrt(2.0 / (n_samples - 1))
    mean_dev = np.abs(projected.mean(axis=0) - expected_mean) / se_mean
    var_dev = np.abs(projected.var(axis=0, ddof=1) - expected_var) / se_var
    worst = float(max(mean_dev.max(), var_dev.max()))
    logger.debug(f"projection check: worst standardized deviation {worst:.3f} over {n_directions} directions")
    return worst


def test_cade_properties(pairs: int = 200, seed: int = 0):
    """组合、往返、熵扩张、KL 和投影检查"""
    print("🧪 测试 CADE 性质...")
    rng = np.random.default_rng(seed)
    failures: List[str] = []

    for gamma in (0.1, 0.3, 0.5, 0.7, 0.9):
        k = KernelSpec(gamma=gamma, mode=KernelMode.EXPECTATION, quadrature_points=64)
        for _ in range(pairs):
            g = GaussianStats(rng.normal(size=4), rng.uniform(0.1, 5.0, size=4))
            i = GaussianStats(rng.normal(size=4), rng.uniform(0.1, 5.0, size=4))
            composed = compose_statistics(g, i, k)
            mid = path_stats(0.5, g, i)
            if np.max(np.abs(composed.mean - mid.mean)) > 1e-10 or np.max(np.abs(composed.var - mid.var)) > 1e-10:
                failures.append(f"composition gamma={gamma}")
            ok, slack = entropy_inequality_check(g, i, k)
            if not ok:
                failures.append(f"entropy slack {slack:.3e} gamma={gamma}")
            if gaussian_kl(g, i) < 0:
                failures.append("negative KL")
    print(f"   📊 composition / entropy / KL: {5 * pairs} pairs checked")

    for _ in range(20):
        z_I, z_G = rng.normal(size=(32, 4)), rng.normal(size=(32, 4)) * 3.0 + 1.0
        z_tilde, joint = joint_normalize(z_I, z_G)
        back = recolor(z_tilde, joint).data
        if np.max(np.abs(back - np.hstack([z_I, z_G]))) > 1e-10:
            failures.append("whiten/recolor round-trip")
    print("   📊 whiten/recolor round-trip: 20 batches checked")

    k = KernelSpec(gamma=0.3, mode=KernelMode.STOCHASTIC)
    composed = compose_statistics(
        GaussianStats(np.zeros(4), np.ones(4)), GaussianStats(np.ones(4), np.full(4, 4.0)), k, rng
    )
    worst = projection_moment_check(block_product(composed), 100_000, 32, rng)
    print(f"   📊 projection check worst deviation: {worst:.2f} SE")
    if worst > 5.0:
        failures.append(f"projection deviation {worst:.2f}")

    if failures:
        for f in failures[:10]:
            print(f"   ❌ {f}")
        raise AssertionError(f"{len(failures)} CADE property failures")
    print("✅ CADE 性质测试通过")
