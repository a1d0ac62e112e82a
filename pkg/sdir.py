"""
稀疏狄拉克信息再平衡 (SDIR)
对强模态做伯努利稀疏化，再用指数衰减门把退化的特征拉向锚向量
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from errors import ParameterError, ShapeError
from models import SparsityMask
from tensorcore import Tensor, constant, exp, l2_norm, parameter, as_tensor


logger = logging.getLogger(__name__)

LatentLike = Union[Tensor, np.ndarray]


@dataclass(eq=False)
class DiracResponse:
    """D(z) = φ(z) + exp(-‖z‖)·e，φ 为无偏置线性映射"""

    phi_weights: Tensor
    anchor: Tensor

    @classmethod
    def initialize(cls, dim: int, rng: np.random.Generator, learn_anchor: bool = True) -> "DiracResponse":
        """φ 初始化为恒等映射，锚向量为随机单位向量"""
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        anchor = Tensor(direction, requires_grad=learn_anchor)
        return cls(phi_weights=parameter(np.eye(dim)), anchor=anchor)

    @property
    def dim(self) -> int:
        return int(self.anchor.shape[0])

    def parameters(self) -> List[Tensor]:
        return [t for t in (self.phi_weights, self.anchor) if t.requires_grad]

    @staticmethod
    def decay(r: Tensor) -> Tensor:
        return exp(-r)


def validate_alpha(alpha: float):
    if not 0.0 <= alpha < 1.0:
        raise ParameterError(f"alpha must lie in [0, 1), got {alpha}")


def draw_mask(dim: int, alpha: float, rng: np.random.Generator) -> SparsityMask:
    """每一维独立保留，保留概率 1 - alpha"""
    validate_alpha(alpha)
    keep = (rng.random(dim) < 1.0 - alpha).astype(np.float64)
    return SparsityMask(keep_bits=keep, alpha=alpha)


def apply_mask(z: LatentLike, mask: SparsityMask) -> Tensor:
    z = as_tensor(z)
    if z.shape[-1] != mask.keep_bits.shape[0]:
        raise ShapeError(f"mask of length {mask.keep_bits.shape[0]} does not fit latent shape {z.shape}")
    bits = mask.keep_bits if z.ndim == 1 else mask.keep_bits.reshape(z.shape)
    return z * constant(bits)


def sparsify(z: LatentLike, alpha: float, rng: np.random.Generator) -> Tuple[Tensor, SparsityMask]:
    z = as_tensor(z)
    mask = draw_mask(z.shape[-1], alpha, rng)
    return apply_mask(z, mask), mask


def dirac_response(z_hat: LatentLike, dr: DiracResponse) -> Tensor:
    z_hat = as_tensor(z_hat)
    if z_hat.ndim == 2 and z_hat.shape[0] != 1:
        raise ShapeError(f"dirac_response takes a single latent vector, got shape {z_hat.shape}")
    row = z_hat if z_hat.ndim == 2 else z_hat[None, :]
    gate = dr.decay(l2_norm(row))
    out = row @ dr.phi_weights + gate * dr.anchor[None, :]
    return out if z_hat.ndim == 2 else out[0]


def sdir_forward(
    x: LatentLike,
    alpha: float,
    enc: Callable[[Tensor], Tensor],
    proj: Callable[[Tensor], Tensor],
    dr: DiracResponse,
    rng: Optional[np.random.Generator] = None,
    mask: Optional[SparsityMask] = None,
) -> Tensor:
    """D ∘ S_α ∘ P ∘ E；token 集合先做均值池化。给定 mask 时不再抽样"""
    validate_alpha(alpha)
    z = proj(enc(as_tensor(x)))
    if z.ndim == 2:
        z = z.mean(axis=0)
    if mask is None:
        if rng is None:
            raise ParameterError("sdir_forward needs either rng or a frozen mask")
        mask = draw_mask(z.shape[0], alpha, rng)
    return dirac_response(apply_mask(z, mask), dr)


def test_dirac_limits(dim: int = 8, seed: int = 0):
    """检查 ‖z‖→0 和 ‖z‖→∞ 两个极限"""
    print("🧪 测试 Dirac 响应极限...")
    rng = np.random.default_rng(seed)
    dr = DiracResponse.initialize(dim, rng)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)

    near_zero = dirac_response(direction * 1e-9, dr).data
    gap = float(np.linalg.norm(near_zero - dr.anchor.data))
    print(f"   ‖D(z) - e‖ at ‖z‖=1e-9: {gap:.2e}")
    assert gap <= 1e-6

    for radius in (20.0, 50.0):
        z = direction * radius
        phi = z @ dr.phi_weights.data
        rel = float(np.linalg.norm(dirac_response(z, dr).data - phi) / np.linalg.norm(phi))
        print(f"   relative anchor share at ‖z‖={radius:g}: {rel:.2e}")
        assert rel <= 1e-6

    print("✅ Dirac 响应极限测试通过")


def test_mask_statistics(draws: int = 100_000, repetitions: int = 20, seed: int = 0):
    """保留率应在 1-α 的 3σ 以内"""
    print("🧪 测试稀疏掩码统计...")
    passed = 0
    total = 0
    for alpha in (0.1, 0.3, 0.5, 0.7, 0.9):
        sigma = np.sqrt(alpha * (1 - alpha) / draws)
        for rep in range(repetitions):
            rng = np.random.default_rng([seed, rep, int(alpha * 10)])
            rate = draw_mask(draws, alpha, rng).keep_rate
            passed += abs(rate - (1 - alpha)) <= 3 * sigma
            total += 1
    ratio = passed / total
    print(f"   📊 {passed}/{total} within 3σ ({ratio:.1%})")
    assert ratio >= 0.99
    print("✅ 稀疏掩码统计测试通过")
