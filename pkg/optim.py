"""
优化器: 固定步长梯度下降（默认）和 Adam
可选的全局梯度范数裁剪，grad_clip <= 0 表示关闭
"""

import logging
from typing import Dict, List

import numpy as np

from errors import NumericError
from models import OptimizerKind
from tensorcore import Tensor


logger = logging.getLogger(__name__)


class GradientDescent:
    """无动量的固定步长梯度下降"""

    def __init__(self, params: List[Tensor], lr: float, grad_clip: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.grad_clip = grad_clip

    def _update(self, index: int, p: Tensor):
        p.data -= self.lr * p.grad

    def clip_gradients(self) -> float:
        """把所有梯度按同一比例缩放，使全局 L2 范数不超过 grad_clip；返回缩放前的范数"""
        grads = [p.grad for p in self.params if p.grad is not None]
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        if not np.isfinite(norm):
            raise NumericError(f"gradient norm is not finite ({norm})")
        if self.grad_clip > 0 and norm > self.grad_clip:
            scale = self.grad_clip / norm
            for g in grads:
                g *= scale
            logger.debug(f"Clipped gradient norm {norm:.4g} to {self.grad_clip:g}")
        return norm

    def step(self):
        if self.grad_clip > 0:
            self.clip_gradients()
        for index, p in enumerate(self.params):
            if p.grad is None:
                continue
            self._update(index, p)
            if not np.all(np.isfinite(p.data)):
                raise NumericError(f"parameter {index} became non-finite after update")

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class Adam(GradientDescent):
    def __init__(
        self,
        params: List[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        grad_clip: float = 0.0,
    ):
        super().__init__(params, lr, grad_clip)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.first: Dict[int, np.ndarray] = {}
        self.second: Dict[int, np.ndarray] = {}
        self.steps: Dict[int, int] = {}

    def _update(self, index: int, p: Tensor):
        g = p.grad
        m = self.beta1 * self.first.get(index, np.zeros_like(g)) + (1 - self.beta1) * g
        v = self.beta2 * self.second.get(index, np.zeros_like(g)) + (1 - self.beta2) * g * g
        t = self.steps.get(index, 0) + 1
        self.first[index], self.second[index], self.steps[index] = m, v, t
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def create_optimizer(kind: OptimizerKind, params: List[Tensor], lr: float, grad_clip: float = 0.0) -> GradientDescent:
    """根据配置创建优化器"""
    if kind is OptimizerKind.ADAM:
        return Adam(params, lr, grad_clip=grad_clip)
    return GradientDescent(params, lr, grad_clip)
