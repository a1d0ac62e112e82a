"""
最小稠密张量库 + 反向模式自动微分
全部使用64位浮点；只支持标量与张量之间的广播
"""

import itertools
import logging
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from errors import ShapeError, InsufficientBatchError


logger = logging.getLogger(__name__)

_creation_order = itertools.count()
_grad_enabled = True

GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@contextmanager
def no_grad():
    """在此上下文中不记录计算图（评估用）"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._grad_fn: Optional[GradFn] = None
        self._order = next(_creation_order)

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str, grad_fn: GradFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.op = op
        out._order = next(_creation_order)
        tracked = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = tuple(parents) if tracked else ()
        out._grad_fn = grad_fn if tracked else None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # 运算符
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division is only defined by a python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return sum_(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return mean(self, axis)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self, floor: Optional[float] = None) -> "Tensor":
        return log(self, floor)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """标量广播的梯度回收"""
    if shape == ():
        return np.asarray(grad.sum())
    return grad


def _check_elementwise(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a, b)

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), "add", grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a, b)

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), "sub", grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul", a, b)

    def grad_fn(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), "mul", grad_fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(a.data @ b.data, (a, b), "matmul", grad_fn)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def grad_fn(g):
        return (g * out,)

    return Tensor._result(out, (x,), "exp", grad_fn)


def log(x, floor: Optional[float] = None) -> Tensor:
    """自然对数；给定 floor 时先截断到 floor（截断区梯度为0）"""
    x = as_tensor(x)
    if floor is None:
        clipped = x.data
        active = np.ones_like(x.data)
    else:
        clipped = np.maximum(x.data, floor)
        active = (x.data > floor).astype(np.float64)

    def grad_fn(g):
        return (g * active / clipped,)

    return Tensor._result(np.log(clipped), (x,), "log", grad_fn)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (x,), "sigmoid", grad_fn)


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = (x.data > 0).astype(np.float64)

    def grad_fn(g):
        return (g * active,)

    return Tensor._result(x.data * active, (x,), "relu", grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}: {e}") from e
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out, tensors, "concat", grad_fn)


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]
    advanced = any(isinstance(i, (list, np.ndarray)) for i in (index if isinstance(index, tuple) else (index,)))

    def grad_fn(g):
        full = np.zeros_like(x.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return Tensor._result(np.array(out), (x,), "slice", grad_fn)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")

    def grad_fn(g):
        return (g.T,)

    return Tensor._result(x.data.T.copy(), (x,), "transpose", grad_fn)


def sum_(x, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor._result(out, (x,), "sum", grad_fn)


def mean(x, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / count)


def softmax_rows(x) -> Tensor:
    """按行softmax，先减去行最大值"""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor._result(out, (x,), "softmax_rows", grad_fn)


def l2_norm(x) -> Tensor:
    """L2范数；零输入处的次梯度取零向量"""
    x = as_tensor(x)
    r = float(np.sqrt(np.sum(x.data * x.data)))

    def grad_fn(g):
        if r == 0.0:
            return (np.zeros_like(x.data),)
        return (g * x.data / r,)

    return Tensor._result(np.asarray(r), (x,), "l2_norm", grad_fn)


def batch_stats(x) -> Tuple[Tensor, Tensor]:
    """逐维均值和有偏方差 (除以 n)"""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"batch_stats expects an n×d batch, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise InsufficientBatchError(f"batch statistics need n >= 2 samples, got {n}")
    mu = x.data.mean(axis=0)
    centered = x.data - mu
    var = (centered * centered).mean(axis=0)

    def mean_grad(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    def var_grad(g):
        # Σ(x - μ) = 0，均值项的贡献抵消
        return (2.0 * centered * g / n,)

    return (
        Tensor._result(mu, (x,), "batch_mean", mean_grad),
        Tensor._result(var, (x,), "batch_var", var_grad),
    )


class ComputeGraph:
    """从输出节点可达的计算图，按创建顺序排列"""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = sorted(nodes, key=lambda t: t._order)

    @classmethod
    def from_output(cls, root: Tensor) -> "ComputeGraph":
        seen = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        return cls(list(seen.values()))

    def __len__(self):
        return len(self.nodes)

    def reverse_order(self):
        return reversed(self.nodes)


def backward(loss: Tensor) -> None:
    """反向传播，梯度累加到所有 requires_grad 的叶子节点"""
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got rank {loss.ndim} shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = ComputeGraph.from_output(loss)
    grads = {id(loss): np.ones(())}
    for node in graph.reverse_order():
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._grad_fn(g)):
            if parent.requires_grad and parent_grad is not None:
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def check_gradients(
    f: Callable[[Union[Tensor, Sequence[Tensor]]], Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-5,
) -> float:
    """中心差分与反向传播比较，返回最大相对误差

    相对误差定义为 |a - n| / max(1, |a|, |n|)，步长 eps * max(1, |x_i|)。
    f 必须是确定性的（随机掩码等需要事先冻结）。
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    leaves = [x] if isinstance(x, Tensor) else list(x)
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.zero_grad()

    backward(f(x))
    analytic = [leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    worst = 0.0
    with no_grad():
        for leaf, grad in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                step = eps * max(1.0, abs(original))
                flat[i] = original + step
                f_plus = float(f(x).data)
                flat[i] = original - step
                f_minus = float(f(x).data)
                flat[i] = original
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = float(grad.reshape(-1)[i])
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    for leaf in leaves:
        leaf.zero_grad()
    return worst


def _weighted_stats_sum(x: Tensor) -> Tensor:
    mu, var = batch_stats(x)
    return (mu * 2.0).sum() + (var * 3.0).sum()


def test_gradient_integrity(trials: int = 20, seed: int = 0):
    """逐个算子的有限差分检查"""
    print("🧪 测试算子梯度...")
    rng = np.random.default_rng(seed)

    checks = {
        "matmul": lambda: check_gradients(
            lambda ts: (ts[0] @ ts[1]).sum(), [parameter(rng.normal(size=(3, 4))), parameter(rng.normal(size=(4, 2)))]
        ),
        "softmax_rows": lambda: check_gradients(
            lambda t: (softmax_rows(t) * constant(w)).sum(), parameter(rng.normal(size=(3, 5)))
        ),
        "l2_norm": lambda: check_gradients(lambda t: l2_norm(t), parameter(rng.normal(size=(6,)))),
        "sigmoid": lambda: check_gradients(lambda t: sigmoid(t).sum(), parameter(rng.normal(size=(4,)))),
        "exp_log": lambda: check_gradients(lambda t: log(exp(t) + 1.0).sum(), parameter(rng.normal(size=(4,)))),
        "batch_stats": lambda: check_gradients(
            lambda t: _weighted_stats_sum(t), parameter(rng.normal(size=(5, 3)))
        ),
    }
    for name, run in checks.items():
        worst = 0.0
        for _ in range(trials):
            w = rng.normal(size=(3, 5))
            worst = max(worst, run())
        status = "✅" if worst <= 1e-6 else "❌"
        print(f"   {status} {name}: max rel err {worst:.2e}")
        assert worst <= 1e-6, f"{name} gradient mismatch {worst}"

    print("✅ 算子梯度测试通过")
