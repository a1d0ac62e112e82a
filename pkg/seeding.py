"""
确定性随机数
按 (seed, 路径) 派生互相独立的随机流
"""

import hashlib
from typing import Any

import numpy as np


def derive_seed(seed: int, *path: Any) -> int:
    """由种子和路径派生64位子种子"""
    label = "/".join(str(part) for part in (seed,) + path)
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, *path: Any) -> np.random.Generator:
    """为某个子系统创建独立的随机数生成器"""
    return np.random.default_rng(derive_seed(seed, *path))
