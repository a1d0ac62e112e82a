from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path
from typing import List, Dict, Optional, Any, Tuple

import numpy as np

from errors import ParameterError, ShapeError, NumericError, ConfigError


DEFAULT_VARIANCE_EPS = 1e-5


class ForwardMode(Enum):
    CLEAN = "clean"
    SDIR = "sdir"
    CADE = "cade"


class KernelMode(Enum):
    EXPECTATION = "expectation"
    STOCHASTIC = "stochastic"
    CENTERED = "centered"


class OptimizerKind(Enum):
    SGD = "sgd"
    ADAM = "adam"


class SdirScope(Enum):
    IMAGE = "image"
    BOTH = "both"


@dataclass(eq=False)
class SparsityMask:
    keep_bits: np.ndarray
    alpha: float

    def __post_init__(self):
        self.keep_bits = np.asarray(self.keep_bits, dtype=np.float64)
        if not np.all((self.keep_bits == 0.0) | (self.keep_bits == 1.0)):
            raise ParameterError("keep bits must be 0 or 1")

    @property
    def keep_rate(self) -> float:
        return float(self.keep_bits.mean()) if self.keep_bits.size else 1.0


@dataclass(eq=False)
class GaussianStats:
    """对角高斯统计量 (均值, 方差)，方差在构造时截断到 eps"""

    mean: np.ndarray
    var: np.ndarray
    eps: float = DEFAULT_VARIANCE_EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ParameterError(f"variance floor must be positive, got {self.eps}")
        self.mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        self.var = np.array(self.var, dtype=np.float64).reshape(-1)
        if self.mean.shape != self.var.shape:
            raise ShapeError(f"mean shape {self.mean.shape} != var shape {self.var.shape}")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.var))):
            raise NumericError("Gaussian statistics must be finite")
        self.var = np.maximum(self.var, self.eps)

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    def concat(self, other: "GaussianStats") -> "GaussianStats":
        return GaussianStats(
            mean=np.concatenate([self.mean, other.mean]),
            var=np.concatenate([self.var, other.var]),
            eps=min(self.eps, other.eps),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"mean": self.mean.tolist(), "var": self.var.tolist(), "eps": self.eps}


@dataclass(frozen=True)
class KernelSpec:
    gamma: float = 0.3
    mode: KernelMode = KernelMode.STOCHASTIC
    concentration: float = 10.0
    quadrature_points: int = 64

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ParameterError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.concentration > 0.0:
            raise ParameterError(f"concentration must be positive, got {self.concentration}")
        if self.quadrature_points < 2:
            raise ParameterError(f"quadrature_points must be >= 2, got {self.quadrature_points}")


@dataclass(frozen=True)
class SurvivalRecord:
    time: float
    event: bool
    bin: Optional[int] = None

    def __post_init__(self):
        if not self.time >= 0:
            raise ParameterError(f"survival time must be non-negative, got {self.time}")
        if self.bin is not None and self.bin < 0:
            raise ParameterError(f"bin must be non-negative, got {self.bin}")


@dataclass(eq=False)
class KMCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    deaths: np.ndarray

    def survival_at(self, t: float) -> float:
        """阶梯函数在 t 处的取值"""
        idx = int(np.searchsorted(self.times, t, side="right"))
        return 1.0 if idx == 0 else float(self.survival[idx - 1])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "times": self.times.tolist(),
            "survival": self.survival.tolist(),
            "at_risk": self.at_risk.tolist(),
            "deaths": self.deaths.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "KMCurve":
        return cls(
            times=np.asarray(data["times"], dtype=np.float64),
            survival=np.asarray(data["survival"], dtype=np.float64),
            at_risk=np.asarray(data["at_risk"], dtype=np.int64),
            deaths=np.asarray(data["deaths"], dtype=np.int64),
        )


@dataclass(eq=False)
class ModalityBatch:
    """一批多模态样本: 图像patch tokens、通路tokens和生存标签"""

    patch_tokens: List[np.ndarray]
    pathway_tokens: np.ndarray
    labels: List[SurvivalRecord]
    sample_ids: List[str] = field(default_factory=list)
    domain_id: str = ""
    pathway_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.patch_tokens = [np.asarray(p, dtype=np.float64) for p in self.patch_tokens]
        self.pathway_tokens = np.asarray(self.pathway_tokens, dtype=np.float64)
        n = len(self.labels)
        if len(self.patch_tokens) != n or self.pathway_tokens.shape[0] != n:
            raise ShapeError(
                f"inconsistent sample counts: patches={len(self.patch_tokens)}, "
                f"pathways={self.pathway_tokens.shape[0]}, labels={n}"
            )
        if self.pathway_tokens.ndim != 3 or self.pathway_tokens.shape[1] < 1:
            raise ShapeError(f"pathway tokens must be n×q×f with q >= 1, got {self.pathway_tokens.shape}")
        widths = {p.shape[1] for p in self.patch_tokens if p.ndim == 2}
        for i, p in enumerate(self.patch_tokens):
            if p.ndim != 2 or p.shape[0] < 1:
                raise ShapeError(f"sample {i}: patch tokens must be p×f with p >= 1, got {p.shape}")
            if not np.all(np.isfinite(p)):
                raise NumericError(f"sample {i}: non-finite patch feature")
        if len(widths) > 1:
            raise ShapeError(f"patch feature widths disagree: {sorted(widths)}")
        if not np.all(np.isfinite(self.pathway_tokens)):
            raise NumericError("non-finite pathway feature")
        if not self.sample_ids:
            self.sample_ids = [f"s{i:04d}" for i in range(n)]
        if not self.pathway_names:
            self.pathway_names = [f"pathway_{k:03d}" for k in range(self.pathway_tokens.shape[1])]

    @property
    def n_samples(self) -> int:
        return len(self.labels)

    @property
    def patch_dim(self) -> int:
        return int(self.patch_tokens[0].shape[1]) if self.patch_tokens else 0

    @property
    def pathway_count(self) -> int:
        return int(self.pathway_tokens.shape[1])

    @property
    def pathway_dim(self) -> int:
        return int(self.pathway_tokens.shape[2])

    @property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.labels], dtype=np.float64)

    @property
    def events(self) -> np.ndarray:
        return np.array([r.event for r in self.labels], dtype=bool)

    def subset(self, indices) -> "ModalityBatch":
        indices = [int(i) for i in indices]
        return ModalityBatch(
            patch_tokens=[self.patch_tokens[i] for i in indices],
            pathway_tokens=self.pathway_tokens[indices],
            labels=[self.labels[i] for i in indices],
            sample_ids=[self.sample_ids[i] for i in indices],
            domain_id=self.domain_id,
            pathway_names=list(self.pathway_names),
        )

    def with_patches(self, patch_tokens: List[np.ndarray]) -> "ModalityBatch":
        return ModalityBatch(
            patch_tokens=patch_tokens,
            pathway_tokens=self.pathway_tokens,
            labels=self.labels,
            sample_ids=self.sample_ids,
            domain_id=self.domain_id,
            pathway_names=self.pathway_names,
        )

    def with_labels(self, labels: List[SurvivalRecord]) -> "ModalityBatch":
        return ModalityBatch(
            patch_tokens=self.patch_tokens,
            pathway_tokens=self.pathway_tokens,
            labels=labels,
            sample_ids=self.sample_ids,
            domain_id=self.domain_id,
            pathway_names=self.pathway_names,
        )


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    n_samples: int = 240
    patches_per_sample: int = 16
    pathways: int = 8
    signal_dim: int = 16
    pathway_dim: int = 4
    patch_signal_fraction: float = 0.25
    domain_shift_offset: Tuple[float, ...] = ()
    gene_noise_scale: float = 1.0
    censor_fraction: float = 0.3
    seed: int = 0
    # 跨域共享的信号方向
    world_seed: int = 0
    patch_noise_scale: float = 0.1
    background_scale: float = 1.0
    risk_strength: float = 1.0

    def validate(self):
        if self.n_samples < 1 or self.patches_per_sample < 1 or self.pathways < 1:
            raise ParameterError("n_samples, patches_per_sample and pathways must be >= 1")
        if self.signal_dim < 1 or self.pathway_dim < 1:
            raise ParameterError("feature widths must be >= 1")
        if not 0.0 < self.patch_signal_fraction <= 1.0:
            raise ParameterError(f"patch_signal_fraction must lie in (0, 1], got {self.patch_signal_fraction}")
        if not 0.0 <= self.censor_fraction < 1.0:
            raise ParameterError(f"censor_fraction must lie in [0, 1), got {self.censor_fraction}")
        if self.gene_noise_scale < 0 or self.patch_noise_scale < 0 or self.background_scale < 0:
            raise ParameterError("noise scales must be non-negative")
        if self.domain_shift_offset and len(self.domain_shift_offset) != self.signal_dim:
            raise ParameterError(
                f"domain_shift_offset has length {len(self.domain_shift_offset)}, expected {self.signal_dim}"
            )

    def offset_vector(self) -> np.ndarray:
        if not self.domain_shift_offset:
            return np.zeros(self.signal_dim)
        return np.asarray(self.domain_shift_offset, dtype=np.float64)


@dataclass(frozen=True)
class FeatureFileSchema:
    root: Path
    manifest: str = "manifest.json"
    patches_dir: str = "patches"
    pathways: str = "pathways.csv"
    labels: str = "labels.csv"
    membership: str = "membership.csv"
    version: int = 1

    @property
    def manifest_path(self) -> Path:
        return Path(self.root) / self.manifest

    @property
    def pathways_path(self) -> Path:
        return Path(self.root) / self.pathways

    @property
    def labels_path(self) -> Path:
        return Path(self.root) / self.labels

    @property
    def membership_path(self) -> Path:
        return Path(self.root) / self.membership

    def patch_path(self, sample_id: str) -> Path:
        return Path(self.root) / self.patches_dir / f"{sample_id}.csv"


@dataclass(frozen=True)
class ExperimentConfig:
    source_domain: str = "domain_a"
    target_domains: Tuple[str, ...] = ("domain_b",)
    alpha: float = 0.5
    gamma: float = 0.3
    kernel_mode: KernelMode = KernelMode.STOCHASTIC
    concentration: float = 10.0
    quadrature_points: int = 64
    sdir_on: bool = True
    cade_on: bool = True
    sdir_modalities: SdirScope = SdirScope.IMAGE
    learn_anchor: bool = True
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.1
    optimizer: OptimizerKind = OptimizerKind.SGD
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    latent_dim: int = 8
    hidden_dim: int = 16
    bins: int = 4
    n_train_patches: int = 4096
    variance_eps: float = DEFAULT_VARIANCE_EPS
    kl_relative_floor: float = 0.1
    grad_clip: float = 1.0
    grid_fixed_alpha: float = 0.5
    grid_fixed_gamma: float = 0.5
    data_dir: Optional[str] = None
    benchmark_domains: int = 2
    benchmark_samples: int = 240
    benchmark_seed: int = 7
    output_dir: str = "results"

    def __post_init__(self):
        if not self.source_domain:
            raise ConfigError("exactly one source domain is required")
        if not self.target_domains:
            raise ConfigError("at least one target domain is required")
        if self.source_domain in self.target_domains:
            raise ConfigError(f"source domain {self.source_domain!r} must not be a target")
        if len(set(self.target_domains)) != len(self.target_domains):
            raise ConfigError("target domains must be distinct")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 <= self.grid_fixed_alpha < 1.0 or not 0.0 < self.grid_fixed_gamma < 1.0:
            raise ConfigError("grid fixed values out of range")
        if self.concentration <= 0 or self.quadrature_points < 2:
            raise ConfigError("invalid kernel parameters")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.latent_dim < 1 or self.hidden_dim < 1 or self.bins < 2:
            raise ConfigError("latent_dim, hidden_dim must be >= 1 and bins >= 2")
        if self.n_train_patches < 1:
            raise ConfigError("n_train_patches must be >= 1")
        if self.variance_eps <= 0:
            raise ConfigError("variance_eps must be positive")
        if not 0.0 <= self.kl_relative_floor < 1.0:
            raise ConfigError(f"kl_relative_floor must lie in [0, 1), got {self.kl_relative_floor}")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be >= 0 (0 disables clipping), got {self.grad_clip}")
        if self.benchmark_domains not in (2, 4):
            raise ConfigError("benchmark_domains must be 2 or 4")

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec(
            gamma=self.gamma,
            mode=self.kernel_mode,
            concentration=self.concentration,
            quadrature_points=self.quadrature_points,
        )

    @property
    def all_domains(self) -> List[str]:
        return [self.source_domain] + list(self.target_domains)


@dataclass
class EpochLog:
    epoch: int
    clean_nll: float
    sdir_nll: float
    kl: float
    total: float
    steps: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainingLog:
    seed: int
    config_hash: str
    epochs: List[EpochLog] = field(default_factory=list)
    checkpoint_hash: str = ""


@dataclass(eq=False)
class EvaluationResult:
    domain_id: str
    c_index: Optional[float]
    risks: np.ndarray
    times: np.ndarray
    events: np.ndarray
    low_group: np.ndarray
    high_group: np.ndarray
    km_low: KMCurve
    km_high: KMCurve

    @property
    def n_samples(self) -> int:
        return int(self.risks.shape[0])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "domain_id": self.domain_id,
            "c_index": self.c_index,
            "risks": self.risks.tolist(),
            "times": self.times.tolist(),
            "events": self.events.astype(int).tolist(),
            "low_group": self.low_group.tolist(),
            "high_group": self.high_group.tolist(),
            "km_low": self.km_low.to_dict(),
            "km_high": self.km_high.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvaluationResult":
        return cls(
            domain_id=data["domain_id"],
            c_index=data["c_index"],
            risks=np.asarray(data["risks"], dtype=np.float64),
            times=np.asarray(data["times"], dtype=np.float64),
            events=np.asarray(data["events"], dtype=bool),
            low_group=np.asarray(data["low_group"], dtype=np.int64),
            high_group=np.asarray(data["high_group"], dtype=np.int64),
            km_low=KMCurve.from_dict(data["km_low"]),
            km_high=KMCurve.from_dict(data["km_high"]),
        )


@dataclass(frozen=True)
class CellStat:
    mean: Optional[float]
    std: Optional[float]
    n_seeds: int
    n_missing: int = 0

    @classmethod
    def from_values(cls, values: List[Optional[float]]) -> "CellStat":
        present = [v for v in values if v is not None]
        missing = len(values) - len(present)
        if not present:
            return cls(mean=None, std=None, n_seeds=0, n_missing=missing)
        arr = np.asarray(present, dtype=np.float64)
        return cls(mean=float(arr.mean()), std=float(arr.std()), n_seeds=len(present), n_missing=missing)

    def format(self) -> str:
        if self.mean is None:
            return "missing"
        return f"{self.mean:.4f} ± {self.std:.4f}"


@dataclass
class RunReport:
    label: str
    config_hash: str
    source_domain: str
    target_domains: List[str]
    seeds: List[int]
    source_cindex: List[Optional[float]] = field(default_factory=list)
    target_cindex: Dict[str, List[Optional[float]]] = field(default_factory=dict)
    pooled_cindex: List[Optional[float]] = field(default_factory=list)
    loss_curves: Dict[int, List[EpochLog]] = field(default_factory=dict)
    evaluations: Dict[int, Dict[str, EvaluationResult]] = field(default_factory=dict)
    checkpoint_hashes: Dict[int, str] = field(default_factory=dict)
    wall_clock: float = 0.0

    def target_stat(self, domain_id: str) -> CellStat:
        return CellStat.from_values(self.target_cindex.get(domain_id, []))

    def average_stat(self) -> CellStat:
        """每个种子先对各目标域取平均，再跨种子统计"""
        per_seed = []
        for k in range(len(self.seeds)):
            values = [self.target_cindex[d][k] for d in self.target_domains]
            present = [v for v in values if v is not None]
            per_seed.append(float(np.mean(present)) if present else None)
        return CellStat.from_values(per_seed)

    def to_dict(self) -> Dict[str, Any]:
        # wall_clock 不写入文件
        return {
            "label": self.label,
            "config_hash": self.config_hash,
            "source_domain": self.source_domain,
            "target_domains": list(self.target_domains),
            "seeds": list(self.seeds),
            "source_cindex": list(self.source_cindex),
            "target_cindex": {k: list(v) for k, v in self.target_cindex.items()},
            "pooled_cindex": list(self.pooled_cindex),
            "loss_curves": {str(s): [e.to_dict() for e in logs] for s, logs in self.loss_curves.items()},
            "evaluations": {
                str(s): {d: ev.to_dict() for d, ev in evs.items()} for s, evs in self.evaluations.items()
            },
            "checkpoint_hashes": {str(s): h for s, h in self.checkpoint_hashes.items()},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunReport":
        return cls(
            label=data["label"],
            config_hash=data["config_hash"],
            source_domain=data["source_domain"],
            target_domains=list(data["target_domains"]),
            seeds=[int(s) for s in data["seeds"]],
            source_cindex=list(data["source_cindex"]),
            target_cindex={k: list(v) for k, v in data["target_cindex"].items()},
            pooled_cindex=list(data["pooled_cindex"]),
            loss_curves={int(s): [EpochLog(**e) for e in logs] for s, logs in data["loss_curves"].items()},
            evaluations={
                int(s): {d: EvaluationResult.from_dict(ev) for d, ev in evs.items()}
                for s, evs in data["evaluations"].items()
            },
            checkpoint_hashes={int(s): h for s, h in data.get("checkpoint_hashes", {}).items()},
        )


@dataclass
class ResultTable:
    """消融/网格实验表格: 行 × 指标列，每格为跨种子统计"""

    title: str
    row_header: str
    row_labels: List[str]
    column_labels: List[str]
    cells: Dict[Tuple[str, str], CellStat] = field(default_factory=dict)

    def cell(self, row: str, column: str) -> CellStat:
        return self.cells[(row, column)]
