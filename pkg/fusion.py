"""
多模态生存预测骨干网络
模态编码器 + 共享潜空间投影 + 通路→patch 交叉注意力 + 离散时间生存头

同一批次的 patch tokens 按样本堆叠成 (Σp)×d 矩阵，基因 tokens 堆叠成 (n·q)×d；
样本之间用块对角掩码隔离。
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from cade import (
    block_product,
    compose_statistics,
    draw_kernel_t,
    entangle,
    fit_modality_stats,
    gaussian_kl_tensor,
    relative_variance_floor,
    whiten,
)
from config import TOOL_STAMP
from errors import OutputError, ParameterError, SchemaError, ShapeError
from models import (
    DEFAULT_VARIANCE_EPS,
    ForwardMode,
    GaussianStats,
    KernelMode,
    KernelSpec,
    ModalityBatch,
    SdirScope,
    SparsityMask,
    SurvivalRecord,
)
from sdir import DiracResponse, apply_mask, dirac_response, draw_mask, validate_alpha
from survmetrics import discrete_nll
from tensorcore import (
    Tensor,
    batch_stats,
    check_gradients,
    concat,
    constant,
    no_grad,
    parameter,
    relu,
    sigmoid,
    softmax_rows,
)


logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "survdg-checkpoint"
CHECKPOINT_VERSION = 1
MASKED_SCORE = -1e30

ATTENTION_MAPS = ("wq", "wk", "wv", "wo")


@dataclass(eq=False)
class BackboneParams:
    """全部可训练参数；weights 的键顺序固定，决定检查点和优化器的遍历顺序"""

    weights: Dict[str, Tensor]
    dirac_image: DiracResponse
    dirac_gene: DiracResponse
    patch_dim: int
    pathway_dim: int
    hidden_dim: int
    latent_dim: int
    bins: int

    @classmethod
    def initialize(
        cls,
        patch_dim: int,
        pathway_dim: int,
        hidden_dim: int,
        latent_dim: int,
        bins: int,
        rng: np.random.Generator,
        learn_anchor: bool = True,
    ) -> "BackboneParams":
        if bins < 2:
            raise ShapeError(f"survival head needs B >= 2 bins, got {bins}")
        weights: Dict[str, Tensor] = {}

        def dense(name: str, fan_in: int, fan_out: int, gain: float = 1.0):
            weights[f"{name}.w"] = parameter(rng.normal(size=(fan_in, fan_out)) * gain / np.sqrt(fan_in))
            weights[f"{name}.b"] = parameter(np.zeros((1, fan_out)))

        for modality, width in (("image", patch_dim), ("gene", pathway_dim)):
            dense(f"{modality}.enc1", width, hidden_dim, np.sqrt(2.0))
            dense(f"{modality}.enc2", hidden_dim, hidden_dim, np.sqrt(2.0))
            dense(f"{modality}.proj", hidden_dim, latent_dim)
        for name in ATTENTION_MAPS:
            weights[f"attn.{name}"] = parameter(rng.normal(size=(latent_dim, latent_dim)) / np.sqrt(latent_dim))
        dense("head", latent_dim, bins)

        return cls(
            weights=weights,
            dirac_image=DiracResponse.initialize(latent_dim, rng, learn_anchor),
            dirac_gene=DiracResponse.initialize(latent_dim, rng, learn_anchor),
            patch_dim=patch_dim,
            pathway_dim=pathway_dim,
            hidden_dim=hidden_dim,
            latent_dim=latent_dim,
            bins=bins,
        )

    def named_tensors(self) -> Dict[str, Tensor]:
        named = dict(self.weights)
        for prefix, dr in (("dirac_image", self.dirac_image), ("dirac_gene", self.dirac_gene)):
            named[f"{prefix}.phi"] = dr.phi_weights
            named[f"{prefix}.anchor"] = dr.anchor
        return named

    def parameters(self) -> List[Tensor]:
        return [t for t in self.named_tensors().values() if t.requires_grad]

    def zero_grad(self):
        for t in self.named_tensors().values():
            t.zero_grad()

    @property
    def learn_anchor(self) -> bool:
        return self.dirac_image.anchor.requires_grad


@dataclass(eq=False)
class EncodedBatch:
    image_tokens: Tensor
    gene_tokens: Tensor
    pooled_image: Tensor
    pooled_gene: Tensor
    patch_counts: List[int]
    pathways: int

    @property
    def n_samples(self) -> int:
        return len(self.patch_counts)


@dataclass(eq=False)
class CadeState:
    """一次 CADE 前向用到的统计量（全部视为常数）；floor 是模态统计量和 P_model 的方差下限"""

    joint: GaussianStats
    image_stats: GaussianStats
    gene_stats: GaussianStats
    composed: GaussianStats
    kernel_t: Optional[float]
    floor: float = DEFAULT_VARIANCE_EPS

    @property
    def entangled(self) -> GaussianStats:
        return block_product(self.composed)


@dataclass(eq=False)
class ForwardResult:
    hazards: Tensor
    logits: Tensor
    latents: Tensor
    masks: Dict[str, List[SparsityMask]] = field(default_factory=dict)
    cade: Optional[CadeState] = None
    attention: Optional[List[np.ndarray]] = None


def _pool_matrix(counts: List[int]) -> np.ndarray:
    matrix = np.zeros((len(counts), int(sum(counts))))
    start = 0
    for i, c in enumerate(counts):
        matrix[i, start : start + c] = 1.0 / c
        start += c
    return matrix


def _spread_matrix(counts: List[int]) -> np.ndarray:
    return (_pool_matrix(counts) > 0).astype(np.float64).T


def _attention_mask(patch_counts: List[int], pathways: int) -> np.ndarray:
    mask = np.full((len(patch_counts) * pathways, int(sum(patch_counts))), MASKED_SCORE)
    start = 0
    for i, c in enumerate(patch_counts):
        mask[i * pathways : (i + 1) * pathways, start : start + c] = 0.0
        start += c
    return mask


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + constant(np.ones((x.shape[0], 1))) @ b


def modality_encoder(params: BackboneParams, modality: str):
    """返回 (编码器, 投影器) 两个可调用对象"""
    w = params.weights

    def enc(x: Tensor) -> Tensor:
        h = relu(linear(x, w[f"{modality}.enc1.w"], w[f"{modality}.enc1.b"]))
        return relu(linear(h, w[f"{modality}.enc2.w"], w[f"{modality}.enc2.b"]))

    def proj(h: Tensor) -> Tensor:
        return linear(h, w[f"{modality}.proj.w"], w[f"{modality}.proj.b"])

    return enc, proj


def encode_project(batch: ModalityBatch, params: BackboneParams) -> EncodedBatch:
    """逐 token 的 MLP 编码 + 线性投影；池化向量为 token 均值"""
    if batch.patch_dim != params.patch_dim or batch.pathway_dim != params.pathway_dim:
        raise ShapeError(
            f"batch feature widths (patch {batch.patch_dim}, pathway {batch.pathway_dim}) do not match "
            f"parameters (patch {params.patch_dim}, pathway {params.pathway_dim})"
        )
    counts = [int(t.shape[0]) for t in batch.patch_tokens]
    n, q, fg = batch.pathway_tokens.shape

    image_enc, image_proj = modality_encoder(params, "image")
    gene_enc, gene_proj = modality_encoder(params, "gene")
    image_tokens = image_proj(image_enc(constant(np.vstack(batch.patch_tokens))))
    gene_tokens = gene_proj(gene_enc(constant(batch.pathway_tokens.reshape(n * q, fg))))

    return EncodedBatch(
        image_tokens=image_tokens,
        gene_tokens=gene_tokens,
        pooled_image=constant(_pool_matrix(counts)) @ image_tokens,
        pooled_gene=constant(_pool_matrix([q] * n)) @ gene_tokens,
        patch_counts=counts,
        pathways=q,
    )


def cross_attention(
    gene_tokens: Tensor,
    image_tokens: Tensor,
    params: BackboneParams,
    patch_counts: List[int],
    pathways: int,
    return_weights: bool = False,
):
    """通路 tokens 作为 query，patch tokens 作为 key/value；缩放点积 + 残差"""
    d = params.latent_dim
    if gene_tokens.shape[1] != d or image_tokens.shape[1] != d:
        raise ShapeError(f"token widths {gene_tokens.shape[1]}/{image_tokens.shape[1]} differ from latent width {d}")
    w = params.weights
    queries = gene_tokens @ w["attn.wq"]
    keys = image_tokens @ w["attn.wk"]
    values = image_tokens @ w["attn.wv"]
    scores = (queries @ keys.T) * (1.0 / np.sqrt(d)) + constant(_attention_mask(patch_counts, pathways))
    attention = softmax_rows(scores)
    fused = gene_tokens + (attention @ values) @ w["attn.wo"]
    if not return_weights:
        return fused

    per_sample = []
    start = 0
    for i, c in enumerate(patch_counts):
        per_sample.append(attention.data[i * pathways : (i + 1) * pathways, start : start + c].copy())
        start += c
    return fused, per_sample


def survival_head(fused_tokens: Tensor, params: BackboneParams, n_samples: int, pathways: int) -> Tensor:
    """融合 tokens 均值池化后线性映射到 B 个 logits"""
    pooled = constant(_pool_matrix([pathways] * n_samples)) @ fused_tokens
    return linear(pooled, params.weights["head.w"], params.weights["head.b"])


def _shift_tokens(tokens: Tensor, counts: List[int], replacement: Tensor, pooled: Tensor) -> Tensor:
    """平移每个样本的全部 tokens，使其均值等于替换后的池化向量"""
    return tokens + constant(_spread_matrix(counts)) @ (replacement - pooled)


def _sdir_rows(
    pooled: Tensor,
    dr: DiracResponse,
    alpha: float,
    rng: Optional[np.random.Generator],
    frozen: Optional[List[SparsityMask]],
) -> Tuple[Tensor, List[SparsityMask]]:
    if frozen is None and rng is None:
        raise ParameterError("sdir path needs either rng or frozen masks")
    rows = []
    masks = []
    for i in range(pooled.shape[0]):
        mask = frozen[i] if frozen is not None else draw_mask(pooled.shape[1], alpha, rng)
        rows.append(dirac_response(apply_mask(pooled[i], mask), dr)[None, :])
        masks.append(mask)
    return concat(rows, axis=0), masks


def cade_state(
    latents: Tensor,
    kernel: KernelSpec,
    rng: Optional[np.random.Generator],
    variance_eps: float = DEFAULT_VARIANCE_EPS,
    kernel_t: Optional[float] = None,
    relative_floor: float = 0.0,
) -> CadeState:
    """由干净潜变量 [z_I; z_G] 得到联合统计量和 CADE 组合分布

    relative_floor > 0 时，模态方差下限随联合方差均值缩放；两个模态尺度相差几个数量级时，
    KL 的方差比和梯度仍然有界，整体缩放潜空间不改变 KL。
    """
    d = latents.shape[1] // 2
    data = latents.data
    joint = fit_modality_stats(data, eps=variance_eps)
    floor = relative_variance_floor(joint, variance_eps, relative_floor)
    image_stats = fit_modality_stats(data[:, :d], eps=floor)
    gene_stats = fit_modality_stats(data[:, d:], eps=floor)
    if kernel_t is None:
        kernel_t = draw_kernel_t(kernel, rng)
    return CadeState(
        joint=joint,
        image_stats=image_stats,
        gene_stats=gene_stats,
        composed=compose_statistics(gene_stats, image_stats, kernel, t=kernel_t),
        kernel_t=kernel_t,
        floor=floor,
    )


def forward(
    batch: ModalityBatch,
    params: BackboneParams,
    mode: ForwardMode = ForwardMode.CLEAN,
    alpha: float = 0.0,
    kernel: Optional[KernelSpec] = None,
    rng: Optional[np.random.Generator] = None,
    sdir_scope: SdirScope = SdirScope.IMAGE,
    variance_eps: float = DEFAULT_VARIANCE_EPS,
    sdir_masks: Optional[Dict[str, List[SparsityMask]]] = None,
    frozen_cade: Optional[CadeState] = None,
    return_attention: bool = False,
) -> ForwardResult:
    """clean / sdir / cade 三种前向；sdir_masks 和 frozen_cade 用于冻结随机性"""
    encoded = encode_project(batch, params)
    n, q, d = encoded.n_samples, encoded.pathways, params.latent_dim
    image_tokens, gene_tokens = encoded.image_tokens, encoded.gene_tokens
    latents = concat([encoded.pooled_image, encoded.pooled_gene], axis=1)
    masks: Dict[str, List[SparsityMask]] = {}
    state = None

    if mode is ForwardMode.SDIR:
        validate_alpha(alpha)
        branches = [("image", encoded.pooled_image, params.dirac_image)]
        if sdir_scope is SdirScope.BOTH:
            branches.append(("gene", encoded.pooled_gene, params.dirac_gene))
        for name, pooled, dr in branches:
            frozen = sdir_masks.get(name) if sdir_masks else None
            replacement, masks[name] = _sdir_rows(pooled, dr, alpha, rng, frozen)
            if name == "image":
                image_tokens = _shift_tokens(image_tokens, encoded.patch_counts, replacement, pooled)
            else:
                gene_tokens = _shift_tokens(gene_tokens, [q] * n, replacement, pooled)

    elif mode is ForwardMode.CADE:
        if kernel is None:
            raise ShapeError("cade mode needs a kernel specification")
        state = frozen_cade or cade_state(latents, kernel, rng, variance_eps)
        z_tilde = whiten(latents, state.joint)
        entangled = entangle(z_tilde, state.composed)
        image_tokens = _shift_tokens(image_tokens, encoded.patch_counts, entangled[:, :d], encoded.pooled_image)
        gene_tokens = _shift_tokens(gene_tokens, [q] * n, entangled[:, d:], encoded.pooled_gene)

    attention = None
    if return_attention:
        fused, attention = cross_attention(gene_tokens, image_tokens, params, encoded.patch_counts, q, True)
    else:
        fused = cross_attention(gene_tokens, image_tokens, params, encoded.patch_counts, q)
    logits = survival_head(fused, params, n, q)
    return ForwardResult(
        hazards=sigmoid(logits),
        logits=logits,
        latents=latents,
        masks=masks,
        cade=state,
        attention=attention,
    )


def model_distribution(latents: Tensor, variance_eps: float = DEFAULT_VARIANCE_EPS) -> Tuple[Tensor, Tensor]:
    """P_model: 干净潜变量的批统计量，方差以 eps + relu(var - eps) 截断"""
    mu, var = batch_stats(latents)
    return mu, relu(var - variance_eps) + variance_eps


def entanglement_kl(latents: Tensor, state: CadeState, variance_eps: float = DEFAULT_VARIANCE_EPS) -> Tensor:
    """KL(P_model ‖ P_ent)，P_ent 为常数；P_model 与模态统计量使用同一方差下限"""
    mu, var = model_distribution(latents, max(variance_eps, state.floor))
    return gaussian_kl_tensor(mu, var, state.entangled)


def predict_hazards(batch: ModalityBatch, params: BackboneParams, chunk_size: int = 64) -> np.ndarray:
    """评估用：干净前向、全部 patch、分块计算"""
    outputs = []
    with no_grad():
        for start in range(0, batch.n_samples, chunk_size):
            chunk = batch.subset(range(start, min(start + chunk_size, batch.n_samples)))
            outputs.append(forward(chunk, params).hazards.data)
    return np.vstack(outputs)


# ---------- 检查点 ----------


def serialize_checkpoint(params: BackboneParams, config_hash: str) -> str:
    """检查点的 JSON 文本；float 使用 repr，可以精确往返"""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stamp": TOOL_STAMP,
        "config_hash": config_hash,
        "architecture": {
            "patch_dim": params.patch_dim,
            "pathway_dim": params.pathway_dim,
            "hidden_dim": params.hidden_dim,
            "latent_dim": params.latent_dim,
            "bins": params.bins,
            "learn_anchor": params.learn_anchor,
        },
        "tensors": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in params.named_tensors().items()
        },
    }
    return json.dumps(payload, sort_keys=True) + "\n"


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_checkpoint(params: BackboneParams, path, config_hash: str) -> str:
    """写出 JSON 检查点，返回文件内容的 sha256"""
    text = serialize_checkpoint(params, config_hash)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise OutputError(f"cannot write checkpoint {path}: {e}") from e
    return text_hash(text)


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_checkpoint(path) -> Tuple[BackboneParams, str]:
    """读取检查点，返回 (参数, config_hash)"""
    path = Path(path)
    if not path.exists():
        raise SchemaError(path, "file", "missing")
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(path, "json", str(e)) from e
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(path, "format", f"not a version {CHECKPOINT_VERSION} checkpoint")

    arch = payload["architecture"]
    params = BackboneParams.initialize(
        arch["patch_dim"],
        arch["pathway_dim"],
        arch["hidden_dim"],
        arch["latent_dim"],
        arch["bins"],
        np.random.default_rng(0),
        arch["learn_anchor"],
    )
    stored = payload["tensors"]
    for name, tensor in params.named_tensors().items():
        if name not in stored:
            raise SchemaError(path, name, "missing tensor")
        shape = tuple(stored[name]["shape"])
        if shape != tensor.shape:
            raise SchemaError(path, name, f"shape {shape} does not match architecture {tensor.shape}")
        tensor.data[...] = np.asarray(stored[name]["data"], dtype=np.float64).reshape(shape)
    logger.info(f"Loaded checkpoint {path} (config {payload['config_hash']})")
    return params, payload["config_hash"]


# ---------- 自检 ----------


def tiny_batch(
    rng: np.random.Generator, n: int = 2, patches: int = 3, pathways: int = 2, patch_dim: int = 5, pathway_dim: int = 3
) -> ModalityBatch:
    """梯度检查用的小批次，标签已分箱（B=4）；第 i 个样本有 patches + i 个 patch，让块掩码处理不等长的包"""
    labels = [SurvivalRecord(time=1.0 + i, event=(i % 2 == 0), bin=(i + 1) % 4) for i in range(n)]
    return ModalityBatch(
        patch_tokens=[rng.normal(size=(patches + i, patch_dim)) for i in range(n)],
        pathway_tokens=rng.normal(size=(n, pathways, pathway_dim)),
        labels=labels,
        domain_id="tiny",
    )


def full_objective(
    batch: ModalityBatch,
    params: BackboneParams,
    alpha: float,
    kernel: KernelSpec,
    masks: Dict[str, List[SparsityMask]],
    state: CadeState,
    variance_eps: float = DEFAULT_VARIANCE_EPS,
) -> Tensor:
    """干净 NLL + SDIR NLL + CADE 前向 NLL + KL，随机性全部冻结"""
    clean = forward(batch, params, ForwardMode.CLEAN)
    sdir = forward(batch, params, ForwardMode.SDIR, alpha=alpha, sdir_scope=SdirScope.BOTH, sdir_masks=masks)
    cade = forward(batch, params, ForwardMode.CADE, kernel=kernel, frozen_cade=state, variance_eps=variance_eps)
    return (
        discrete_nll(clean.hazards, batch.labels)
        + discrete_nll(sdir.hazards, batch.labels)
        + discrete_nll(cade.hazards, batch.labels)
        + entanglement_kl(clean.latents, state, variance_eps)
    )


def test_full_model_gradients(seed: int = 0, tolerance: float = 1e-4) -> float:
    """整个模型的有限差分梯度检查（n=2, 包大小 3 和 4, q=2, d=4, B=4）"""
    print("🧪 测试整体模型梯度...")
    rng = np.random.default_rng(seed)
    batch = tiny_batch(rng)
    params = BackboneParams.initialize(batch.patch_dim, batch.pathway_dim, 6, 4, 4, rng)
    kernel = KernelSpec(gamma=0.3, mode=KernelMode.STOCHASTIC)
    alpha = 0.5

    with no_grad():
        masks = forward(batch, params, ForwardMode.SDIR, alpha=alpha, rng=rng, sdir_scope=SdirScope.BOTH).masks
        state = forward(batch, params, ForwardMode.CADE, kernel=kernel, rng=rng).cade

    worst = check_gradients(
        lambda _: full_objective(batch, params, alpha, kernel, masks, state), params.parameters()
    )
    print(f"   📊 {len(params.parameters())} tensors, max relative error {worst:.2e}")
    if worst > tolerance:
        raise AssertionError(f"full-model gradient error {worst:.3e} exceeds {tolerance:.0e}")
    print("✅ 整体模型梯度测试通过")
    return worst
