"""
实验编排
单源训练（干净 NLL + SDIR 路径 NLL + KL(P_model ‖ P_ent)）、跨域评估、
消融、α/γ 网格和轮换源域实验
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config import config_hash, with_changes
from dataio import default_benchmark, load_benchmark, sample_batch_patches
from errors import (
    ConfigError,
    InsufficientBatchError,
    NumericError,
    OutputError,
    ParameterError,
    UndefinedMetricError,
)
from fusion import (
    BackboneParams,
    cade_state,
    entanglement_kl,
    forward,
    predict_hazards,
    save_checkpoint,
    serialize_checkpoint,
    text_hash,
)
from models import (
    CellStat,
    EpochLog,
    EvaluationResult,
    ExperimentConfig,
    ForwardMode,
    KMCurve,
    ModalityBatch,
    ResultTable,
    RunReport,
    TrainingLog,
)
from optim import create_optimizer
from seeding import derive_rng
from survmetrics import (
    concordance_index,
    discrete_nll,
    fit_bin_edges,
    km_estimator,
    median_risk_split,
    risk_scores,
    with_bins,
)
from tensorcore import Tensor, backward


logger = logging.getLogger(__name__)

KL_TOLERANCE = 1e-12
ABLATION_ROWS = ("backbone", "+SDIR", "+CADE", "+SDIR+CADE")
AVERAGE_COLUMN = "average"


@dataclass(eq=False)
class TrainedModel:
    params: BackboneParams
    bin_edges: np.ndarray
    log: TrainingLog

    @property
    def checkpoint_hash(self) -> str:
        return self.log.checkpoint_hash


def ensure_output_dir(path) -> Path:
    """在任何训练开始前检查输出目录可写"""
    out = Path(path)
    marker = out / ".write_check"
    try:
        out.mkdir(parents=True, exist_ok=True)
        marker.write_text("", encoding="utf-8")
        marker.unlink()
    except OSError as e:
        raise OutputError(f"output directory {out} is not writable: {e}") from e
    return out


def load_datasets(config: ExperimentConfig) -> Dict[str, ModalityBatch]:
    """从 data_dir 读取，或在内存中生成默认合成基准"""
    if config.data_dir:
        return load_benchmark(config.data_dir, config.all_domains)
    datasets = default_benchmark(config.benchmark_domains, config.benchmark_samples, config.benchmark_seed)
    missing = [d for d in config.all_domains if d not in datasets]
    if missing:
        raise ConfigError(f"domains {missing} are not part of the {config.benchmark_domains}-domain benchmark")
    return datasets


def make_batches(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    """按顺序切分小批次；不足 2 个样本的尾批并入前一批"""
    if order.shape[0] < 2:
        raise InsufficientBatchError(f"training needs at least 2 samples, got {order.shape[0]}")
    batches = [order[i : i + batch_size] for i in range(0, order.shape[0], batch_size)]
    if len(batches) > 1 and batches[-1].shape[0] < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def training_step(
    batch: ModalityBatch, params: BackboneParams, config: ExperimentConfig, seed: int, epoch: int, step: int
) -> Tuple[Tensor, Dict[str, float]]:
    """构建一个小批次的损失；返回 (总损失, 各项数值)"""
    eps = config.variance_eps
    clean = forward(batch, params, ForwardMode.CLEAN)
    total = clean_nll = discrete_nll(clean.hazards, batch.labels)
    terms = {"clean_nll": clean_nll.item(), "sdir_nll": 0.0, "kl": 0.0}

    if config.sdir_on:
        sdir = forward(
            batch,
            params,
            ForwardMode.SDIR,
            alpha=config.alpha,
            rng=derive_rng(seed, "sdir", epoch, step),
            sdir_scope=config.sdir_modalities,
        )
        sdir_nll = discrete_nll(sdir.hazards, batch.labels)
        total = total + sdir_nll
        terms["sdir_nll"] = sdir_nll.item()

    if config.cade_on:
        state = cade_state(
            clean.latents,
            config.kernel,
            derive_rng(seed, "cade", epoch, step),
            eps,
            relative_floor=config.kl_relative_floor,
        )
        kl = entanglement_kl(clean.latents, state, eps)
        total = total + kl
        kl_value = kl.item()
        if kl_value < -KL_TOLERANCE:
            raise AssertionError(f"negative KL divergence {kl_value:.3e} at epoch {epoch} step {step}")
        terms["kl"] = max(kl_value, 0.0)

    terms["total"] = total.item()
    if not all(np.isfinite(v) for v in terms.values()):
        raise NumericError(f"non-finite loss at epoch {epoch} step {step}: {terms}", terms)
    return total, terms


def train(
    config: ExperimentConfig, source: ModalityBatch, seed: int, progress: bool = False
) -> TrainedModel:
    """单源训练；给定 (config, seed) 完全确定"""
    params = BackboneParams.initialize(
        source.patch_dim,
        source.pathway_dim,
        config.hidden_dim,
        config.latent_dim,
        config.bins,
        derive_rng(seed, "init"),
        config.learn_anchor,
    )
    edges = fit_bin_edges(source.times, source.events, config.bins)
    labelled = source.with_labels(with_bins(source.labels, edges))
    optimizer = create_optimizer(config.optimizer, params.parameters(), config.learning_rate, config.grad_clip)
    chash = config_hash(config)
    log = TrainingLog(seed=seed, config_hash=chash)

    logger.info(
        f"Training on {source.domain_id} (n={source.n_samples}) seed={seed} "
        f"sdir={config.sdir_on} cade={config.cade_on} config={chash}"
    )
    epochs = tqdm(range(1, config.epochs + 1), desc=f"seed {seed}", disable=not progress, leave=False)
    for epoch in epochs:
        order = derive_rng(seed, "shuffle", epoch).permutation(source.n_samples)
        sums = {"clean_nll": 0.0, "sdir_nll": 0.0, "kl": 0.0, "total": 0.0}
        batches = make_batches(order, config.batch_size)
        for step, indices in enumerate(batches):
            batch = sample_batch_patches(
                labelled.subset(indices), config.n_train_patches, derive_rng(seed, "patches", epoch, step)
            )
            loss, terms = training_step(batch, params, config, seed, epoch, step)
            backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            for key in sums:
                sums[key] += terms[key]
            logger.debug(f"epoch {epoch} step {step}: {terms}")

        steps = len(batches)
        entry = EpochLog(
            epoch=epoch,
            clean_nll=sums["clean_nll"] / steps,
            sdir_nll=sums["sdir_nll"] / steps,
            kl=sums["kl"] / steps,
            total=sums["total"] / steps,
            steps=steps,
        )
        log.epochs.append(entry)
        epochs.set_postfix(loss=f"{entry.total:.4f}")
        logger.info(
            f"epoch {epoch}/{config.epochs}: total={entry.total:.4f} clean={entry.clean_nll:.4f} "
            f"sdir={entry.sdir_nll:.4f} kl={entry.kl:.4f}"
        )

    log.checkpoint_hash = text_hash(serialize_checkpoint(params, chash))
    return TrainedModel(params=params, bin_edges=edges, log=log)


def _group_curve(times: np.ndarray, events: np.ndarray, indices: np.ndarray) -> KMCurve:
    if indices.size == 0:
        empty = np.zeros(0)
        return KMCurve(times=empty, survival=empty, at_risk=empty.astype(np.int64), deaths=empty.astype(np.int64))
    return km_estimator((times[indices], events[indices]))


def safe_cindex(risks: np.ndarray, times: np.ndarray, events: np.ndarray, label: str) -> Optional[float]:
    """无可比较对时记为缺失，而不是 0"""
    try:
        return concordance_index(risks, (times, events))
    except UndefinedMetricError as e:
        logger.warning(f"C-index undefined for {label}: {e}")
        return None


def evaluate_risks(domain_id: str, risks: np.ndarray, times: np.ndarray, events: np.ndarray) -> EvaluationResult:
    """C-index + 中位数分组 + 每组 KM 曲线"""
    low, high = median_risk_split(risks)
    return EvaluationResult(
        domain_id=domain_id,
        c_index=safe_cindex(risks, times, events, domain_id),
        risks=risks,
        times=times,
        events=events,
        low_group=low,
        high_group=high,
        km_low=_group_curve(times, events, low),
        km_high=_group_curve(times, events, high),
    )


def evaluate(params: BackboneParams, dataset: ModalityBatch) -> EvaluationResult:
    """干净前向、全部 patch"""
    risks = risk_scores(predict_hazards(dataset, params))
    return evaluate_risks(dataset.domain_id, risks, dataset.times, dataset.events)


def pooled_cindex(results: Sequence[EvaluationResult]) -> Optional[float]:
    """所有目标域合并后的 C-index"""
    risks = np.concatenate([r.risks for r in results])
    times = np.concatenate([r.times for r in results])
    events = np.concatenate([r.events for r in results])
    return safe_cindex(risks, times, events, "pooled targets")


def new_report(config: ExperimentConfig, label: str, seeds: List[int]) -> RunReport:
    return RunReport(
        label=label,
        config_hash=config_hash(config),
        source_domain=config.source_domain,
        target_domains=list(config.target_domains),
        seeds=list(seeds),
        target_cindex={d: [] for d in config.target_domains},
    )


def record_evaluations(
    report: RunReport, seed: int, evaluations: Dict[str, EvaluationResult], checkpoint: Optional[str] = None
):
    """把一个种子的评估结果追加到报告中"""
    report.source_cindex.append(evaluations[report.source_domain].c_index)
    for d in report.target_domains:
        report.target_cindex[d].append(evaluations[d].c_index)
    report.pooled_cindex.append(pooled_cindex([evaluations[d] for d in report.target_domains]))
    report.evaluations[seed] = evaluations
    if checkpoint is not None:
        report.checkpoint_hashes[seed] = checkpoint


def evaluate_checkpoint(
    config: ExperimentConfig,
    params: BackboneParams,
    datasets: Optional[Dict[str, ModalityBatch]] = None,
    seed: int = 0,
    checkpoint: Optional[str] = None,
) -> RunReport:
    """对已保存的参数做源域和目标域评估，不训练"""
    datasets = datasets if datasets is not None else load_datasets(config)
    missing = [d for d in config.all_domains if d not in datasets]
    if missing:
        raise ConfigError(f"no data for domains {missing}")
    report = new_report(config, "evaluate", [seed])
    record_evaluations(report, seed, {d: evaluate(params, datasets[d]) for d in config.all_domains}, checkpoint)
    return report


def run_experiment(
    config: ExperimentConfig,
    datasets: Optional[Dict[str, ModalityBatch]] = None,
    label: str = "run",
    checkpoint_dir: Optional[Path] = None,
    progress: bool = False,
) -> RunReport:
    """每个种子: 源域训练 → 源域和各目标域评估"""
    datasets = datasets if datasets is not None else load_datasets(config)
    missing = [d for d in config.all_domains if d not in datasets]
    if missing:
        raise ConfigError(f"no data for domains {missing}")
    chash = config_hash(config)
    report = new_report(config, label, list(config.seeds))
    started = time.perf_counter()
    for seed in config.seeds:
        model = train(config, datasets[config.source_domain], seed, progress=progress)
        if checkpoint_dir is not None:
            save_checkpoint(model.params, Path(checkpoint_dir) / f"seed_{seed}.json", chash)
        evaluations = {d: evaluate(model.params, datasets[d]) for d in config.all_domains}

        record_evaluations(report, seed, evaluations, model.checkpoint_hash)
        report.loss_curves[seed] = model.log.epochs
        logger.info(
            f"[{label}] seed {seed}: source C={evaluations[config.source_domain].c_index} "
            f"targets {[evaluations[d].c_index for d in config.target_domains]}"
        )
    report.wall_clock = time.perf_counter() - started
    logger.info(f"[{label}] finished {len(config.seeds)} seeds in {report.wall_clock:.1f}s")
    return report


def metric_columns(config: ExperimentConfig) -> List[str]:
    return list(config.target_domains) + [AVERAGE_COLUMN]


def _fill_row(table: ResultTable, row: str, report: RunReport):
    for d in report.target_domains:
        table.cells[(row, d)] = report.target_stat(d)
    table.cells[(row, AVERAGE_COLUMN)] = report.average_stat()


def ablation_configs(config: ExperimentConfig) -> Dict[str, ExperimentConfig]:
    return {
        "backbone": with_changes(config, sdir_on=False, cade_on=False),
        "+SDIR": with_changes(config, sdir_on=True, cade_on=False),
        "+CADE": with_changes(config, sdir_on=False, cade_on=True),
        "+SDIR+CADE": with_changes(config, sdir_on=True, cade_on=True),
    }


def run_ablation(
    config: ExperimentConfig, datasets: Optional[Dict[str, ModalityBatch]] = None, progress: bool = False
) -> Tuple[ResultTable, Dict[str, RunReport]]:
    """四行: backbone, +SDIR, +CADE, +SDIR+CADE"""
    datasets = datasets if datasets is not None else load_datasets(config)
    table = ResultTable(
        title="Ablation study on each component",
        row_header="variant",
        row_labels=list(ABLATION_ROWS),
        column_labels=metric_columns(config),
    )
    reports = {}
    for row, variant in ablation_configs(config).items():
        reports[row] = run_experiment(variant, datasets, label=row, progress=progress)
        _fill_row(table, row, reports[row])
    return table, reports


def _check_grid_values(name: str, values: Sequence[float], low_open: bool):
    if not values:
        raise ParameterError(f"{name} grid must not be empty")
    for v in values:
        ok = (0.0 < v < 1.0) if low_open else (0.0 <= v < 1.0)
        if not ok:
            raise ParameterError(f"{name}={v} is outside its valid range")


def run_grid(
    config: ExperimentConfig,
    alphas: Sequence[float],
    gammas: Sequence[float],
    datasets: Optional[Dict[str, ModalityBatch]] = None,
    progress: bool = False,
) -> Tuple[ResultTable, ResultTable, Dict[str, RunReport]]:
    """α 扫描（γ 固定）和 γ 扫描（α 固定），两个模块都开启；同时返回每个格子的 RunReport"""
    _check_grid_values("alpha", alphas, low_open=False)
    _check_grid_values("gamma", gammas, low_open=True)
    datasets = datasets if datasets is not None else load_datasets(config)
    columns = metric_columns(config)
    reports: Dict[str, RunReport] = {}

    alpha_table = ResultTable(
        title=f"alpha sweep (gamma fixed at {config.grid_fixed_gamma})",
        row_header="alpha",
        row_labels=[f"{a:g}" for a in alphas],
        column_labels=columns,
    )
    for a, row in zip(alphas, alpha_table.row_labels):
        variant = with_changes(config, sdir_on=True, cade_on=True, alpha=float(a), gamma=config.grid_fixed_gamma)
        label = f"alpha={row}"
        reports[label] = run_experiment(variant, datasets, label=label, progress=progress)
        _fill_row(alpha_table, row, reports[label])

    gamma_table = ResultTable(
        title=f"gamma sweep (alpha fixed at {config.grid_fixed_alpha})",
        row_header="gamma",
        row_labels=[f"{g:g}" for g in gammas],
        column_labels=columns,
    )
    for g, row in zip(gammas, gamma_table.row_labels):
        variant = with_changes(config, sdir_on=True, cade_on=True, alpha=config.grid_fixed_alpha, gamma=float(g))
        label = f"gamma={row}"
        reports[label] = run_experiment(variant, datasets, label=label, progress=progress)
        _fill_row(gamma_table, row, reports[label])

    return alpha_table, gamma_table, reports


def run_rotation(
    config: ExperimentConfig, datasets: Optional[Dict[str, ModalityBatch]] = None, progress: bool = False
) -> Tuple[ResultTable, Dict[str, RunReport]]:
    """每个域轮流作为源域，其余域作为目标域"""
    datasets = datasets if datasets is not None else load_datasets(config)
    domains = sorted(datasets)
    if len(domains) < 2:
        raise ConfigError("rotation needs at least two domains")
    table = ResultTable(
        title="Leave-one-source rotation",
        row_header="source",
        row_labels=domains + [AVERAGE_COLUMN],
        column_labels=["source", "pooled", AVERAGE_COLUMN],
    )
    reports = {}
    for source in domains:
        variant = with_changes(config, source_domain=source, target_domains=tuple(d for d in domains if d != source))
        report = run_experiment(variant, datasets, label=f"source={source}", progress=progress)
        reports[source] = report
        table.cells[(source, "source")] = CellStat.from_values(report.source_cindex)
        table.cells[(source, "pooled")] = CellStat.from_values(report.pooled_cindex)
        table.cells[(source, AVERAGE_COLUMN)] = report.average_stat()

    for column in table.column_labels:
        means = [table.cells[(s, column)].mean for s in domains]
        table.cells[(AVERAGE_COLUMN, column)] = CellStat.from_values(means)
    return table, reports
