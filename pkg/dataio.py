"""
合成多模态域偏移数据 + 特征文件读写
"""

import json
import logging
import math
import re
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config import TOOL_STAMP
from errors import DataError, OutputError, ParameterError, SchemaError
from models import DomainSpec, FeatureFileSchema, ModalityBatch, SurvivalRecord
from seeding import derive_rng, derive_seed


logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_TRAIN_PATCHES = 4096
FLOAT_FORMAT = "%.17g"
BENCHMARK_RISK_STRENGTH = 1.5
BENCHMARK_OFFSET_SCALE = 0.5
DOMAIN_IDS = ("domain_a", "domain_b", "domain_c", "domain_d")

_HEADER_RE = re.compile(r"^# schema_version=(\d+) rows=(\d+) cols=(\d+)$")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def signal_patch_count(spec: DomainSpec) -> int:
    """⌈fraction·p⌉，容忍浮点误差"""
    return max(1, math.ceil(spec.patch_signal_fraction * spec.patches_per_sample - 1e-9))


def generate_domain(spec: DomainSpec) -> ModalityBatch:
    """生成一个合成域: 潜在风险 u 同时驱动少数图像patch和(更弱的)通路特征"""
    spec.validate()
    n, p, q = spec.n_samples, spec.patches_per_sample, spec.pathways

    world = derive_rng(spec.world_seed, "world")
    patch_direction = _unit(world.normal(size=spec.signal_dim))
    gene_direction = world.normal(size=(q, spec.pathway_dim))
    gene_direction /= np.linalg.norm(gene_direction, axis=1, keepdims=True)

    label_rng = derive_rng(spec.seed, "labels")
    u = label_rng.normal(size=n)
    event_times = label_rng.exponential(scale=1.0 / np.exp(spec.risk_strength * u))
    observed = event_times.copy()
    events = np.ones(n, dtype=bool)
    n_censored = int(round(spec.censor_fraction * n))
    if n_censored:
        censored = label_rng.choice(n, size=n_censored, replace=False)
        observed[censored] = event_times[censored] * label_rng.uniform(1e-9, 1.0, size=n_censored)
        events[censored] = False

    patch_rng = derive_rng(spec.seed, "patches")
    offset = spec.offset_vector()
    n_signal = signal_patch_count(spec)
    patch_tokens = []
    for i in range(n):
        noise = patch_rng.normal(size=(p, spec.signal_dim))
        positions = patch_rng.permutation(p)[:n_signal]
        tokens = spec.background_scale * noise + offset
        tokens[positions] = u[i] * patch_direction + spec.patch_noise_scale * noise[positions] + offset
        patch_tokens.append(tokens)

    gene_rng = derive_rng(spec.seed, "genes")
    pathway_tokens = u[:, None, None] * gene_direction[None, :, :] + spec.gene_noise_scale * gene_rng.normal(
        size=(n, q, spec.pathway_dim)
    )

    logger.info(
        f"Generated domain {spec.domain_id}: n={n}, p={p}, q={q}, "
        f"{n_signal} signal patches/sample, {int(events.sum())} events"
    )
    return ModalityBatch(
        patch_tokens=patch_tokens,
        pathway_tokens=pathway_tokens,
        labels=[SurvivalRecord(time=float(t), event=bool(e)) for t, e in zip(observed, events)],
        sample_ids=[f"{spec.domain_id}_{i:04d}" for i in range(n)],
        domain_id=spec.domain_id,
    )


def sample_patches(
    tokens: np.ndarray, n_train: int, rng: Optional[np.random.Generator] = None, training: bool = True
) -> np.ndarray:
    """训练时无放回抽取 min(n_train, p) 个patch（保持原顺序）；评估时返回全部"""
    if n_train < 1:
        raise ParameterError(f"n_train must be >= 1, got {n_train}")
    p = tokens.shape[0]
    if not training or p <= n_train:
        return tokens
    if rng is None:
        raise ParameterError("patch sampling needs a random generator")
    return tokens[np.sort(rng.choice(p, size=n_train, replace=False))]


def sample_batch_patches(batch: ModalityBatch, n_train: int, rng: np.random.Generator) -> ModalityBatch:
    return batch.with_patches([sample_patches(t, n_train, rng) for t in batch.patch_tokens])


def benchmark_specs(n_domains: int = 2, n_samples: int = 240, seed: int = 7) -> List[DomainSpec]:
    """只有偏移不同的基准域（共享信号方向）"""
    if n_domains not in (2, 4):
        raise ParameterError(f"benchmark has 2 or 4 domains, got {n_domains}")
    base = DomainSpec(domain_id="template")
    offset_rng = derive_rng(seed, "offsets")
    specs = []
    for k, domain_id in enumerate(DOMAIN_IDS[:n_domains]):
        offset = BENCHMARK_OFFSET_SCALE * _unit(offset_rng.normal(size=base.signal_dim))
        specs.append(
            DomainSpec(
                domain_id=domain_id,
                n_samples=n_samples,
                domain_shift_offset=tuple(float(v) for v in offset),
                seed=derive_seed(seed, "domain", k) % (2**32),
                world_seed=seed,
                risk_strength=BENCHMARK_RISK_STRENGTH,
            )
        )
    return specs


def default_benchmark(n_domains: int = 2, n_samples: int = 240, seed: int = 7) -> Dict[str, ModalityBatch]:
    return {spec.domain_id: generate_domain(spec) for spec in benchmark_specs(n_domains, n_samples, seed)}


# ---------- 文件格式 ----------


def _write_csv(path: Path, frame: pd.DataFrame):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# schema_version={SCHEMA_VERSION} rows={frame.shape[0]} cols={frame.shape[1]}\n")
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def _read_csv(path: Path, numeric: Sequence[str] = ()) -> pd.DataFrame:
    """读取带头部的CSV并校验行列数和数值有限性"""
    if not path.exists():
        raise SchemaError(path, "file", "missing")
    text = path.read_text(encoding="utf-8")
    first_line = text.split("\n", 1)[0]
    match = _HEADER_RE.match(first_line)
    if not match:
        raise SchemaError(path, "header", f"expected '# schema_version=N rows=R cols=C', got {first_line[:60]!r}")
    version, rows, cols = (int(g) for g in match.groups())
    if version != SCHEMA_VERSION:
        raise SchemaError(path, "schema_version", f"unsupported version {version}")
    if not text.endswith("\n"):
        raise SchemaError(path, "rows", "file is truncated (no trailing newline)")

    frame = pd.read_csv(path, skiprows=1, float_precision="round_trip")
    if frame.shape[0] != rows:
        raise SchemaError(path, "rows", f"header declares {rows} rows, found {frame.shape[0]}")
    if frame.shape[1] != cols:
        raise SchemaError(path, "cols", f"header declares {cols} columns, found {frame.shape[1]}")

    for column in numeric:
        if column not in frame.columns:
            raise SchemaError(path, column, "missing column")
        if not pd.api.types.is_numeric_dtype(frame[column]):
            raise SchemaError(path, column, "non-numeric values")
    if numeric:
        values = frame[list(numeric)].to_numpy(dtype=np.float64)
        bad_rows = np.flatnonzero(~np.isfinite(values).all(axis=1))
        if bad_rows.size:
            raise DataError(path, int(bad_rows[0]), "non-finite value")
    return frame


def save_domain(
    batch: ModalityBatch,
    root,
    membership: Optional[pd.DataFrame] = None,
    config_hash: Optional[str] = None,
) -> FeatureFileSchema:
    """写出数据集目录 (manifest, patches/, pathways, labels, membership)"""
    schema = FeatureFileSchema(root=Path(root))
    try:
        (schema.root / schema.patches_dir).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputError(f"cannot create dataset directory {schema.root}: {e}") from e

    patch_columns = [f"f{j}" for j in range(batch.patch_dim)]
    for sample_id, tokens in zip(batch.sample_ids, batch.patch_tokens):
        _write_csv(schema.patch_path(sample_id), pd.DataFrame(tokens, columns=patch_columns))

    n, q, fg = batch.pathway_tokens.shape
    pathways = pd.DataFrame(batch.pathway_tokens.reshape(n * q, fg), columns=[f"g{j}" for j in range(fg)])
    pathways.insert(0, "pathway", np.tile(batch.pathway_names, n))
    pathways.insert(0, "sample", np.repeat(batch.sample_ids, q))
    _write_csv(schema.pathways_path, pathways)

    labels = pd.DataFrame(
        {
            "sample": batch.sample_ids,
            "time": batch.times,
            "event": batch.events.astype(np.int64),
        }
    )
    _write_csv(schema.labels_path, labels)

    if membership is None:
        membership = default_membership(batch.pathway_names, fg)
    _write_csv(schema.membership_path, membership)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "stamp": TOOL_STAMP,
        "domain_id": batch.domain_id,
        "n_samples": n,
        "patch_dim": batch.patch_dim,
        "pathways": q,
        "pathway_dim": fg,
        "samples": [
            {"id": sid, "patches": int(tokens.shape[0])} for sid, tokens in zip(batch.sample_ids, batch.patch_tokens)
        ],
    }
    if config_hash:
        manifest["config_hash"] = config_hash
    with open(schema.manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")

    logger.info(f"Saved domain {batch.domain_id} ({n} samples) to {schema.root}")
    return schema


def default_membership(pathway_names: Sequence[str], genes_per_pathway: int) -> pd.DataFrame:
    """合成数据的基因→通路归属表"""
    rows = [
        {"gene": f"gene_{k:03d}_{j}", "pathway": name}
        for k, name in enumerate(pathway_names)
        for j in range(genes_per_pathway)
    ]
    return pd.DataFrame(rows, columns=["gene", "pathway"])


def _load_manifest(schema: FeatureFileSchema) -> dict:
    path = schema.manifest_path
    if not path.exists():
        raise SchemaError(path, "file", "missing")
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(path, "json", str(e)) from e
    for key in ("schema_version", "n_samples", "patch_dim", "pathways", "pathway_dim", "samples"):
        if key not in manifest:
            raise SchemaError(path, key, "missing field")
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise SchemaError(path, "schema_version", f"unsupported version {manifest['schema_version']}")
    if len(manifest["samples"]) != manifest["n_samples"]:
        raise SchemaError(path, "samples", f"{len(manifest['samples'])} entries for n_samples={manifest['n_samples']}")
    return manifest


def load_features(schema: FeatureFileSchema) -> ModalityBatch:
    """读取并校验数据集目录；任何维度不一致都是硬错误"""
    manifest = _load_manifest(schema)
    n = manifest["n_samples"]
    q = manifest["pathways"]
    fg = manifest["pathway_dim"]
    fi = manifest["patch_dim"]
    sample_ids = [entry["id"] for entry in manifest["samples"]]

    membership = _read_csv(schema.membership_path)
    for column in ("gene", "pathway"):
        if column not in membership.columns:
            raise SchemaError(schema.membership_path, column, "missing column")
    pathway_names = list(dict.fromkeys(membership["pathway"].astype(str)))
    if len(pathway_names) != q:
        raise SchemaError(
            schema.membership_path, "pathway", f"{len(pathway_names)} pathway groups, manifest declares {q}"
        )

    patch_columns = [f"f{j}" for j in range(fi)]
    patch_tokens = []
    for entry in manifest["samples"]:
        path = schema.patch_path(entry["id"])
        frame = _read_csv(path, numeric=patch_columns)
        if frame.shape[1] != fi:
            raise SchemaError(path, "cols", f"{frame.shape[1]} feature columns, manifest declares {fi}")
        if frame.shape[0] != entry["patches"]:
            raise SchemaError(path, "rows", f"{frame.shape[0]} patches, manifest declares {entry['patches']}")
        patch_tokens.append(frame[patch_columns].to_numpy(dtype=np.float64))

    gene_columns = [f"g{j}" for j in range(fg)]
    pathways = _read_csv(schema.pathways_path, numeric=gene_columns)
    if pathways.shape[1] != fg + 2:
        raise SchemaError(schema.pathways_path, "cols", f"{pathways.shape[1] - 2} feature columns, expected {fg}")
    if pathways.shape[0] != n * q:
        raise SchemaError(schema.pathways_path, "rows", f"{pathways.shape[0]} rows, expected n·q = {n * q}")
    if list(pathways["sample"].astype(str)) != list(np.repeat(sample_ids, q)):
        raise SchemaError(schema.pathways_path, "sample", "sample order disagrees with the manifest")
    if list(pathways["pathway"].astype(str)) != pathway_names * n:
        raise SchemaError(schema.pathways_path, "pathway", "pathway order disagrees with the membership file")
    pathway_tokens = pathways[gene_columns].to_numpy(dtype=np.float64).reshape(n, q, fg)

    labels = _read_csv(schema.labels_path, numeric=["time", "event"])
    if labels.shape[0] != n:
        raise SchemaError(schema.labels_path, "rows", f"{labels.shape[0]} labels for {n} samples")
    if list(labels["sample"].astype(str)) != sample_ids:
        raise SchemaError(schema.labels_path, "sample", "sample order disagrees with the manifest")
    records = []
    for row, (t, e) in enumerate(zip(labels["time"], labels["event"])):
        if t < 0 or e not in (0, 1):
            raise DataError(schema.labels_path, row, f"invalid label time={t} event={e}")
        records.append(SurvivalRecord(time=float(t), event=bool(e)))

    logger.info(f"Loaded {n} samples from {schema.root} (q={q} pathways, patch dim {fi})")
    return ModalityBatch(
        patch_tokens=patch_tokens,
        pathway_tokens=pathway_tokens,
        labels=records,
        sample_ids=sample_ids,
        domain_id=manifest.get("domain_id", Path(schema.root).name),
        pathway_names=pathway_names,
    )


def load_domain(root) -> ModalityBatch:
    return load_features(FeatureFileSchema(root=Path(root)))


def load_benchmark(data_dir, domain_ids: Sequence[str]) -> Dict[str, ModalityBatch]:
    return {domain_id: load_domain(Path(data_dir) / domain_id) for domain_id in domain_ids}
