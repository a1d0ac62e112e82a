#!/usr/bin/env python3
"""
测试合成数据生成和数据集文件读写
"""

import json
from dataclasses import replace

import numpy as np
import pytest

from dataio import (
    BENCHMARK_RISK_STRENGTH,
    DEFAULT_TRAIN_PATCHES,
    benchmark_specs,
    default_benchmark,
    generate_domain,
    load_benchmark,
    load_domain,
    sample_batch_patches,
    sample_patches,
    save_domain,
    signal_patch_count,
)
from errors import DataError, ParameterError, SchemaError
from models import DomainSpec, ExperimentConfig, FeatureFileSchema
from seeding import derive_rng


@pytest.fixture
def small_spec():
    return DomainSpec(domain_id="toy", n_samples=12, patches_per_sample=6, pathways=3, signal_dim=5, pathway_dim=2, seed=4)


def test_generate_domain_shapes(small_spec):
    batch = generate_domain(small_spec)
    assert batch.n_samples == 12
    assert all(t.shape == (6, 5) for t in batch.patch_tokens)
    assert batch.pathway_tokens.shape == (12, 3, 2)
    assert batch.sample_ids[0] == "toy_0000"
    assert batch.events.sum() == 12 - round(0.3 * 12)


def test_generate_domain_is_deterministic(small_spec):
    a, b = generate_domain(small_spec), generate_domain(small_spec)
    assert all(np.array_equal(x, y) for x, y in zip(a.patch_tokens, b.patch_tokens))
    assert np.array_equal(a.pathway_tokens, b.pathway_tokens)
    assert np.array_equal(a.times, b.times)


def oracle_risk(spec: DomainSpec) -> np.ndarray:
    """生成器从 labels 流中最先抽取的就是 u"""
    return derive_rng(spec.seed, "labels").normal(size=spec.n_samples)


def r_squared(features: np.ndarray, target: np.ndarray) -> float:
    design = np.hstack([features, np.ones((features.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    residual = target - design @ coef
    return 1.0 - float(residual @ residual) / float(((target - target.mean()) ** 2).sum())


def test_oracle_risk_recoverable_from_either_modality():
    """无基因噪声、全部 patch 携带信号时，线性回归可以恢复潜在风险 u"""
    spec = DomainSpec(
        "oracle", n_samples=500, patch_signal_fraction=1.0, gene_noise_scale=0.0, censor_fraction=0.0, seed=3
    )
    batch = generate_domain(spec)
    u = oracle_risk(spec)
    image = np.stack([t.mean(axis=0) for t in batch.patch_tokens])
    gene = batch.pathway_tokens.reshape(batch.n_samples, -1)
    assert r_squared(image, u) > 0.99
    assert r_squared(gene, u) > 0.99


def test_signal_patch_count():
    assert signal_patch_count(DomainSpec("d", patches_per_sample=16, patch_signal_fraction=0.25)) == 4
    assert signal_patch_count(DomainSpec("d", patches_per_sample=10, patch_signal_fraction=0.01)) == 1


def test_invalid_domain_spec():
    with pytest.raises(ParameterError):
        generate_domain(DomainSpec("bad", patch_signal_fraction=0.0))
    with pytest.raises(ParameterError):
        generate_domain(DomainSpec("bad", signal_dim=3, domain_shift_offset=(1.0, 2.0)))


def test_benchmark_domains_differ_only_by_offset():
    specs = benchmark_specs(4, n_samples=10, seed=7)
    assert [s.domain_id for s in specs] == ["domain_a", "domain_b", "domain_c", "domain_d"]
    assert len({s.world_seed for s in specs}) == 1
    assert len({s.domain_shift_offset for s in specs}) == 4
    assert all(s.risk_strength == BENCHMARK_RISK_STRENGTH for s in specs)
    with pytest.raises(ParameterError):
        benchmark_specs(3)


def test_default_benchmark_patch_means_follow_offset():
    """每个域的 patch 均值靠近自己的偏移"""
    datasets = default_benchmark(2, n_samples=240, seed=7)
    assert list(datasets) == ["domain_a", "domain_b"]
    specs = benchmark_specs(2, n_samples=240, seed=7)
    offsets = [s.offset_vector() for s in specs]
    for k, batch in enumerate(datasets.values()):
        mean = np.vstack(batch.patch_tokens).mean(axis=0)
        own = np.linalg.norm(mean - offsets[k])
        other = np.linalg.norm(mean - offsets[1 - k])
        assert own < other


def test_sample_patches():
    tokens = np.arange(20, dtype=float).reshape(10, 2)
    rng = np.random.default_rng(0)
    picked = sample_patches(tokens, 4, rng)
    assert picked.shape == (4, 2)
    rows = picked[:, 0] / 2
    assert np.all(np.diff(rows) > 0)
    assert sample_patches(tokens, 50, rng) is tokens
    assert sample_patches(tokens, 4, training=False) is tokens
    with pytest.raises(ParameterError):
        sample_patches(tokens, 0, rng)


def test_sample_batch_patches(small_spec):
    batch = generate_domain(small_spec)
    sampled = sample_batch_patches(batch, 2, np.random.default_rng(1))
    assert all(t.shape == (2, 5) for t in sampled.patch_tokens)
    assert sampled.labels == batch.labels


def test_save_load_round_trip(tmp_path, small_spec):
    batch = generate_domain(small_spec)
    save_domain(batch, tmp_path / "toy")
    loaded = load_domain(tmp_path / "toy")
    assert loaded.domain_id == "toy"
    assert loaded.sample_ids == batch.sample_ids
    assert loaded.pathway_names == batch.pathway_names
    assert all(np.array_equal(x, y) for x, y in zip(loaded.patch_tokens, batch.patch_tokens))
    assert np.array_equal(loaded.pathway_tokens, batch.pathway_tokens)
    assert np.array_equal(loaded.times, batch.times)
    assert np.array_equal(loaded.events, batch.events)


def test_files_carry_schema_header(tmp_path, small_spec):
    save_domain(generate_domain(small_spec), tmp_path / "toy")
    schema = FeatureFileSchema(root=tmp_path / "toy")
    first = schema.labels_path.read_text(encoding="utf-8").split("\n", 1)[0]
    assert first == "# schema_version=1 rows=12 cols=3"
    manifest = json.loads(schema.manifest_path.read_text(encoding="utf-8"))
    assert manifest["n_samples"] == 12 and manifest["pathways"] == 3


def test_truncated_file_rejected(tmp_path, small_spec):
    save_domain(generate_domain(small_spec), tmp_path / "toy")
    path = FeatureFileSchema(root=tmp_path / "toy").labels_path
    text = path.read_text(encoding="utf-8")
    path.write_text(text.rstrip("\n"), encoding="utf-8")
    with pytest.raises(SchemaError) as excinfo:
        load_domain(tmp_path / "toy")
    assert excinfo.value.field == "rows"


def test_row_count_mismatch_rejected(tmp_path, small_spec):
    save_domain(generate_domain(small_spec), tmp_path / "toy")
    path = FeatureFileSchema(root=tmp_path / "toy").pathways_path
    lines = path.read_text(encoding="utf-8").split("\n")
    path.write_text("\n".join(lines[:-2]) + "\n", encoding="utf-8")
    with pytest.raises(SchemaError) as excinfo:
        load_domain(tmp_path / "toy")
    assert "pathways.csv" in excinfo.value.path


def test_non_finite_value_names_row(tmp_path, small_spec):
    save_domain(generate_domain(small_spec), tmp_path / "toy")
    path = FeatureFileSchema(root=tmp_path / "toy").labels_path
    lines = path.read_text(encoding="utf-8").split("\n")
    sample, _, event = lines[3].split(",")
    lines[3] = f"{sample},nan,{event}"
    path.write_text("\n".join(lines), encoding="utf-8")
    with pytest.raises(DataError) as excinfo:
        load_domain(tmp_path / "toy")
    assert excinfo.value.row == 1


def test_dimension_mismatch_rejected(tmp_path, small_spec):
    save_domain(generate_domain(small_spec), tmp_path / "toy")
    schema = FeatureFileSchema(root=tmp_path / "toy")
    manifest = json.loads(schema.manifest_path.read_text(encoding="utf-8"))
    manifest["pathway_dim"] = 3
    schema.manifest_path.write_text(json.dumps(manifest), encoding="utf-8")
    with pytest.raises(SchemaError):
        load_domain(tmp_path / "toy")


def test_missing_manifest(tmp_path):
    with pytest.raises(SchemaError) as excinfo:
        load_domain(tmp_path / "nothing")
    assert excinfo.value.field == "file"


def test_load_benchmark(tmp_path):
    for domain_id, batch in default_benchmark(2, n_samples=8, seed=3).items():
        save_domain(batch, tmp_path / domain_id)
    loaded = load_benchmark(tmp_path, ["domain_a", "domain_b"])
    assert [b.domain_id for b in loaded.values()] == ["domain_a", "domain_b"]
    assert all(b.n_samples == 8 for b in loaded.values())


def test_censored_times_precede_latent_event_times():
    spec = DomainSpec("toy", n_samples=60, censor_fraction=0.4, seed=5)
    censored = generate_domain(spec)
    # 不删失时观测时间就是潜在事件时间
    latent = generate_domain(replace(spec, censor_fraction=0.0)).times
    mask = ~censored.events
    assert mask.sum() == 24
    assert np.all(censored.times > 0)
    assert np.all(censored.times[mask] < latent[mask])
    assert np.array_equal(censored.times[~mask], latent[~mask])


def test_membership_with_331_pathways(tmp_path):
    spec = DomainSpec("wide", n_samples=2, patches_per_sample=3, pathways=331, signal_dim=4, pathway_dim=2, seed=1)
    save_domain(generate_domain(spec), tmp_path / "wide")
    loaded = load_domain(tmp_path / "wide")
    assert loaded.pathway_tokens.shape == (2, 331, 2)
    assert len(loaded.pathway_names) == 331


def test_default_training_patch_count():
    assert DEFAULT_TRAIN_PATCHES == 4096
    assert ExperimentConfig().n_train_patches == DEFAULT_TRAIN_PATCHES
