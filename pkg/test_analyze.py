#!/usr/bin/env python3
"""
测试命令行入口
"""

import json

from click.testing import CliRunner

from analyze import cli

TINY_CONFIG = """\
EPOCHS=1
SEEDS=0
BATCH_SIZE=8
N_TRAIN_PATCHES=8
HIDDEN_DIM=4
LATENT_DIM=2
BENCHMARK_SAMPLES=16
"""


def write_config(tmp_path, text=TINY_CONFIG):
    path = tmp_path / "tiny.txt"
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_generate_writes_domains(tmp_path):
    result = CliRunner().invoke(cli, ["generate", "--domains", "2", "--samples", "6", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    for domain_id in ("domain_a", "domain_b"):
        manifest = json.loads((tmp_path / domain_id / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["n_samples"] == 6


def test_run_then_report(tmp_path):
    out = tmp_path / "run"
    result = CliRunner().invoke(cli, ["run", "--config", write_config(tmp_path), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "config.txt").read_text(encoding="utf-8").startswith("# survdg 0.1.0 config ")
    assert (out / "checkpoints" / "seed_0.json").exists()
    assert (out / "run_report.json").exists()

    again = tmp_path / "again"
    result = CliRunner().invoke(cli, ["report", str(out / "run_report.json"), "--out", str(again)])
    assert result.exit_code == 0, result.output
    assert (again / "run_report.json").read_bytes() == (out / "run_report.json").read_bytes()
    assert (again / "run_cindex.csv").read_bytes() == (out / "run_cindex.csv").read_bytes()


def test_train_then_evaluate(tmp_path):
    config = write_config(tmp_path)
    out = tmp_path / "train"
    result = CliRunner().invoke(cli, ["train", "--config", config, "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "training_log_seed0.csv").exists()

    result = CliRunner().invoke(
        cli, ["evaluate", str(out / "checkpoints" / "seed_0.json"), "--config", config, "--out", str(tmp_path / "eval")]
    )
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "eval" / "run_report.json").read_text(encoding="utf-8"))
    assert report["reports"][0]["label"] == "evaluate"

    # 配置不同则拒绝评估
    other = write_config(tmp_path, TINY_CONFIG.replace("EPOCHS=1", "EPOCHS=2"))
    result = CliRunner().invoke(
        cli, ["evaluate", str(out / "checkpoints" / "seed_0.json"), "--config", other, "--out", str(tmp_path / "eval2")]
    )
    assert result.exit_code == 10
    assert "❌ config:" in result.output


def test_config_error_exit_code(tmp_path):
    result = CliRunner().invoke(cli, ["run", "--config", write_config(tmp_path, "EPOCH=1\n"), "--out", str(tmp_path)])
    assert result.exit_code == 10
    assert "❌ config:" in result.output


def test_missing_checkpoint_exit_code(tmp_path):
    result = CliRunner().invoke(
        cli, ["evaluate", str(tmp_path / "nope.json"), "--config", write_config(tmp_path), "--out", str(tmp_path)]
    )
    assert result.exit_code == 8


def test_grid_rejects_bad_alpha(tmp_path):
    result = CliRunner().invoke(
        cli, ["grid", "--alphas", "1.5", "--gammas", "0.5", "--config", write_config(tmp_path), "--out", str(tmp_path)]
    )
    assert result.exit_code == 4


def test_self_check_commands():
    runner = CliRunner()
    for name in ("grad", "metrics", "cade"):
        result = runner.invoke(cli, ["test", name])
        assert result.exit_code == 0, result.output


def test_grid_summary_has_loss_breakdown(tmp_path):
    out = tmp_path / "grid"
    result = CliRunner().invoke(
        cli, ["grid", "--alphas", "0.3", "--gammas", "0.7", "--config", write_config(tmp_path), "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert (out / "alpha_0_3_loss.csv").exists()
    assert (out / "gamma_0_7_loss.csv").exists()
    summary = (out / "summary.md").read_text(encoding="utf-8")
    assert "clean_nll" in summary
