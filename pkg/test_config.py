#!/usr/bin/env python3
"""
测试配置加载、覆盖顺序和配置哈希
"""

import logging

import pytest

from config import canonical_form, config_hash, dump_config, load_config, parse_value, with_changes
from errors import ConfigError
from models import ExperimentConfig, KernelMode, OptimizerKind


def write_config(tmp_path, text):
    path = tmp_path / "survdg.txt"
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_defaults_without_sources():
    assert load_config(environ={}) == ExperimentConfig()


def test_file_values(tmp_path):
    path = write_config(tmp_path, "# comment\nEPOCHS=2\nALPHA=0.25\nTARGET_DOMAINS=domain_b,domain_c\nKERNEL_MODE=centered\n")
    config = load_config(path, environ={})
    assert config.epochs == 2
    assert config.alpha == 0.25
    assert config.target_domains == ("domain_b", "domain_c")
    assert config.kernel_mode is KernelMode.CENTERED


def test_unknown_file_key_is_an_error(tmp_path):
    path = write_config(tmp_path, "EPOCH=2\n")
    with pytest.raises(ConfigError):
        load_config(path, environ={})


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/survdg.txt", environ={})


def test_precedence(tmp_path):
    path = write_config(tmp_path, "EPOCHS=2\nBATCH_SIZE=8\n")
    config = load_config(path, overrides={"batch_size": 4, "seeds": None}, environ={"SURVDG_EPOCHS": "3"})
    assert config.epochs == 3
    assert config.batch_size == 4
    assert config.seeds == (0, 1, 2, 3, 4)


def test_unknown_env_key_only_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="config"):
        config = load_config(environ={"SURVDG_NOT_A_FIELD": "1", "SURVDG_SLOW": "1", "OTHER": "x"})
    assert config == ExperimentConfig()
    assert "NOT_A_FIELD" in caplog.text
    assert "SLOW" not in caplog.text


def test_unknown_override_key():
    with pytest.raises(ConfigError):
        load_config(overrides={"nope": 1}, environ={})


@pytest.mark.parametrize("raw", ["maybe", "2", ""])
def test_bad_boolean(raw):
    with pytest.raises(ConfigError):
        parse_value("sdir_on", raw)


def test_parse_values():
    assert parse_value("cade_on", "Off") is False
    assert parse_value("seeds", "3, 4") == (3, 4)
    assert parse_value("optimizer", "ADAM") is OptimizerKind.ADAM
    assert parse_value("data_dir", "") is None
    with pytest.raises(ConfigError):
        parse_value("epochs", "ten")
    with pytest.raises(ConfigError):
        parse_value("kernel_mode", "gaussian")


def test_domain_validation(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, "TARGET_DOMAINS=\n"), environ={})
    with pytest.raises(ConfigError):
        load_config(overrides={"target_domains": ("domain_a",)}, environ={})
    with pytest.raises(ConfigError):
        ExperimentConfig(target_domains=("domain_b", "domain_b"))


@pytest.mark.parametrize(
    "changes",
    [{"alpha": 1.0}, {"gamma": 0.0}, {"batch_size": 1}, {"bins": 1}, {"seeds": ()}, {"kl_relative_floor": 1.0}, {"grad_clip": -1.0}],
)
def test_invalid_values(changes):
    with pytest.raises(ConfigError):
        ExperimentConfig(**changes)


def test_hash_ignores_disabled_module_fields():
    off = ExperimentConfig(sdir_on=False)
    assert config_hash(with_changes(off, alpha=0.1)) == config_hash(with_changes(off, alpha=0.2))
    on = ExperimentConfig()
    assert config_hash(with_changes(on, alpha=0.1)) != config_hash(with_changes(on, alpha=0.2))
    no_cade = ExperimentConfig(cade_on=False)
    assert config_hash(with_changes(no_cade, gamma=0.1)) == config_hash(with_changes(no_cade, gamma=0.9))
    assert config_hash(with_changes(no_cade, kl_relative_floor=0.0)) == config_hash(no_cade)
    assert "alpha=" not in canonical_form(off)


def test_hash_ignores_output_dir():
    assert config_hash(ExperimentConfig(output_dir="a")) == config_hash(ExperimentConfig(output_dir="b"))
    assert len(config_hash(ExperimentConfig())) == 16


def test_dump_round_trip(tmp_path):
    config = ExperimentConfig(
        alpha=0.7, kernel_mode=KernelMode.EXPECTATION, seeds=(3, 9), target_domains=("domain_b", "domain_c"),
        optimizer=OptimizerKind.ADAM, data_dir="data", variance_eps=1e-6, kl_relative_floor=0.25, grad_clip=0.0,
    )
    text = dump_config(config)
    assert text.startswith(f"# survdg 0.1.0 config {config_hash(config)}\n")
    assert load_config(write_config(tmp_path, text), environ={}) == config
