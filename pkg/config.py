"""
实验配置加载
KEY=value 配置文件 (dotenv 格式) + SURVDG_<KEY> 环境变量覆盖，
规范化形式的哈希标记每一个输出文件
"""

import hashlib
import logging
import os
from dataclasses import fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from dotenv import dotenv_values, load_dotenv

from errors import ConfigError
from models import ExperimentConfig


logger = logging.getLogger(__name__)

load_dotenv()

TOOL_NAME = "survdg"
TOOL_VERSION = "0.1.0"
TOOL_STAMP = f"{TOOL_NAME} {TOOL_VERSION}"
ENV_PREFIX = "SURVDG_"

_DEFAULTS = ExperimentConfig()
FIELD_NAMES = [f.name for f in fields(ExperimentConfig)]

# 模块关闭时不参与哈希的字段
SDIR_FIELDS = ("alpha", "sdir_modalities", "learn_anchor")
CADE_FIELDS = ("gamma", "kernel_mode", "concentration", "quadrature_points", "kl_relative_floor")
# 不影响任何数值结果
UNHASHED_FIELDS = ("output_dir",)


def _parse_bool(name: str, raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{name}: expected a boolean, got {raw!r}")


def parse_value(name: str, raw: str) -> Any:
    """按字段默认值的类型解析字符串"""
    if name not in FIELD_NAMES:
        raise ConfigError(f"unknown config key {name.upper()!r}")
    default = getattr(_DEFAULTS, name)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return _parse_bool(name, raw)
        if isinstance(default, Enum):
            return type(default)(raw.lower())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [item.strip() for item in raw.split(",") if item.strip()]
            item_type = type(default[0]) if default else str
            return tuple(item_type(item) for item in items)
        if default is None:
            return raw or None
        return raw
    except ValueError as e:
        raise ConfigError(f"{name}: cannot parse {raw!r}: {e}") from e


def _collect(values: Mapping[str, Optional[str]], origin: str, strict: bool) -> Dict[str, Any]:
    parsed = {}
    for key, raw in values.items():
        name = key.lower()
        if name not in FIELD_NAMES:
            if strict:
                raise ConfigError(f"{origin}: unknown config key {key!r}")
            logger.warning(f"Ignoring unknown setting {key} from {origin}")
            continue
        if raw is None:
            raise ConfigError(f"{origin}: key {key!r} has no value")
        parsed[name] = parse_value(name, raw)
    return parsed


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> ExperimentConfig:
    """默认值 < 配置文件 < 环境变量 < 显式覆盖"""
    settings: Dict[str, Any] = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"config file not found: {config_path}")
        settings.update(_collect(dotenv_values(config_path), str(config_path), strict=True))

    environ = os.environ if environ is None else environ
    env_values = {k[len(ENV_PREFIX):]: v for k, v in environ.items() if k.startswith(ENV_PREFIX)}
    env_values.pop("SLOW", None)
    settings.update(_collect(env_values, "environment", strict=False))

    for name, value in (overrides or {}).items():
        if name not in FIELD_NAMES:
            raise ConfigError(f"unknown config key {name!r}")
        if value is not None:
            settings[name] = value

    config = ExperimentConfig(**settings)
    logger.debug(f"Loaded config {config_hash(config)} from {path or 'defaults'}")
    return config


def with_changes(config: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(config, **changes)


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def canonical_form(config: ExperimentConfig) -> str:
    """排序后的 key=value 行；关闭的模块的参数不出现"""
    skipped = set(UNHASHED_FIELDS)
    if not config.sdir_on:
        skipped.update(SDIR_FIELDS)
    if not config.cade_on:
        skipped.update(CADE_FIELDS)
    lines = [f"{name}={format_value(getattr(config, name))}" for name in sorted(FIELD_NAMES) if name not in skipped]
    return "\n".join(lines) + "\n"


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_form(config).encode("utf-8")).hexdigest()[:16]


def dump_config(config: ExperimentConfig) -> str:
    """完整配置，可被 load_config 重新读取"""
    lines = [f"# {TOOL_STAMP} config {config_hash(config)}"]
    lines += [f"{name.upper()}={format_value(getattr(config, name))}" for name in FIELD_NAMES]
    return "\n".join(lines) + "\n"
