"""Run configuration: a flat YAML mapping parsed strictly into :class:`RunConfig`."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

OUTPUT_ENV = "CEAT_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data: file paths, or a synthetic dataset when both are empty
    train_path: str = ""
    test_path: str = ""
    synthetic_classes: int = 10
    synthetic_train_per_class: int = 200
    synthetic_test_per_class: int = 50
    synthetic_size: int = 16
    synthetic_channels: int = 3
    synthetic_seed: int = 1993
    # schedule
    base_classes: int = 4
    per_task: int = 2
    num_tasks: int = 0  # 0 = as many as the class count allows
    # model
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 6
    num_heads: int = 4
    mlp_ratio: int = 4
    plain_blocks: int = 2
    # optimisation
    batch_size: int = 64
    epochs_base: int = 50
    epochs_incremental: int = 30
    lr_base: float = 5e-4
    lr_incremental: float = 5e-4
    lr_head: float = 5e-3  # classifier heads, every task
    weight_decay: float = 1e-4
    augment: bool = True
    # losses
    tau: float = 0.1
    delta: float = 0.5
    positive_mode: str = "label"
    pcl_normalize: bool = True
    pcl_reduction: str = "mean"
    pcl_base: bool = True
    kd_temperature: float = 2.0
    pseudo_mode: str = "interpolation"
    gaussian_radius: float = 0.1
    # run
    method: str = "ceat"
    run_baseline: bool = True
    seed: int = 1993
    precision: str = "float32"
    absorb_tolerance: float = 0.0  # 0 = 1e-5 (float32) / 1e-10 (float64)
    probe_inputs: int = 100
    output_dir: str = "runs/default"

    def __post_init__(self):
        choices = {
            "positive_mode": ("label", "predicted"),
            "pcl_reduction": ("sum", "mean"),
            "pseudo_mode": ("interpolation", "gaussian", "none"),
            "method": ("ceat", "finetune"),
            "precision": ("float32", "float64"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key}={getattr(self, key)!r} not in {allowed}")
        for key in ("base_classes", "per_task", "batch_size", "embed_dim", "depth", "num_heads"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")

    @property
    def tolerance(self) -> float:
        if self.absorb_tolerance > 0:
            return self.absorb_tolerance
        return 1e-5 if self.precision == "float32" else 1e-10

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    kind = _TYPES[key]
    if isinstance(kind, str):
        kind = {"int": int, "float": float, "bool": bool, "str": str}[kind]
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if value is None:
        return ""
    if not isinstance(value, str):
        raise ConfigError(f"{key} expects a string, got {value!r}")
    return value


def config_from_mapping(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a key/value mapping")
    unknown = sorted(set(data) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    values = {}
    for key, value in data.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f"{key}: nested values are not allowed")
        values[key] = _coerce(key, value)
    cfg = RunConfig(**values)
    override = os.environ.get(OUTPUT_ENV)
    if override:
        cfg.output_dir = override
    return cfg


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"unparseable config: {e}") from None
    return config_from_mapping(data or {})


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)

