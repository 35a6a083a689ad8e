"""Run configuration: nested dataclasses with strict dict/YAML round-trips.

Every key has a default; unknown keys are rejected; dotted key=value
overrides coerce to the field's existing type.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ParameterError


@dataclass
class ScheduleConfig:
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    weight_mode: str = "inv_sigma"


@dataclass
class ConditioningConfig:
    grid: int = 8
    canny_sigma: float = 1.4
    canny_low: float = 0.1
    canny_high: float = 0.2
    adapter_scale: float = 1.0


@dataclass
class DegradationSection:
    scale: int = 4
    blur_sigma: tuple = (0.2, 3.0)
    filters: tuple = ("nearest", "bilinear", "area")
    noise_std: tuple = (0.0, 0.1)
    jpeg_quality: tuple = (30, 95)
    second_pass: bool = False


@dataclass
class DataConfig:
    image_size: int = 64
    num_train: int = 512
    num_val: int = 64
    families: tuple = ("gradient", "checker", "blobs", "bandnoise", "shapes")


@dataclass
class ModelConfig:
    base_width: int = 16
    width_mults: tuple = (1, 2, 4)
    emb_dim: int = 64
    groups: int = 4
    adapter_width: int = 16
    input_adapter_width: int = 16
    lora_rank: int = 4
    lora_multiplier: float = 1.0
    t_fix: int = 999


@dataclass
class TrainSection:
    # Distillation stage (the alternating loop).
    iterations: int = 2000
    batch_size: int = 4
    lr_gen: float = 5e-5
    lr_aux: float = 5e-5
    weight_decay: float = 0.01
    guidance: float = 2.0
    regularizer: str = "icm"          # icm | vsd | sds | none
    aux_uses_adapter: bool = False
    lambda_rec: float = 1.0
    lambda_perc: float = 1.0
    lambda_reg: float = 1.0
    proxy_seed: int = 7777
    log_every: int = 25
    grid_every: int = 500
    ckpt_every: int = 1000
    # Teacher / adapter pretraining stages.
    teacher_iterations: int = 2500
    teacher_batch_size: int = 8
    teacher_lr: float = 6e-4
    adapter_iterations: int = 1200
    adapter_batch_size: int = 8
    adapter_lr: float = 1e-3
    p_uncond: float = 0.1
    high_t_fraction: float = 0.3
    high_t_band: float = 0.35


@dataclass
class EvalConfig:
    probe_timesteps: tuple = (500, 620, 740, 860, 980)
    probe_batch: int = 32
    lemma_trials: int = 10000
    lemma_dim: int = 16


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)
    degradation: DegradationSection = field(default_factory=DegradationSection)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _coerce(value, template):
    """Coerce a parsed value to the type of the dataclass default."""
    if isinstance(template, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        raise ParameterError(f"cannot parse {value!r} as bool")
    if isinstance(template, int) and not isinstance(value, bool):
        return int(value)
    if isinstance(template, float):
        return float(value)
    if isinstance(template, tuple):
        if isinstance(value, (list, tuple)):
            return tuple(value)
        raise ParameterError(f"cannot parse {value!r} as tuple")
    if isinstance(template, str):
        return str(value)
    return value


def _from_dict(cls, d: dict, path: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in d.items():
        if key not in known:
            raise ParameterError(f"unknown config key {path}{key}")
        default = getattr(cls(), key) if not dataclasses.is_dataclass(
            known[key].type
        ) else None
        current = getattr(cls(), key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ParameterError(f"config section {path}{key} must be a mapping")
            kwargs[key] = _from_dict(type(current), value, f"{path}{key}.")
        else:
            kwargs[key] = _coerce(value, current)
    return cls(**kwargs)


def config_from_dict(d: dict) -> RunConfig:
    return _from_dict(RunConfig, d or {}, "")


def config_to_dict(cfg: RunConfig) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, tuple):
            return [convert(v) for v in obj]
        return obj

    return convert(cfg)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return config_from_dict(raw or {})


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


def apply_override(cfg: RunConfig, dotted: str, raw_value: str) -> None:
    """Apply one `section.key=value` override in place."""
    parts = dotted.split(".")
    target = cfg
    for p in parts[:-1]:
        if not hasattr(target, p):
            raise ParameterError(f"unknown config section {dotted!r}")
        target = getattr(target, p)
        if not dataclasses.is_dataclass(target):
            raise ParameterError(f"{p} in {dotted!r} is not a config section")
    leaf = parts[-1]
    if not dataclasses.is_dataclass(target) or not hasattr(target, leaf):
        raise ParameterError(f"unknown config key {dotted!r}")
    current = getattr(target, leaf)
    if dataclasses.is_dataclass(current):
        raise ParameterError(f"{dotted!r} names a section, not a key")
    parsed = yaml.safe_load(raw_value)
    setattr(target, leaf, _coerce(parsed, current))


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> None:
    for pair in pairs:
        if "=" not in pair:
            raise ParameterError(f"override {pair!r} is not of the form key=value")
        dotted, raw = pair.split("=", 1)
        apply_override(cfg, dotted.strip(), raw.strip())
