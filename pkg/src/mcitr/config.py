"""Run configuration: nested dataclasses, YAML files, dotted-key overrides.

Every command resolves its configuration through :func:`load_config` so that
a config file, command-line overrides, and the built-in defaults always merge
the same way. The resolved config is validated eagerly and dumped alongside
every artifact a run produces.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Invalid or missing configuration. Mapped to CLI exit code 2."""


# YAML/CLI keys that cannot be Python identifiers (or differ from the
# attribute name) are aliased per section.
_KEY_TO_ATTR = {"lambda": "lam"}
_ATTR_TO_KEY = {v: k for k, v in _KEY_TO_ATTR.items()}

ENHANCEMENTS = ("none", "sge", "cge")
PRECISIONS = ("float32", "float64")
TEXT_MODES = ("precomputed", "frozen-live", "trainable-live")

OUTPUT_ROOT_ENV = "MCITR_OUTPUT_ROOT"


@dataclass
class DimsConfig:
    dI: int = 2048   # region feature dimension
    dT: int = 768    # word feature dimension
    dIc: int = 512   # pooled clip feature dimension
    dJ: int = 1024   # joint embedding dimension


@dataclass
class DataConfig:
    root: str = ""
    K: int = 36
    dims: DimsConfig = field(default_factory=DimsConfig)
    max_length: int = 100
    seed: int = 42


@dataclass
class PoolConfig:
    d_t: int = 32        # positional-code dimension
    h: int = 128         # recurrent hidden size per direction
    n_max_img: int = 36
    n_max_txt: int = 100


@dataclass
class TextConfig:
    mode: str = "precomputed"
    backbone_id: str = ""


@dataclass
class ModelConfig:
    enhancement: str = "sge"
    pool: PoolConfig = field(default_factory=PoolConfig)
    text: TextConfig = field(default_factory=TextConfig)


@dataclass
class LossConfig:
    gamma: float = 90.0
    epsilon: float = 0.5
    lam: float = 1.0     # YAML/CLI key: loss.lambda
    # ablation baseline: hardest-negative bidirectional ranking loss instead
    # of the unified objective
    triplet_baseline: bool = False
    triplet_margin: float = 0.2


@dataclass
class MocoConfig:
    enabled: bool = True
    m: float = 0.999
    queue_size: int = 4096


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 128
    lr: float = 5e-4
    lr_decay_factor: float = 10.0
    lr_decay_last_epochs: int = 10
    weight_decay: float = 1e-4
    grad_clip: float = 2.0   # global norm; 0 disables
    checkpoint_every: int = 1
    prefetch: int = 0        # batches to prefetch in a background thread


@dataclass
class RunConfig:
    name: str = "run"
    out_dir: str = ""        # empty: $MCITR_OUTPUT_ROOT/<name> or ./runs/<name>
    precision: str = "float32"
    deterministic: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    moco: MocoConfig = field(default_factory=MocoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def resolved_out_dir(self) -> Path:
        if self.out_dir:
            return Path(self.out_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        return Path(root) / self.name


def _to_dict(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        out = {}
        for f in fields(obj):
            key = _ATTR_TO_KEY.get(f.name, f.name)
            out[key] = _to_dict(getattr(obj, f.name))
        return out
    return obj


# Field annotations are strings here, so nested sections are resolved by name.
_SECTION_TYPES = {
    "dims": DimsConfig,
    "data": DataConfig,
    "pool": PoolConfig,
    "text": TextConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "moco": MocoConfig,
    "train": TrainConfig,
}


def _from_dict(cls: type, data: dict, path: str = "") -> Any:
    known = {f.name for f in fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        attr = _KEY_TO_ATTR.get(key, key)
        where = f"{path}.{key}" if path else key
        if attr not in known:
            raise ConfigError(f"unknown config key `{where}`")
        if attr in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"config key `{where}` expects a mapping")
            kwargs[attr] = _from_dict(_SECTION_TYPES[attr], value, where)
        else:
            kwargs[attr] = value
    return cls(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_dict(cfg)


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data)


def apply_overrides(data: dict, overrides: dict[str, str]) -> dict:
    """Apply dotted-key overrides (`loss.gamma=90`) onto a config dict.

    Values are parsed as YAML scalars so `90`, `0.5`, `true`, and bare strings
    all coerce naturally.
    """
    for dotted, raw in overrides.items():
        parts = dotted.split(".")
        node = data
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                node[part] = node.get(part) if isinstance(node.get(part), dict) else {}
            node = node[part]
        node[parts[-1]] = yaml.safe_load(raw) if isinstance(raw, str) else raw
    return data


def load_config(path: str | Path | None = None,
                overrides: dict[str, str] | None = None,
                validate: bool = True) -> RunConfig:
    """Load defaults, merge an optional YAML file, then apply overrides."""
    data = config_to_dict(RunConfig())
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        with open(p) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {p} must contain a mapping")
        data = _deep_merge(data, loaded)
    if overrides:
        apply_overrides(data, overrides)
    cfg = config_from_dict(data)
    if validate:
        validate_config(cfg)
    return cfg


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def validate_config(cfg: RunConfig) -> None:
    """Eager validation; raises ConfigError naming the offending key."""
    if cfg.precision not in PRECISIONS:
        raise ConfigError(f"precision must be one of {PRECISIONS}, got `{cfg.precision}`")
    if cfg.model.enhancement not in ENHANCEMENTS:
        raise ConfigError(
            f"model.enhancement must be one of {ENHANCEMENTS}, got `{cfg.model.enhancement}`")
    if cfg.model.text.mode not in TEXT_MODES:
        raise ConfigError(f"model.text.mode must be one of {TEXT_MODES}")
    d = cfg.data
    if d.K <= 0:
        raise ConfigError("data.K must be positive")
    if d.max_length < 1:
        raise ConfigError("data.max_length must be >= 1")
    for name in ("dI", "dT", "dIc", "dJ"):
        if getattr(d.dims, name) <= 0:
            raise ConfigError(f"data.dims.{name} must be positive")
    p = cfg.model.pool
    if p.d_t <= 0 or p.h <= 0:
        raise ConfigError("model.pool.d_t and model.pool.h must be positive")
    if p.n_max_img < d.K:
        raise ConfigError("model.pool.n_max_img must be >= data.K")
    if p.n_max_txt < d.max_length:
        raise ConfigError("model.pool.n_max_txt must be >= data.max_length")
    ls = cfg.loss
    if ls.gamma <= 0:
        raise ConfigError("loss.gamma must be > 0")
    if not (0.0 < ls.epsilon <= 1.0):
        raise ConfigError("loss.epsilon must lie in (0, 1]")
    if ls.lam < 0:
        raise ConfigError("loss.lambda must be >= 0")
    mc = cfg.moco
    if not (0.0 <= mc.m < 1.0):
        raise ConfigError("moco.m must lie in [0, 1)")
    if mc.queue_size <= 0:
        raise ConfigError("moco.queue_size must be positive")
    t = cfg.train
    if t.batch_size < 2:
        raise ConfigError("train.batch_size must be >= 2 (contrastive signal)")
    if mc.enabled:
        if t.batch_size > mc.queue_size:
            raise ConfigError("train.batch_size must not exceed moco.queue_size")
        if mc.queue_size % t.batch_size != 0:
            raise ConfigError(
                "moco.queue_size must be a multiple of train.batch_size "
                f"({mc.queue_size} % {t.batch_size} != 0)")
    if t.epochs < 0:
        raise ConfigError("train.epochs must be >= 0")
    if t.epochs > 0 and t.lr_decay_last_epochs >= t.epochs:
        raise ConfigError("train.lr_decay_last_epochs must be < train.epochs")
    if t.lr <= 0 or t.lr_decay_factor <= 0:
        raise ConfigError("train.lr and train.lr_decay_factor must be positive")
    if t.weight_decay < 0 or t.grad_clip < 0:
        raise ConfigError("train.weight_decay and train.grad_clip must be >= 0")


def config_hash(cfg: RunConfig) -> str:
    """Stable digest of the resolved config; stored in checkpoints."""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)
