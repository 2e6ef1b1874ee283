"""Run configuration: one JSON document driving every subcommand.

Sections (all optional, all keys optional):
    model: LkdConfig fields, plus "variant" (t/s/b/l/tiny) as a base
           preset and "decomposition": [K, d] as an alias for the kernel/
           dilation pair.
    train: TrainConfig fields.
    data:  make_dataset fields (n, size, seed, clean_source, source_dir).
    erf:   probe fields (n_samples, input_size, tap, seed).

Unknown sections or keys are rejected. Defaults reproduce the LKD-T
desk-scale recipe. Seed precedence, per section: the --seed flag, then
the value written in the config file, then the LKD_SEED environment
variable, then 0.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace

from .model import ConfigError, LkdConfig, variant_config
from .train import TrainConfig

_SECTIONS = ("model", "train", "data", "erf")


@dataclass(frozen=True)
class DataConfig:
    n: int = 200
    size: int = 96
    seed: int = 0
    clean_source: str = "procedural"
    source_dir: str = None

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"data.n must be positive, got {self.n}")
        if self.size < 4 or self.size % 4:
            raise ConfigError(f"data.size must be a positive multiple of 4, got {self.size}")
        if self.clean_source not in ("procedural", "directory"):
            raise ConfigError(f"data.clean_source must be procedural or directory, got {self.clean_source!r}")
        if self.clean_source == "directory" and not self.source_dir:
            raise ConfigError("data.clean_source 'directory' needs data.source_dir")


@dataclass(frozen=True)
class ErfConfig:
    n_samples: int = 16
    input_size: int = 64
    tap: str = "output"
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError(f"erf.n_samples must be positive, got {self.n_samples}")
        if self.input_size < 4 or self.input_size % 4:
            raise ConfigError(f"erf.input_size must be a positive multiple of 4, got {self.input_size}")
        if self.tap not in ("output", "bottleneck"):
            raise ConfigError(f"erf.tap must be output or bottleneck, got {self.tap!r}")


@dataclass
class RunConfig:
    model: LkdConfig = field(default_factory=LkdConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    erf: ErfConfig = field(default_factory=ErfConfig)
    explicit_seeds: frozenset = frozenset()


def _build_section(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"unknown {name} config keys: {', '.join(unknown)}")
    return cls(**section)


def _build_model(section: dict) -> LkdConfig:
    section = dict(section)
    base = LkdConfig()
    if "variant" in section:
        base = variant_config(section.pop("variant"))
    if "decomposition" in section:
        if "kernel" in section or "dilation" in section:
            raise ConfigError("model.decomposition conflicts with model.kernel/model.dilation")
        kd = section.pop("decomposition")
        if not isinstance(kd, (list, tuple)) or len(kd) != 2:
            raise ConfigError(f"model.decomposition must be [K, d], got {kd!r}")
        section["kernel"], section["dilation"] = int(kd[0]), int(kd[1])
    known = set(LkdConfig.__dataclass_fields__)
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
    return replace(base, **section)


def load_run_config(path=None) -> RunConfig:
    """Load and validate a config file; None gives pure defaults."""
    raw = {}
    if path is not None:
        try:
            with open(path) as f:
                raw = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path!r}: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path!r} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    for name in _SECTIONS:
        if name in raw and not isinstance(raw[name], dict):
            raise ConfigError(f"config section {name!r} must be a JSON object")
    explicit = frozenset(
        name for name in ("train", "data", "erf") if "seed" in raw.get(name, {})
    )
    return RunConfig(
        model=_build_model(raw.get("model", {})),
        train=_build_section(TrainConfig, raw.get("train", {}), "train"),
        data=_build_section(DataConfig, raw.get("data", {}), "data"),
        erf=_build_section(ErfConfig, raw.get("erf", {}), "erf"),
        explicit_seeds=explicit,
    )


def resolve_seed(cfg: RunConfig, section: str, flag_seed) -> int:
    """Apply the documented seed precedence for one section."""
    if flag_seed is not None:
        return int(flag_seed)
    if section in cfg.explicit_seeds:
        return getattr(cfg, section).seed
    env = os.environ.get("LKD_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"LKD_SEED must be an integer, got {env!r}")
    return getattr(cfg, section).seed
