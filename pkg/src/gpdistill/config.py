"""Configuration files: sectioned ``key = value`` text, strictly validated.

Only documented sections and keys are accepted — an unknown key is a hard
ConfigError, never a silent default, because a typo like ``boost_iters``
would otherwise quietly run a different experiment.  Values are typed per
key; booleans must be literally ``true`` or ``false``.

The full key set, with defaults, is in DEFAULTS below; an empty or absent
file yields the pure-default configuration.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from .distill import DistillConfig
from .errors import ConfigError, ParameterError

__all__ = [
    "AppConfig",
    "DataOptions",
    "DebugOptions",
    "GpOptions",
    "MapperOptions",
    "PredictorOptions",
    "SweepOptions",
    "default_config",
    "load_config",
    "parse_config",
]


@dataclass
class DataOptions:
    kind: str = "blobs"  # blobs | moons | bars8x8 | idx
    n_train: int = 600
    n_test: int = 300
    n_inducing: int = 256
    seed: int = 0
    separation: float = 6.0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class PredictorOptions:
    arch: str = "mlp"  # mlp | conv
    hidden: tuple[int, ...] = (32, 32)
    channels: tuple[int, ...] = (8, 8)
    dense_width: int = 32
    iters: int = 2000
    batch: int = 32
    lr: float = 1e-3


@dataclass
class GpOptions:
    kernel_dim: int = 20
    sigma_gp2: float = 1.0
    sigma_g2: float = 0.0


@dataclass
class MapperOptions:
    arch: str = "dense"  # dense | conv
    hidden: tuple[int, ...] = (32, 32)
    channels: tuple[int, ...] = (8, 8)


@dataclass
class DebugOptions:
    corrupt_frac: float = 0.45
    n_random_orders: int = 20


@dataclass
class SweepOptions:
    m_values: tuple[int, ...] = (16, 64, 256, 1024)
    n_splits: int = 5


@dataclass
class AppConfig:
    data: DataOptions = field(default_factory=DataOptions)
    predictor: PredictorOptions = field(default_factory=PredictorOptions)
    gp: GpOptions = field(default_factory=GpOptions)
    mapper: MapperOptions = field(default_factory=MapperOptions)
    distill: DistillConfig = field(default_factory=lambda: DistillConfig(lr=3e-3))
    explain_k: int = 10
    debug: DebugOptions = field(default_factory=DebugOptions)
    sweep: SweepOptions = field(default_factory=SweepOptions)


def _to_int(s: str) -> int:
    return int(s, 10)


def _to_float(s: str) -> float:
    return float(s)


def _to_bool(s: str) -> bool:
    if s == "true":
        return True
    if s == "false":
        return False
    raise ValueError("expected 'true' or 'false'")


def _to_str(s: str) -> str:
    return s


def _to_int_tuple(s: str) -> tuple[int, ...]:
    parts = [p.strip() for p in s.split(",") if p.strip()]
    return tuple(int(p, 10) for p in parts)


def _choice(*allowed: str):
    def cast(s: str) -> str:
        if s not in allowed:
            raise ValueError(f"expected one of {allowed}")
        return s
    return cast


# section -> key -> caster.  This table IS the documented configuration
# surface; anything outside it is rejected.
SCHEMA: dict[str, dict[str, object]] = {
    "data": {
        "kind": _choice("blobs", "moons", "bars8x8", "idx"),
        "n_train": _to_int,
        "n_test": _to_int,
        "n_inducing": _to_int,
        "seed": _to_int,
        "separation": _to_float,
        "train_images": _to_str,
        "train_labels": _to_str,
        "test_images": _to_str,
        "test_labels": _to_str,
    },
    "predictor": {
        "arch": _choice("mlp", "conv"),
        "hidden": _to_int_tuple,
        "channels": _to_int_tuple,
        "dense_width": _to_int,
        "iters": _to_int,
        "batch": _to_int,
        "lr": _to_float,
    },
    "gp": {
        "kernel_dim": _to_int,
        "sigma_gp2": _to_float,
        "sigma_g2": _to_float,
    },
    "mapper": {
        "arch": _choice("dense", "conv"),
        "hidden": _to_int_tuple,
        "channels": _to_int_tuple,
    },
    "distill": {
        "max_iter": _to_int,
        "batch_query": _to_int,
        "batch_inducing": _to_int,
        "lr": _to_float,
        "lr_decay_every": _to_int,
        "lr_decay_factor": _to_float,
        "mixing": _to_bool,
        "probe_every": _to_int,
        "checkpoint_every": _to_int,
        "eps_cov": _to_float,
    },
    "explain": {
        "k": _to_int,
    },
    "debug": {
        "corrupt_frac": _to_float,
        "n_random_orders": _to_int,
    },
    "sweep": {
        "m_values": _to_int_tuple,
        "n_splits": _to_int,
    },
}

# config key -> DistillConfig field, where the names differ
_DISTILL_FIELD = {"mixing": "mixing_enabled"}


def default_config() -> AppConfig:
    return AppConfig()


def parse_config(text: str, origin: str = "<config>") -> AppConfig:
    """Parse configuration text; reject unknown sections/keys, bad values."""
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str  # keys are case-sensitive, exactly as documented
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as err:
        raise ConfigError(f"{origin}: {err}") from err
    if parser.defaults():
        raise ConfigError(
            f"{origin}: a [DEFAULT] section is not supported; put keys in "
            f"their own sections")

    values: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(
                f"{origin}: unknown section [{section}]; known sections: "
                f"{', '.join(sorted(SCHEMA))}")
        values[section] = {}
        for key, raw in parser.items(section):
            caster = SCHEMA[section].get(key)
            if caster is None:
                raise ConfigError(
                    f"{origin}: unknown key '{key}' in [{section}]; known "
                    f"keys: {', '.join(sorted(SCHEMA[section]))}")
            try:
                values[section][key] = caster(raw)
            except ValueError as err:
                raise ConfigError(
                    f"{origin}: bad value for {section}.{key}: "
                    f"{raw!r} ({err})") from err

    cfg = AppConfig()
    cfg.data = replace(cfg.data, **values.get("data", {}))
    cfg.predictor = replace(cfg.predictor, **values.get("predictor", {}))
    cfg.gp = replace(cfg.gp, **values.get("gp", {}))
    cfg.mapper = replace(cfg.mapper, **values.get("mapper", {}))
    distill_kwargs = {_DISTILL_FIELD.get(k, k): v
                      for k, v in values.get("distill", {}).items()}
    try:
        cfg.distill = replace(cfg.distill, **distill_kwargs)
    except ParameterError as err:
        raise ConfigError(f"{origin}: [distill] {err}") from err
    if "explain" in values and "k" in values["explain"]:
        cfg.explain_k = values["explain"]["k"]
    cfg.debug = replace(cfg.debug, **values.get("debug", {}))
    cfg.sweep = replace(cfg.sweep, **values.get("sweep", {}))
    return cfg


def load_config(path) -> AppConfig:
    """Read and parse a config file; a missing path is a ConfigError."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_config(text, origin=str(path))
