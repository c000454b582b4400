"""Typed configuration records and the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FactorConfig:
    C1: int = 4
    C2: int = 4
    D: int = 16
    gamma: float = 0.1

    def __post_init__(self):
        if self.C1 < 1 or self.C2 < 1 or self.D < 1:
            raise ConfigError("C1, C2 and D must be >= 1")
        if not self.gamma > 0:
            raise ConfigError("gamma must be > 0")

    @property
    def user_dim(self):
        return (self.C1 + self.C2) * self.D

    @property
    def item_dim(self):
        return (1 + self.C1) * self.D


@dataclass(frozen=True)
class TrainConfig(FactorConfig):
    lr: float = 2e-4
    l2_weight: float = 1e-8
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    mc_samples: int = 1
    decoder_tied: bool = False
    softmax_mode: str = "full"
    exclude_target_from_neighborhood: bool = False
    init_scale: float = 0.1
    select_k: int = 100

    def __post_init__(self):
        super().__post_init__()
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.l2_weight < 0:
            raise ConfigError("l2_weight must be >= 0")
        if self.batch_size < 1 or self.epochs < 1 or self.mc_samples < 1 or self.select_k < 1:
            raise ConfigError("batch_size, epochs, mc_samples and select_k must be >= 1")
        if self.init_scale < 0:
            raise ConfigError("init_scale must be >= 0")
        self.n_negatives  # validates softmax_mode

    @property
    def factors(self) -> FactorConfig:
        return FactorConfig(self.C1, self.C2, self.D, self.gamma)

    @property
    def n_negatives(self):
        """None for full softmax, otherwise the sampled-softmax negative count."""
        mode = self.softmax_mode.strip()
        if mode == "full":
            return None
        if mode.startswith("sampled:"):
            try:
                n = int(mode.split(":", 1)[1])
            except ValueError:
                n = 0
            if n >= 1:
                return n
        raise ConfigError(f"softmax_mode must be 'full' or 'sampled:<n>', got {self.softmax_mode!r}")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class RunConfig(TrainConfig):
    interactions: str = ""
    item_entity: str = ""
    entity_entity: str = ""
    output_dir: str = ""
    k_list: tuple = (2, 10, 50, 100)
    n_val: int = 200
    n_test: int = 200
    train_frac: float = 0.8

    def __post_init__(self):
        super().__post_init__()
        if not 0 < self.train_frac < 1:
            raise ConfigError("train_frac must be in (0, 1)")
        if self.n_val < 0 or self.n_test < 0:
            raise ConfigError("n_val and n_test must be >= 0")
        if not self.k_list or any(k < 1 for k in self.k_list):
            raise ConfigError("k_list entries must be >= 1")

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def require_data(self):
        for key in ("interactions", "item_entity"):
            if not getattr(self, key):
                raise ConfigError(f"missing required data path {key!r}")


REQUIRED_PATH_KEYS = ("interactions", "item_entity")


def _coerce(key, raw, ftype, line_no=None):
    where = f" (line {line_no})" if line_no else ""
    raw = raw.strip()
    try:
        if ftype in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype in (int, "int"):
            return int(raw)
        if ftype in (float, "float"):
            return float(raw)
        if ftype in (tuple, "tuple"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"key {key!r}{where}: cannot parse {raw!r} as {getattr(ftype, '__name__', ftype)}") from None


def field_types(cls=RunConfig):
    return {f.name: f.type for f in fields(cls)}


def parse_config_text(text: str, source="<config>") -> dict:
    """Parse ``key = value`` lines (``#`` comments) into typed overrides."""
    types = field_types()
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{line_no}: unknown key {key!r}")
        values[key] = _coerce(key, raw, types[key], line_no)
    return values


def parse_config(path=None, overrides=None) -> RunConfig:
    """Load a config file and apply ``overrides`` (already typed or raw strings) on top."""
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    types = field_types()
    for key, val in (overrides or {}).items():
        if key not in types:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, val, types[key]) if isinstance(val, str) else val
    return RunConfig(**values)


def config_to_text(cfg) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
