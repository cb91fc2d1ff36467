"""Run configuration: a flat ``key = value`` file plus command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Optional

OPTIMIZERS = ("sgd", "adam", "alrao", "alrao-adam")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # data: "blobs:k=3,d=20,n=2000,spread=0.5", "digits[:n=2000]" or "idx:images=PATH,labels=PATH"
    dataset: str = "blobs:k=3,d=20,n=2000,spread=0.5"
    # pre-classifier layers; the classifier layer is appended automatically
    model: str = "dense:64,tanh,dense:64,tanh"
    optimizer: str = "alrao"
    lr: Optional[float] = None  # sgd: required; adam: defaults to 1e-3
    eta_min: float = 1e-5
    eta_max: float = 10.0
    n_cl: int = 10
    theta: float = 0.999
    averaging: str = "switch"
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 20
    seed: int = 0
    data_seed: Optional[int] = None  # defaults to seed
    split: str = "0.8,0.1,0.1"
    normalize: bool = True
    out_dir: Optional[str] = None
    # sweep budgets (epochs, no early stopping)
    sweep_alrao_epochs: int = 30
    sweep_sgd_epochs: int = 50
    # convex check
    l2: float = 1e-2
    convex_steps: int = 5000
    convex_tol: float = 1e-3

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.optimizer in ("alrao", "alrao-adam"):
            if not (0 < self.eta_min <= self.eta_max):
                raise ConfigError(f"need 0 < eta_min <= eta_max, got ({self.eta_min}, {self.eta_max})")
            if self.n_cl < 1:
                raise ConfigError("n_cl must be >= 1")
            if not 0 < self.theta < 1:
                raise ConfigError("theta must be in (0, 1)")
            if self.averaging not in ("switch", "bma"):
                raise ConfigError(f"averaging must be 'switch' or 'bma', got {self.averaging!r}")
        if self.optimizer == "sgd" and not (self.lr is not None and self.lr > 0):
            raise ConfigError("sgd requires lr > 0")
        if self.lr is not None and self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("batch_size and max_epochs must be >= 1, patience >= 0")
        try:
            fr = [float(x) for x in self.split.split(",")]
        except ValueError:
            raise ConfigError(f"bad split {self.split!r}") from None
        if len(fr) != 3 or abs(sum(fr) - 1) > 1e-9 or min(fr) < 0:
            raise ConfigError(f"split must be three fractions summing to 1, got {self.split!r}")

    @property
    def split_fractions(self):
        return tuple(float(x) for x in self.split.split(","))

    @property
    def resolved_lr(self):
        if self.lr is None and self.optimizer == "adam":
            return 1e-3
        return self.lr

    @property
    def resolved_data_seed(self):
        return self.seed if self.data_seed is None else self.data_seed

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_lines(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name} = {'' if v is None else _fmt(v)}")
        return out


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(name, raw, typ):
    raw = raw.strip()
    optional = isinstance(typ, str) and typ.startswith("Optional")
    base = typ.replace("Optional[", "").rstrip("]") if isinstance(typ, str) else typ.__name__
    if optional and raw in ("", "none", "None"):
        return None
    try:
        if base == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {base}") from None
    return raw


_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def parse_overrides(pairs):
    """Turn ``{key: raw string}`` into typed values for TrainConfig fields."""
    out = {}
    for key, raw in pairs.items():
        name = key.strip().replace("-", "_")
        if name not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        out[name] = _coerce(name, str(raw), _FIELDS[name])
    return out


def parse_config_text(text):
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return parse_overrides(pairs)


def load_config(path=None, **overrides):
    """Read a config file, then apply overrides (typed values, or strings parsed like the file)."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            values.update(parse_config_text(f.read()))
    given = {k: v for k, v in overrides.items() if v is not None}
    values.update(parse_overrides({k: v for k, v in given.items() if isinstance(v, str)}))
    for k, v in given.items():
        if not isinstance(v, str):
            if k not in _FIELDS:
                raise ConfigError(f"unknown config key {k!r}")
            values[k] = v
    return TrainConfig(**values)
