"""Training configuration and the ``key = value`` config-file format.

Keys are dataclass field names, dotted for nested configs::

    # comment
    lr = 1e-3
    seeds = 0, 1, 2
    model.d_model = 32
    strategy.kind = Amplify
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .mixup import StrategyConfig
from .model import ModelConfig


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    lr: float = 1e-3
    warmup_fraction: float = 0.10
    schedule: str = "cosine"
    batch_size: int = 32
    eval_batch_size: int = 256
    max_epochs: int = 15
    early_stop_patience: int = 5
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    eval_split_fraction: float = 0.1
    trace_attention: bool = False
    min_count: int = 1
    noise_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 so a permuted copy can differ")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.max_epochs < 0 or self.early_stop_patience < 1:
            raise ConfigError("max_epochs must be >= 0 and early_stop_patience >= 1")
        if not 0.0 < self.eval_split_fraction < 1.0:
            raise ConfigError("eval_split_fraction must lie in (0, 1)")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")


def _strip_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def field_types(cls, prefix: str = "") -> dict[str, object]:
    """Flattened ``{dotted_name: type}`` for every leaf field of a config dataclass."""
    out = {}
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            out.update(field_types(tp, f"{prefix}{f.name}."))
        else:
            out[prefix + f.name] = tp
    return out


FIELD_TYPES = field_types(TrainConfig)


def parse_value(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    tp, optional = _strip_optional(FIELD_TYPES[key])
    raw = raw.strip()
    if optional and raw.lower() in ("", "none", "null"):
        return None
    try:
        if tp is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typing.get_origin(tp) is list:
            (inner,) = typing.get_args(tp)
            if raw == "[]":
                return []
            return [inner(tok) for tok in raw.replace(",", " ").split()]
        return tp(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def read_config_file(path) -> dict[str, object]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, raw)
    return values


def build_config(values: dict[str, object] | None = None) -> TrainConfig:
    """Assemble a TrainConfig from flat dotted overrides on top of the defaults."""
    values = dict(values or {})
    nested: dict[str, dict] = {"model": {}, "strategy": {}}
    top = {}
    for key, val in values.items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        head, _, rest = key.partition(".")
        if rest:
            nested[head][rest] = val
        else:
            top[key] = val
    try:
        return TrainConfig(model=ModelConfig(**nested["model"]),
                           strategy=StrategyConfig(**nested["strategy"]), **top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def flatten(cfg) -> dict[str, object]:
    out = {}
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if dataclasses.is_dataclass(val):
            out.update({f"{f.name}.{k}": v for k, v in flatten(val).items()})
        else:
            out[f.name] = val
    return out


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key, val in flatten(cfg).items():
        if isinstance(val, list):
            val = ", ".join(map(str, val)) or "[]"
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
