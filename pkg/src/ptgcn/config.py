"""Run configuration: defaults, INI-style file parsing and overrides."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

ABLATIONS = ("none", "static-items", "no-time", "no-pos", "no-time-no-pos")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    seed: int = 0
    d: int = 160
    depth: int = 2
    # widths[l-1] is the neighborhood length of layer l; the last entry is the root layer
    widths: tuple[int, ...] = (20, 50)
    agg_layers: int = 6
    heads: int = 1
    dropout: float = 0.1
    lr: float = 1e-4
    lam: float = 1e-5
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 25
    time_unit_seconds: float = 86400.0
    time_buckets: int = 34
    activation: str = "relu"
    ablate: str = "none"
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d < 2 or self.d % 2:
            raise ConfigError("d must be even and >= 2")
        if self.depth < 0 or len(self.widths) != self.depth:
            raise ConfigError(f"widths needs exactly depth={self.depth} entries, got {self.widths}")
        if any(w < 1 for w in self.widths):
            raise ConfigError("widths must be >= 1")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError("heads must divide d")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.ablate not in ABLATIONS:
            raise ConfigError(f"ablate must be one of {ABLATIONS}")
        if self.activation not in ("relu", "tanh", "identity"):
            raise ConfigError("activation must be relu, tanh or identity")
        if self.time_buckets < 2 or self.time_unit_seconds <= 0:
            raise ConfigError("bad time bucketing settings")
        if self.batch_size < 1 or self.agg_layers < 0 or self.workers < 1:
            raise ConfigError("batch_size, workers must be >= 1 and agg_layers >= 0")

    @property
    def use_time(self) -> bool:
        return self.ablate not in ("no-time", "no-time-no-pos")

    @property
    def use_pos(self) -> bool:
        return self.ablate not in ("no-pos", "no-time-no-pos")

    @property
    def static_items(self) -> bool:
        return self.ablate == "static-items"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["widths"] = list(self.widths)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls().updated(data)

    def updated(self, changes: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(self)}
        clean = {}
        for key, value in changes.items():
            key = "lam" if key == "lambda" else key
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            clean[key] = _coerce(known[key].type, value)
        if "depth" in clean and "widths" not in clean:
            w = self.widths
            depth = clean["depth"]
            clean["widths"] = tuple(w[-depth:]) if depth <= len(w) else (w[0],) * (depth - len(w)) + tuple(w)
        return replace(self, **clean)


def _coerce(typ, value):
    typ = str(typ)
    if "tuple" in typ:
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        return tuple(int(v) for v in value)
    if typ in ("int", "<class 'int'>"):
        return int(value)
    if typ in ("float", "<class 'float'>"):
        return float(value)
    return str(value)


def load_config(path: str | Path, base: ModelConfig | None = None) -> tuple[ModelConfig, dict]:
    """Parse a flat ``key = value`` file.

    Returns the model config plus any run-level keys (paths, protocol) that are
    not model settings.
    """
    text = Path(path).read_text(encoding="utf-8")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    values = dict(parser["run"])
    run_keys = {k: values.pop(k) for k in list(values) if k in RUN_KEYS}
    return (base or ModelConfig()).updated(values), run_keys


RUN_KEYS = ("train", "valid", "test", "checkpoint", "out", "protocol", "k", "cohorts")
