from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

VARIANTS = ("erm", "coral", "boda_coupled", "boda_decoupled")


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "boda_coupled"
    lam: float = 0.1
    gamma: float = 1.0
    distance: str = "euclidean"
    ce_form: str = "softmax"
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    hidden_dims: tuple[int, ...] = (64, 32)
    jitter_sigma: float = 0.05
    scale_lo: float = 0.9
    scale_hi: float = 1.1
    decoupled_head_epochs: int = 20
    head_reinit: bool = True
    ridge: float = 1e-4
    stats: str = "batch"  # "batch" or "running" (EMA, experimental)
    stats_decay: float = 0.9
    calibration_counts: str = "dataset"  # "dataset" or "batch"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: must be one of {', '.join(VARIANTS)}")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size: must be >= 2")
        if self.lam < 0:
            raise ConfigError("lam: must be >= 0")
        if self.gamma < 0:
            raise ConfigError("gamma: must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr: must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum: must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay: must be >= 0")
        if self.distance not in ("euclidean", "mahalanobis"):
            raise ConfigError("distance: must be euclidean or mahalanobis")
        if self.ce_form not in ("softmax", "bernoulli"):
            raise ConfigError("ce_form: must be softmax or bernoulli")
        if not 0 < self.scale_lo <= self.scale_hi:
            raise ConfigError("scale_lo/scale_hi: need 0 < scale_lo <= scale_hi")
        if self.jitter_sigma < 0:
            raise ConfigError("jitter_sigma: must be >= 0")
        if self.decoupled_head_epochs < 0:
            raise ConfigError("decoupled_head_epochs: must be >= 0")
        if not self.ridge > 0:
            raise ConfigError("ridge: must be > 0")
        if self.stats not in ("batch", "running"):
            raise ConfigError("stats: must be batch or running")
        if not 0 <= self.stats_decay < 1:
            raise ConfigError("stats_decay: must be in [0, 1)")
        if self.calibration_counts not in ("dataset", "batch"):
            raise ConfigError("calibration_counts: must be dataset or batch")
        if any(h < 1 for h in self.hidden_dims) or not self.hidden_dims:
            raise ConfigError("hidden_dims: need at least one positive width")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, value: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            v = value.strip().lower()
            if v in ("1", "true", "yes"):
                return True
            if v in ("0", "false", "no"):
                return False
            raise ValueError(value)
        if kind.startswith("tuple"):
            return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value.strip()


def parse_overrides(items) -> dict:
    """Turn ``key=value`` strings into typed TrainConfig fields."""
    out = {}
    for lineno, raw in enumerate(items, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{key}: unknown config key")
        out[key] = _coerce(key, value.strip())
    return out


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then the file, then ``overrides`` (highest precedence)."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        values.update(parse_overrides(text.splitlines()))
    values.update(overrides or {})
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"
