from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class AttackConfig:
    depth: int = 55
    extras: int = 3
    base: float = 10.0
    D: int = 38
    min_gap: float = 0.1
    strategy: str = "neuron"
    seed: int = 0
    oracle: str = "direct"
    verify: bool = False
    workers: int = 1
    # input-centric calibration probes powers of two
    input_base: float = 2.0
    input_D: int = 64
    grid_resolution: float = 0.25
    grid_span: float = 50.0
    grid_scans: int = 8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.depth < 0 or self.extras < 0 or self.D < 1 or self.input_D < 1:
            raise ConfigError("depth, extras must be >= 0 and D >= 1")
        if self.base <= 1 or self.input_base <= 1:
            raise ConfigError("calibration base must exceed 1")
        if self.min_gap <= 0 or self.grid_resolution <= 0 or self.grid_span <= 0:
            raise ConfigError("min_gap, grid_resolution and grid_span must be positive")
        if self.strategy not in ("neuron", "input"):
            raise ConfigError(f"strategy must be 'neuron' or 'input', not {self.strategy!r}")
        if self.oracle not in ("direct", "trace"):
            raise ConfigError(f"oracle must be 'direct' or 'trace', not {self.oracle!r}")
        if self.workers < 1 or self.grid_scans < 1:
            raise ConfigError("workers and grid_scans must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            typ = type(getattr(cls(), k))
            try:
                kw[k] = _coerce(typ, v)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad value for {k}: {v!r}") from e
        return cls(**kw)

    def replace(self, **kw) -> "AttackConfig":
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return AttackConfig.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "AttackConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)


def _coerce(typ, v):
    if typ is bool:
        if isinstance(v, str):
            low = v.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        return bool(v)
    if typ is int:
        if isinstance(v, float) and not v.is_integer():
            raise ValueError(v)
        return int(v)
    return typ(v)
