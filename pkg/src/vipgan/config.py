"""Run configuration: ``key = value`` text files with ``#`` comments.

Every :class:`HyperParams` field is a valid key, plus the dataset, run and
evaluation keys declared on :class:`RunConfig`. Command-line flags override
file values.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import HyperParams
from .renderer import CLASSES


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


MODES = ("known-test", "unknown-test")
METRICS = ("cosine", "euclidean")


@dataclass
class RunConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    seed: int = 0
    data: str = ""
    out: str = "run"
    mode: str = "known-test"
    # dataset generation
    classes: tuple = CLASSES
    instances_per_class: int = 20
    split_fraction: float = 0.8
    elevation: float = 30.0
    distance: float = 2.5
    fov: float = 40.0
    # evaluation
    metric: str = "cosine"
    svm_c: float = 1.0
    report_sections: int = 8

    def validate(self) -> "RunConfig":
        try:
            self.hp.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)} (got {self.mode!r})")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {', '.join(METRICS)} (got {self.metric!r})")
        for c in self.classes:
            if c not in CLASSES:
                raise ConfigError(f"classes: unknown class {c!r}")
        if self.instances_per_class < 2:
            raise ConfigError("instances_per_class must be >= 2")
        if not 0 < self.split_fraction < 1:
            raise ConfigError("split_fraction must be in (0, 1)")
        if self.svm_c <= 0:
            raise ConfigError("svm_c must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return self

    def set(self, key: str, raw: str) -> None:
        """Parse ``raw`` according to the type of ``key`` and assign it."""
        if key in _HP_FIELDS:
            current = getattr(self.hp, key)
            setattr(self.hp, key, _coerce(key, raw, current))
        elif key in _RUN_FIELDS:
            setattr(self, key, _coerce(key, raw, getattr(self, key)))
        else:
            raise ConfigError(f"unknown config key {key!r}")

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in _RUN_FIELDS}
        d.update(asdict(self.hp))
        return d


_HP_FIELDS = {f.name for f in fields(HyperParams)}
_RUN_FIELDS = [f.name for f in fields(RunConfig) if f.name != "hp"]


def _coerce(key: str, raw: str, current):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(current, int):
            return int(raw, 0)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if current and isinstance(current[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def parse_lines(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (``key=value`` strings or pairs)."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        for k, v in parse_lines(p.read_text(encoding="utf-8"), str(p)):
            cfg.set(k, v)
    for item in overrides:
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like key=value")
            item = item.split("=", 1)
        cfg.set(item[0].strip(), item[1])
    return cfg
