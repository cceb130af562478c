"""Run configuration: a flat ``key = value`` text format with ``#`` comments.

Every key is validated before any work starts; errors carry the line number.
``RunConfig.to_text()`` writes the effective configuration (all defaults
resolved) and parses back to an identical object.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

from .fl_core import PartitionSpec

TASKS = ("toy-digits", "synthetic")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    task: str = "toy-digits"
    clients: int = 10
    tips: int = 2
    lam: float = 0.5
    alpha: float = 0.1
    p: int | None = None
    partition: str = "iid"
    seed: int = 0
    max_global_iters: int = 200
    patience: int = 5
    patience_unit: str = "round"  # round (K uploads) | check (one upload)
    local_epochs: int = 5
    lr: float = 0.01
    batch_size: int = 32
    target_accuracy: float | None = None
    stop_at_target: bool = True
    speed_factors: tuple[float, ...] | None = None  # None: log-uniform in [1, speed_max]
    speed_max: float = 5.0
    base_epoch_time: float = 1.0
    eval_cost_per_sample: float = 1e-3
    registry_query_cost: float = 0.0
    hidden: int = 64
    signature_groups: int = 8
    freshness_policy: str = "product"
    tip_policy: str = "dag-afl"
    synthetic_samples: int = 2000
    min_client_samples: int = 10
    trace: bool = False
    out_dir: str = "out"

    def __post_init__(self):
        self.validate()

    # key in the text format -> attribute name
    KEYS = {"lambda": "lam"}

    def validate(self) -> None:
        def bad(name, msg):
            raise ConfigError(f"{name}: {msg}")

        if self.task not in TASKS:
            bad("task", f"must be one of {TASKS}, got {self.task!r}")
        if self.clients < 1:
            bad("clients", "must be >= 1")
        if self.tips < 1:
            bad("tips", "must be >= 1")
        if not (math.isfinite(self.lam) and 0.0 <= self.lam <= 1.0):
            bad("lambda", f"must be in [0, 1], got {self.lam}")
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            bad("alpha", f"must be > 0, got {self.alpha}")
        n1 = min(self.tips, int(math.floor(self.lam * self.tips + 0.5)))
        if self.p is not None and self.p < self.tips - n1:
            bad("p", f"must be >= N2 = {self.tips - n1}")
        try:
            PartitionSpec.parse(self.partition, self.clients)
        except ValueError as exc:
            bad("partition", str(exc))
        if self.seed < 0 or self.seed >= 2 ** 64:
            bad("seed", "must be an unsigned 64-bit integer")
        if self.max_global_iters < 1:
            bad("max_global_iters", "must be >= 1")
        if self.patience < 0:
            bad("patience", "must be >= 0 (0 disables early stopping)")
        if self.patience_unit not in ("round", "check"):
            bad("patience_unit", "must be round or check")
        if self.local_epochs < 1:
            bad("local_epochs", "must be >= 1")
        if not (math.isfinite(self.lr) and self.lr > 0):
            bad("lr", "must be > 0")
        if self.batch_size < 1:
            bad("batch_size", "must be >= 1")
        if self.target_accuracy is not None and not 0.0 < self.target_accuracy <= 1.0:
            bad("target_accuracy", "must be in (0, 1]")
        if self.speed_factors is not None:
            if len(self.speed_factors) != self.clients:
                bad("speed_factors", f"needs {self.clients} values, got {len(self.speed_factors)}")
            if not all(math.isfinite(s) and s > 0 for s in self.speed_factors):
                bad("speed_factors", "values must be > 0")
        if not self.speed_max >= 1.0:
            bad("speed_max", "must be >= 1")
        for name in ("base_epoch_time", "eval_cost_per_sample", "registry_query_cost"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                bad(name, "must be >= 0")
        if self.base_epoch_time <= 0:
            bad("base_epoch_time", "must be > 0")
        if self.hidden < 1:
            bad("hidden", "must be >= 1")
        if not 1 <= self.signature_groups <= self.hidden:
            bad("signature_groups", f"must be in [1, hidden={self.hidden}]")
        if self.freshness_policy not in ("product", "tiebreak", "ignore"):
            bad("freshness_policy", "must be product, tiebreak or ignore")
        if self.tip_policy not in ("dag-afl", "random"):
            bad("tip_policy", "must be dag-afl or random")
        if self.synthetic_samples < self.clients:
            bad("synthetic_samples", "must be >= clients")
        if self.min_client_samples < 1:
            bad("min_client_samples", "must be >= 1")

    @property
    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec.parse(self.partition, self.clients, self.min_client_samples)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------ text format

    def to_text(self) -> str:
        lines = ["# effective configuration"]
        inv = {v: k for k, v in self.KEYS.items()}
        for f in dataclasses.fields(self):
            lines.append(f"{inv.get(f.name, f.name)} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        lines = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            name = cls.KEYS.get(key, key)
            if name not in fields:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if name in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            try:
                values[name] = _parse(name, value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {key}: {exc}") from None
            lines[name] = lineno
        values.update(overrides)
        try:
            return cls(**values)
        except ConfigError as exc:
            key = str(exc).split(":", 1)[0]
            name = cls.KEYS.get(key, key)
            if name in lines:
                raise ConfigError(f"line {lines[name]}: {exc}") from None
            raise

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), **overrides)


_OPTIONAL_INT = {"p"}
_OPTIONAL_FLOAT = {"target_accuracy"}
_INTS = {"clients", "tips", "seed", "max_global_iters", "patience", "local_epochs", "batch_size",
         "hidden", "signature_groups", "synthetic_samples", "min_client_samples"}
_FLOATS = {"lam", "alpha", "lr", "speed_max", "base_epoch_time", "eval_cost_per_sample",
           "registry_query_cost"}
_BOOLS = {"trace", "stop_at_target"}
_NONE_WORDS = {"auto", "none", ""}


def _parse(name: str, value: str):
    low = value.lower()
    if name in _OPTIONAL_INT:
        return None if low in _NONE_WORDS else int(value)
    if name in _OPTIONAL_FLOAT:
        return None if low in _NONE_WORDS else float(value)
    if name in _INTS:
        return int(value)
    if name in _FLOATS:
        return float(value)
    if name in _BOOLS:
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if name == "speed_factors":
        if low in _NONE_WORDS:
            return None
        return tuple(float(v) for v in value.replace(",", " ").split())
    return value


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return str(value)
