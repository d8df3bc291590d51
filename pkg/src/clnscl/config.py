"""Versioned key = value experiment configuration.

One ``key = value`` pair per line; ``#`` starts a comment. The first key must
be ``schema_version``. Sweep axes are written ``axis.<key> = v1, v2, ...``.
Unknown keys are errors.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

SCHEMA_VERSION = 1
MODES = ("coupled-sim", "coupled-encoder", "bounds", "verify", "sweep")
ETA_SCALINGS = ("1", "B^1/4", "sqrtB", "B")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def _int_or_none(v: str) -> int | None:
    return None if v.lower() == "none" else int(v)


def _objectives(v: str) -> tuple[str, ...]:
    items = tuple(s.strip() for s in v.split(",") if s.strip())
    for s in items:
        if s not in ("CL", "NSCL", "SCL", "CE", "DCL"):
            raise ValueError(f"unknown objective {s!r}")
    return items


def _float(v: str) -> float:
    return math.inf if v.lower() in ("inf", "infinity") else float(v)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "coupled-sim"
    target: str = "coupled-sim"
    # data
    C: int = 10
    n: int = 20
    N: int | None = None
    m: int = 16
    separation: float = 2.0
    noise: float = 0.1
    # optimisation
    B: int = 64
    tau: float = 0.5
    T: int = 100
    eta: float = 0.1
    schedule: str = "constant"
    warmup: int = 0
    eta_scaling: str = "1"
    eta_ref_B: int = 64
    delta: float = 0.1
    # encoder
    objectives: tuple[str, ...] = ("CL", "NSCL")
    hidden: int | None = 32
    out_dim: int = 16
    probe_size: int = 512
    embedding: str = "output"
    steps_per_epoch: int | None = None
    # bookkeeping
    master_seed: int = 0
    seeds: int = 1
    first_seed: int = 0
    trials: int = 1000
    axes: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {self.mode!r}")
        if self.target not in ("coupled-sim", "coupled-encoder"):
            raise ConfigError(f"target: expected coupled-sim or coupled-encoder, got {self.target!r}")
        if self.eta_scaling not in ETA_SCALINGS:
            raise ConfigError(f"eta_scaling: expected one of {ETA_SCALINGS}, got {self.eta_scaling!r}")
        if self.schedule not in ("constant", "cosine", "inverse-t"):
            raise ConfigError(f"schedule: unknown kind {self.schedule!r}")
        if self.embedding not in ("output", "hidden"):
            raise ConfigError(f"embedding: expected output or hidden, got {self.embedding!r}")
        if self.embedding == "hidden" and self.hidden is None:
            raise ConfigError("embedding: hidden needs hidden to be set")
        if self.seeds < 1:
            raise ConfigError("seeds: need at least one seed")
        if self.first_seed < 0:
            raise ConfigError("first_seed: must be nonnegative")
        if self.master_seed < 0 or self.master_seed >= 2**64:
            raise ConfigError("master_seed: must be a 64-bit unsigned integer")
        if self.N is not None and self.N % self.C:
            raise ConfigError(f"N: {self.N} is not divisible by C={self.C}")
        for key, values in self.axes.items():
            if key not in _SCALAR_KEYS or key in ("mode", "target", "objectives", "seeds", "first_seed"):
                raise ConfigError(f"axis.{key}: not a sweepable key")
            if not values:
                raise ConfigError(f"axis.{key}: empty axis")

    @property
    def per_class(self) -> int:
        return self.n if self.N is None else self.N // self.C

    @property
    def effective_eta(self) -> float:
        ratio = self.B / self.eta_ref_B
        power = {"1": 0.0, "B^1/4": 0.25, "sqrtB": 0.5, "B": 1.0}[self.eta_scaling]
        return self.eta * ratio**power

    def canonical(self) -> str:
        """Stable text form: every key, sorted, one per line."""
        lines = [f"schema_version = {SCHEMA_VERSION}"]
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name == "axes":
                continue
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        for key in sorted(self.axes):
            lines.append(f"axis.{key} = {', '.join(_format(v) for v in self.axes[key])}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_values(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


def _format(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(v)
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


_PARSERS = {
    "mode": str,
    "target": str,
    "C": int,
    "n": int,
    "N": _int_or_none,
    "m": int,
    "separation": _float,
    "noise": float,
    "B": int,
    "tau": float,
    "T": int,
    "eta": float,
    "schedule": str,
    "warmup": int,
    "eta_scaling": str,
    "eta_ref_B": int,
    "delta": float,
    "objectives": _objectives,
    "hidden": _int_or_none,
    "out_dim": int,
    "probe_size": int,
    "embedding": str,
    "steps_per_epoch": _int_or_none,
    "master_seed": int,
    "seeds": int,
    "first_seed": int,
    "trials": int,
}
_SCALAR_KEYS = set(_PARSERS)


def parse_value(key: str, raw: str):
    try:
        return _PARSERS[key](raw.strip())
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw.strip()!r} ({exc})") from None


def parse_config(text: str) -> ExperimentConfig:
    values: dict = {}
    axes: dict = {}
    seen_version = False
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if not seen_version:
            if key != "schema_version":
                raise ConfigError(f"{key}: the first key must be schema_version")
            if raw != str(SCHEMA_VERSION):
                raise ConfigError(f"schema_version: unsupported version {raw!r}")
            seen_version = True
            continue
        if key in values or key.removeprefix("axis.") in axes:
            raise ConfigError(f"{key}: duplicate key")
        if key.startswith("axis."):
            name = key[5:]
            if name not in _SCALAR_KEYS:
                raise ConfigError(f"{key}: unknown key")
            axes[name] = tuple(parse_value(name, v) for v in raw.split(",") if v.strip())
            continue
        if key not in _SCALAR_KEYS:
            raise ConfigError(f"{key}: unknown key")
        values[key] = parse_value(key, raw)
    if not seen_version:
        raise ConfigError("schema_version: missing")
    return ExperimentConfig(axes=axes, **values)


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
