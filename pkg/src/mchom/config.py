"""Run configuration: YAML file with nested sections, validated and hashed."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np
import yaml

from .field import MEDIUM_KINDS, GeometrySpec

__all__ = ["RunConfig", "load_config", "LOADS", "resolve_load", "CACHE_ENV", "ConfigError"]

CACHE_ENV = "MCHOM_CACHE_DIR"

# named right-hand sides; a plain number means a constant load
LOADS = {
    "zero": 0.0,
    "one": 1.0,
    "sin-sin": lambda x, y: 2 * np.pi**2 * np.sin(np.pi * x) * np.sin(np.pi * y),
    "mixed": lambda x, y: np.sin(3 * np.pi * x) * np.cos(2 * np.pi * y) + x,
}


class ConfigError(ValueError):
    pass


def resolve_load(f):
    if isinstance(f, (int, float)):
        return float(f)
    try:
        return LOADS[f]
    except KeyError:
        raise ConfigError(f"unknown load {f!r}; use a number or one of {sorted(LOADS)}") from None


def _fraction(v, what):
    """Accept 0.25, '1/4' or 4 (meaning 1/4 when > 1)."""
    if isinstance(v, str):
        num, _, den = v.partition("/")
        try:
            v = float(num) / float(den) if den else float(num)
        except ValueError:
            raise ConfigError(f"{what}: cannot parse {v!r}") from None
    v = float(v)
    if v > 1:
        v = 1.0 / v
    if not 0 < v <= 1:
        raise ConfigError(f"{what} must lie in (0, 1], got {v}")
    return v


def _cells(v, n, what):
    c = v * n
    r = int(round(c))
    if abs(c - r) > 1e-9 * max(c, 1):
        raise ConfigError(f"{what}={v:g} is not a multiple of the fine mesh size 1/{n}")
    return r


@dataclass
class RunConfig:
    """Everything a run depends on.

    ``scale_eps`` and ``scale`` are the subcell size ``H_ε`` and the coarse
    size ``H``; ``k_layers=None`` selects the default layer rule.
    ``rve_window`` is the width of a centered window (``None``: full cells).
    ``sweep`` maps parameter names to lists for the study command, and
    ``stages`` selects which metrics a study or pipeline computes.
    """

    medium: GeometrySpec = field(default_factory=GeometrySpec)
    n_fine: int = 64
    scale_eps: float = 1.0 / 8
    scale: float = 1.0 / 4
    k_layers: int | None = None
    shifts: list = field(default_factory=lambda: [[0.0, 0.0]])
    bc: str = "dirichlet"
    rve_window: float | None = None
    load: object = "one"
    tol: float = 1e-10
    identity_tol: float = 1e-11
    mean_tol: float = 1e-7
    out: str = "out"
    cache: str | None = None
    threads: int = 1
    seed: int = 0
    sweep: dict = field(default_factory=dict)
    stages: list = field(default_factory=lambda: ["nlmc", "macro"])

    def __post_init__(self):
        if isinstance(self.medium, dict):
            self.medium = GeometrySpec.from_dict(self.medium)
        self.scale_eps = _fraction(self.scale_eps, "scale_eps")
        self.scale = _fraction(self.scale, "scale")
        if self.rve_window is not None:
            self.rve_window = _fraction(self.rve_window, "rve_window")
        self.validate()

    def validate(self):
        n = self.n_fine
        if not isinstance(n, (int, np.integer)) or n < 2:
            raise ConfigError(f"n_fine must be an integer >= 2, got {n!r}")
        if self.medium.kind not in MEDIUM_KINDS:
            raise ConfigError(f"unknown medium kind {self.medium.kind!r}")
        m_eps = _cells(self.scale_eps, n, "scale_eps")
        m = _cells(self.scale, n, "scale")
        if m_eps < 2:
            raise ConfigError("scale_eps must span at least two fine cells "
                              "(single-cell subcells over-constrain the cell problems)")
        if n % m or m % m_eps:
            raise ConfigError("need scale_eps | scale | 1 on the fine grid")
        if m_eps > m:
            raise ConfigError("need scale_eps <= scale")
        if self.rve_window is not None:
            w = _cells(self.rve_window, n, "rve_window")
            if w % m_eps or w > m:
                raise ConfigError("rve_window must be a multiple of scale_eps inside one coarse cell")
        if self.k_layers is not None and self.k_layers < 0:
            raise ConfigError("k_layers must be nonnegative")
        if self.bc not in ("natural", "dirichlet"):
            raise ConfigError(f"bc must be 'natural' or 'dirichlet', got {self.bc!r}")
        for name in ("tol", "identity_tol", "mean_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        for z in self.shifts:
            if len(z) != 2:
                raise ConfigError(f"shift {z!r} is not a 2-vector")
            for c in z:
                _cells(float(c), n, "shift")
        if not set(self.stages) <= {"nlmc", "macro"} or not self.stages:
            raise ConfigError(f"stages must be a nonempty subset of ['nlmc', 'macro'], got {self.stages!r}")
        resolve_load(self.load)
        unknown = set(self.sweep) - {f.name for f in fields(self)} - {"kappa_high"}
        if unknown:
            raise ConfigError(f"cannot sweep over {sorted(unknown)}")

    @property
    def resolved_k(self):
        from .cells import default_k_layers

        return default_k_layers(self.scale_eps) if self.k_layers is None else self.k_layers

    @property
    def cache_dir(self):
        """Cache directory; the environment variable wins over the file."""
        return os.environ.get(CACHE_ENV) or self.cache

    def to_dict(self):
        d = {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}
        d["medium"] = self.medium.to_dict()
        return d

    def digest(self):
        """Hash of the settings that determine results (paths and threads excluded)."""
        d = self.to_dict()
        for k in ("out", "cache", "threads", "sweep", "stages"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_(self, **changes):
        if "kappa_high" in changes:
            changes["medium"] = replace(self.medium, kappa_high=float(changes.pop("kappa_high")))
        return replace(self, **changes)

    def write(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump({**self.to_dict(), "config_hash": self.digest()}, fh, sort_keys=False)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        d.pop("config_hash", None)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        if "medium" in d:
            try:
                m = dict(d["medium"] or {})
                for key in ("period", "inclusion_size", "channel_width"):
                    if m.get(key) is not None:
                        m[key] = _fraction(m[key], f"medium.{key}")
                d["medium"] = GeometrySpec.from_dict(m)
            except TypeError as err:
                raise ConfigError(f"medium: {err}") from None
        return cls(**d)


def load_config(path=None, **overrides):
    """Read a YAML config (or defaults) and apply non-None ``overrides``."""
    d = {}
    if path is not None:
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
    d.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(d)
