"""Experiment configuration: a JSON document with nested sections.

Every section is a frozen dataclass.  :func:`parse_config` validates the
document and reports problems by field path (``integrator.dt``), and
:meth:`ExperimentConfig.to_dict` produces a document that parses back to an
equal object.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .systems import SYSTEMS

SEED_ENV = "EFFDYN_SEED"
METHODS = ("quadrature", "binned", "fiber")
CASES = {"case1": "case1-linear", "case2": "case2-linear", "case3": "case3-linear"}


class ConfigError(ConfigurationError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path, message, line=None):
        self.path = path
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{path or '<root>'}: {message}")


@dataclass(frozen=True)
class SystemSection:
    name: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class IntegratorSection:
    dt: float = 1e-3
    n_steps: int = 1000
    n_replicas: int = 100
    burn_in_steps: int = 0
    thinning: int = 1
    fast_fraction: Optional[float] = None  # dt <= fast_fraction / rho when set


@dataclass(frozen=True)
class GridSection:
    lo: tuple = (-3.0,)
    hi: tuple = (3.0,)
    num: tuple = (31,)


@dataclass(frozen=True)
class EstimationSection:
    method: str = "quadrature"
    n_samples: int = 20000
    walkers: int = 20
    fiber_steps: int = 2000
    fiber_dt: float = 1e-3
    fiber_burn_in: int = 200


@dataclass(frozen=True)
class SweepSection:
    parameter: str
    values: tuple


@dataclass(frozen=True)
class OutputSection:
    directory: str = "effdyn-run"
    formats: tuple = ("csv",)
    trajectory_pattern: Optional[str] = None


@dataclass(frozen=True)
class FrobeniusSection:
    n_points: int = 100
    box_lo: Optional[tuple] = None
    box_hi: Optional[tuple] = None


@dataclass(frozen=True)
class BoundsSection:
    kind: str = "thm1"
    times: tuple = (0.25, 0.5, 1.0)
    params: Optional[dict] = None
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemSection
    integrator: IntegratorSection = field(default_factory=IntegratorSection)
    grid: GridSection = field(default_factory=GridSection)
    estimation: EstimationSection = field(default_factory=EstimationSection)
    sweep: Optional[SweepSection] = None
    output: OutputSection = field(default_factory=OutputSection)
    frobenius: FrobeniusSection = field(default_factory=FrobeniusSection)
    bounds: BoundsSection = field(default_factory=BoundsSection)
    frobenius_tol: float = 1e-6
    horizon: float = 1.0
    seed: int = 0
    workers: int = 1

    def to_dict(self):
        d = asdict(self)
        return json.loads(json.dumps(d))  # tuples -> lists

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self):
        """SHA-256 of the canonical JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_seed(self, seed):
        return _replace(self, seed=int(seed))


def _replace(obj, **kw):
    return replace(obj, **kw)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _num(path, v, kind=float, positive=False, nonneg=False, allow_none=False):
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, f"expected a number, got {v!r}")
    if kind is int:
        if float(v) != int(v):
            raise ConfigError(path, f"expected an integer, got {v!r}")
        v = int(v)
    else:
        v = float(v)
        if not np.isfinite(v):
            raise ConfigError(path, "must be finite")
    if positive and not v > 0:
        raise ConfigError(path, "must be positive")
    if nonneg and v < 0:
        raise ConfigError(path, "must be nonnegative")
    return v


def _vec(path, v, kind=float):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        v = [v]
    if not isinstance(v, list) or not v:
        raise ConfigError(path, "expected a nonempty list of numbers")
    return tuple(_num(f"{path}[{i}]", x, kind) for i, x in enumerate(v))


def _section(path, cls, raw, checks):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected an object")
    known = {f.name for f in fields(cls)}
    for k in raw:
        if k not in known:
            raise ConfigError(f"{path}.{k}", "unknown field")
    vals = {}
    for k, v in raw.items():
        fn = checks.get(k)
        vals[k] = fn(f"{path}.{k}", v) if fn else v
    return cls(**vals)


def parse_config(data) -> ExperimentConfig:
    """Validate a decoded JSON document and build an :class:`ExperimentConfig`."""
    if not isinstance(data, dict):
        raise ConfigError("", "top level must be an object")
    known = {f.name for f in fields(ExperimentConfig)}
    for k in data:
        if k not in known:
            raise ConfigError(k, "unknown field")

    raw_sys = data.get("system")
    if not isinstance(raw_sys, dict) or "name" not in raw_sys:
        raise ConfigError("system", "needs an object with a 'name'")
    for k in raw_sys:
        if k not in ("name", "params"):
            raise ConfigError(f"system.{k}", "unknown field")
    name = raw_sys["name"]
    if name not in SYSTEMS:
        raise ConfigError("system.name", f"unknown system {name!r}; known: {sorted(SYSTEMS)}")
    params = raw_sys.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigError("system.params", "expected an object")
    params = {k: _num(f"system.params.{k}", v) for k, v in params.items()}
    system = SystemSection(name=name, params=params)

    integ = _section("integrator", IntegratorSection, data.get("integrator"), {
        "dt": lambda p, v: _num(p, v, positive=True),
        "n_steps": lambda p, v: _num(p, v, int, nonneg=True),
        "n_replicas": lambda p, v: _num(p, v, int, positive=True),
        "burn_in_steps": lambda p, v: _num(p, v, int, nonneg=True),
        "thinning": lambda p, v: _num(p, v, int, positive=True),
        "fast_fraction": lambda p, v: _num(p, v, positive=True, allow_none=True),
    })
    if integ.n_steps % integ.thinning:
        raise ConfigError("integrator.thinning", f"must divide n_steps={integ.n_steps}")

    grid = _section("grid", GridSection, data.get("grid"), {
        "lo": _vec, "hi": _vec, "num": lambda p, v: _vec(p, v, int),
    })
    if not len(grid.lo) == len(grid.hi) == len(grid.num):
        raise ConfigError("grid", "lo, hi and num must have equal length")
    for i, (lo, hi, n) in enumerate(zip(grid.lo, grid.hi, grid.num)):
        if not hi > lo:
            raise ConfigError(f"grid.hi[{i}]", "must exceed grid.lo")
        if n < 2:
            raise ConfigError(f"grid.num[{i}]", "need at least two nodes")

    def method(p, v):
        if v not in METHODS:
            raise ConfigError(p, f"expected one of {METHODS}")
        return v

    est = _section("estimation", EstimationSection, data.get("estimation"), {
        "method": method,
        "n_samples": lambda p, v: _num(p, v, int, positive=True),
        "walkers": lambda p, v: _num(p, v, int, positive=True),
        "fiber_steps": lambda p, v: _num(p, v, int, positive=True),
        "fiber_dt": lambda p, v: _num(p, v, positive=True),
        "fiber_burn_in": lambda p, v: _num(p, v, int, nonneg=True),
    })

    sweep = None
    if data.get("sweep") is not None:
        raw = data["sweep"]
        if not isinstance(raw, dict):
            raise ConfigError("sweep", "expected an object")
        for k in raw:
            if k not in ("parameter", "values"):
                raise ConfigError(f"sweep.{k}", "unknown field")
        if not isinstance(raw.get("parameter"), str):
            raise ConfigError("sweep.parameter", "expected a parameter name")
        values = raw.get("values")
        if not isinstance(values, list) or not values:
            raise ConfigError("sweep.values", "sweep needs a nonempty list of values")
        values = tuple(_num(f"sweep.values[{i}]", v, positive=True) for i, v in enumerate(values))
        d = np.diff(values)
        if not (np.all(d > 0) or np.all(d < 0)):
            raise ConfigError("sweep.values", "values must be strictly monotone")
        sweep = SweepSection(parameter=raw["parameter"], values=values)

    def formats(p, v):
        if not isinstance(v, list) or not all(f in ("csv", "json") for f in v):
            raise ConfigError(p, "expected a list drawn from ['csv', 'json']")
        return tuple(v)

    def opt_str(p, v):
        if v is not None and not isinstance(v, str):
            raise ConfigError(p, "expected a string")
        return v

    def string(p, v):
        if not isinstance(v, str) or not v:
            raise ConfigError(p, "expected a nonempty string")
        return v

    out = _section("output", OutputSection, data.get("output"), {
        "directory": string, "formats": formats, "trajectory_pattern": opt_str,
    })
    if out.trajectory_pattern is not None and "{replica}" not in out.trajectory_pattern:
        raise ConfigError("output.trajectory_pattern", "must contain '{replica}'")

    frob = _section("frobenius", FrobeniusSection, data.get("frobenius"), {
        "n_points": lambda p, v: _num(p, v, int, positive=True),
        "box_lo": lambda p, v: None if v is None else _vec(p, v),
        "box_hi": lambda p, v: None if v is None else _vec(p, v),
    })

    def kind(p, v):
        from .bounds import KINDS

        if v not in KINDS:
            raise ConfigError(p, f"expected one of {KINDS}")
        return v

    def obj(p, v):
        if v is not None and not isinstance(v, dict):
            raise ConfigError(p, "expected an object")
        return v

    bnd = _section("bounds", BoundsSection, data.get("bounds"), {
        "kind": kind, "times": lambda p, v: _vec(p, v), "params": obj,
        "extras": lambda p, v: obj(p, v) or {},
    })
    if any(t < 0 for t in bnd.times):
        raise ConfigError("bounds.times", "times must be nonnegative")

    return ExperimentConfig(
        system=system,
        integrator=integ,
        grid=grid,
        estimation=est,
        sweep=sweep,
        output=out,
        frobenius=frob,
        bounds=bnd,
        frobenius_tol=_num("frobenius_tol", data.get("frobenius_tol", 1e-6), positive=True),
        horizon=_num("horizon", data.get("horizon", 1.0), positive=True),
        seed=_num("seed", data.get("seed", 0), int, nonneg=True),
        workers=_num("workers", data.get("workers", 1), int, positive=True),
    )


def loads_config(text) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc.msg} (column {exc.colno})", line=exc.lineno) from None
    try:
        return parse_config(data)
    except ConfigError as exc:
        if exc.line is not None or not exc.path:
            raise
        line = _key_line(text, exc.path)
        if line is None:
            raise
        raise ConfigError(exc.path, str(exc).split(": ", 1)[1], line=line) from None


def _key_line(text, path):
    """1-based line of the innermost key of a dotted field path, searching
    for the keys in order so that repeated names resolve to the right section."""
    pos = 0
    keys = [k.split("[")[0] for k in path.split(".") if k]
    for key in keys:
        found = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if found is None:
            return None
        pos = found.start()
    return text.count("\n", 0, pos) + 1


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc}") from None
    return loads_config(text)


def resolve_seed(cfg: ExperimentConfig, flag_seed=None, environ=None) -> ExperimentConfig:
    """Apply seed precedence: environment variable, then flag, then file."""
    environ = os.environ if environ is None else environ
    env = environ.get(SEED_ENV)
    if env is not None and env != "":
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(SEED_ENV, f"not an integer: {env!r}") from None
        if seed < 0:
            raise ConfigError(SEED_ENV, "must be nonnegative")
        return cfg.with_seed(seed)
    if flag_seed is not None:
        return cfg.with_seed(flag_seed)
    return cfg
