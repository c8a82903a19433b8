"""Named experiments: scaling sweeps for the three linear case studies and the
end-to-end pipeline that writes a reproducible run directory."""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .bounds import BoundParams, bound, fit_scaling, minimize_dissipative
from .config import CASES, ExperimentConfig
from .coupled import cosimulate
from .effective import (
    EffectiveModel,
    ZGrid,
    estimate_dissipativity,
    estimate_effective,
    estimate_kappas,
    estimate_lipschitz,
    estimate_rho,
    quadrature_oracle,
)
from .errors import ConfigurationError, EffdynError, FitError
from .sampler import INIT_STREAM, IntegratorConfig, replica_rng
from .systems import BuiltinSystem, make_system


class PipelineError(EffdynError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")


def make_grid(cfg: ExperimentConfig) -> ZGrid:
    g = cfg.grid
    return ZGrid.uniform(list(g.lo), list(g.hi), list(g.num))


def equilibrium_samples(system: BuiltinSystem, n, seed, replica=0):
    """Exact equilibrium draws from the system's sampler on a dedicated stream."""
    if system.sample_equilibrium is None:
        raise ConfigurationError(f"{system.name} has no equilibrium sampler")
    return system.sample_equilibrium(replica_rng(seed, replica, INIT_STREAM + 10), int(n))


def build_model(system: BuiltinSystem, cfg: ExperimentConfig) -> EffectiveModel:
    """Effective model on the configured grid by the configured method."""
    grid = make_grid(cfg)
    est = cfg.estimation
    if est.method == "quadrature":
        return quadrature_oracle(system, grid)
    if est.method == "binned":
        x = equilibrium_samples(system, est.n_samples, cfg.seed)
        return estimate_effective(system.spec, grid, "binned", samples=x)
    ic = IntegratorConfig(
        dt=est.fiber_dt, n_steps=est.fiber_steps, n_replicas=est.walkers, seed=cfg.seed,
        burn_in_steps=est.fiber_burn_in,
    )
    q = equilibrium_samples(system, est.n_samples, cfg.seed)
    return estimate_effective(system.spec, grid, "fiber", config=ic, x0=system.start_on_fiber, q_samples=q)


def integrator_for(system: BuiltinSystem, cfg: ExperimentConfig, rho=None):
    """Integrator settings reaching ``cfg.horizon``; with ``fast_fraction`` set,
    ``dt`` is capped at ``fast_fraction / rho`` so the fastest fiber mode is
    resolved."""
    ic = cfg.integrator
    dt = ic.dt
    if ic.fast_fraction is not None:
        if rho is None:
            rho = estimate_rho(system.spec, np.zeros(system.spec.m), system.chart)
        dt = min(dt, ic.fast_fraction / rho)
    n_steps = int(round(cfg.horizon / dt))
    dt = cfg.horizon / n_steps
    return IntegratorConfig(dt=dt, n_steps=n_steps, n_replicas=ic.n_replicas, seed=cfg.seed,
                            burn_in_steps=ic.burn_in_steps, thinning=1)


def record_schedule(n_steps, n_records=10):
    return np.unique(np.rint(np.linspace(0, n_steps, n_records + 1)).astype(int))


# ---------------------------------------------------------------------------
# scaling sweeps
# ---------------------------------------------------------------------------

SCALING_HEADER = ["parameter", "value", "t", "mean_sq_sup", "se_sup", "marginal_mse", "se_marginal",
                  "excursions", "dt", "n_steps", "status"]


@dataclass
class ScalingResult:
    case: str
    parameter: str
    rows: list
    fit: Optional[object] = None
    fit_error: Optional[str] = None

    def points(self):
        return [(r["value"], r["mean_sq_sup"]) for r in self.rows if r["status"] == "ok"]

    def write_csv(self, path):
        """Write the table to a path or an open text stream."""
        return write_pairs(path, SCALING_HEADER, [[r[k] for k in SCALING_HEADER] for r in self.rows])

    def fit_dict(self):
        d = {"case": self.case, "parameter": self.parameter, "n_points": len(self.points())}
        if self.fit is not None:
            d.update(slope=self.fit.slope, stderr=self.fit.stderr, intercept=self.fit.intercept)
        else:
            d["skipped"] = self.fit_error
        return d


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def run_case_experiment(case, cfg: ExperimentConfig, progress=None) -> ScalingResult:
    """Sweep one parameter of a linear case study and fit the power law of
    the mean squared sup-error at ``cfg.horizon``.

    Each sweep point builds the system, its effective model and integrator
    settings, then co-simulates.  A failing point is recorded with its error
    and skipped by the fit.
    """
    if case not in CASES:
        raise ConfigurationError(f"unknown case {case!r}; expected one of {sorted(CASES)}")
    if cfg.sweep is None:
        raise ConfigurationError("scaling experiments need a sweep section")
    name = CASES[case]
    rows = []
    for value in cfg.sweep.values:
        row = {"parameter": cfg.sweep.parameter, "value": float(value), "t": cfg.horizon}
        try:
            params = dict(cfg.system.params)
            params[cfg.sweep.parameter] = value
            system = make_system(name, **params)
            model = build_model(system, cfg)
            ic = integrator_for(system, cfg)
            rep = cosimulate(system.spec, model, ic, system.sample_equilibrium,
                             record_steps=record_schedule(ic.n_steps), workers=cfg.workers)
            s = rep.summary()
            row.update({k: s[k] for k in ("mean_sq_sup", "se_sup", "marginal_mse", "se_marginal", "excursions")})
            row.update(dt=ic.dt, n_steps=ic.n_steps, status="unreliable" if rep.unreliable else "ok")
        except EffdynError as exc:
            row.update(mean_sq_sup="", se_sup="", marginal_mse="", se_marginal="", excursions="",
                       dt="", n_steps="", status=f"error: {type(exc).__name__}: {exc}")
        rows.append(row)
        if progress:
            progress(row)
    res = ScalingResult(case=case, parameter=cfg.sweep.parameter, rows=rows)
    try:
        res.fit = fit_scaling(res.points())
    except FitError as exc:
        res.fit_error = str(exc)
    return res


# ---------------------------------------------------------------------------
# bound parameters
# ---------------------------------------------------------------------------

def estimate_bound_params(system: BuiltinSystem, model: EffectiveModel, cfg: ExperimentConfig):
    """kappa from equilibrium samples, rho on the fiber grid (1D fibers only;
    otherwise it must come from ``cfg.bounds.params``), Lipschitz and
    dissipativity constants from the model."""
    supplied = dict(cfg.bounds.params or {})
    x = equilibrium_samples(system, cfg.estimation.n_samples, cfg.seed, replica=1)
    kap = estimate_kappas(system.spec, x)
    if "rho" in supplied:
        rho = float(supplied["rho"])
    elif system.chart is not None and system.chart.dim == 1:
        nodes = model.grid.nodes().reshape(-1, model.m)
        rho = min(estimate_rho(system.spec, z, system.chart) for z in nodes)
    else:
        raise ConfigurationError("rho cannot be estimated for this geometry; supply bounds.params.rho")
    L_b, L_s = estimate_lipschitz(model)
    L_d = estimate_dissipativity(model)
    values = dict(kappa1=kap.kappa1, kappa2=kap.kappa2, rho=rho, L_b=L_b, L_sigma=L_s,
                  beta=system.spec.beta, L_d=L_d)
    values.update({k: float(v) for k, v in supplied.items() if k != "rho"})
    return BoundParams(**values), kap


def bound_table(params: BoundParams, kind, times, extras=None):
    """``[(t, bound)]`` for one bound kind; dissipative kinds without explicit
    ``v1, v2`` are minimized over the default grid."""
    extras = dict(extras or {})
    rows = []
    for t in times:
        if kind.startswith("diss") and ("v1" not in extras or "v2" not in extras):
            value = minimize_dissipative(kind, params, t)[0]
        else:
            value = bound(kind, params, t, **extras)
        rows.append((float(t), float(value)))
    return rows


def write_pairs(path, header, rows):
    """CSV with a header row, to a path or an open text stream."""
    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])

    if hasattr(path, "write"):
        emit(path)
        return path
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        emit(fh)
    return path


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_pipeline(cfg: ExperimentConfig, directory=None, progress=None) -> Path:
    """Model, constants, co-simulation, bound table (and a scaling sweep when
    configured) written to one run directory with a manifest.

    The manifest records the configuration digest, seed, library versions,
    wall-clock time and a SHA-256 checksum per output file.  Numeric outputs
    are identical across reruns of the same configuration.
    """
    start = time.perf_counter()
    out = Path(directory or cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {}
    summary = {}

    def stage(name, fn):
        if progress:
            progress(name)
        try:
            return fn()
        except EffdynError as exc:
            raise PipelineError(name, exc) from exc
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise PipelineError(name, exc) from exc

    system = stage("system", lambda: make_system(cfg.system.name, **cfg.system.params))
    model = stage("model", lambda: build_model(system, cfg))
    outputs["model"] = model.save(out / "model.effdyn")
    outputs["model_csv"] = model.write_csv(out / "model.csv")

    ic = stage("integrator", lambda: integrator_for(system, cfg))
    rep = stage("cosim", lambda: cosimulate(system.spec, model, ic, system.sample_equilibrium,
                                            record_steps=record_schedule(ic.n_steps), workers=cfg.workers))
    outputs["cosim"] = rep.write_csv(out / "cosim.csv")
    summary["cosim"] = rep.summary()

    def bounds_stage():
        params, kap = estimate_bound_params(system, model, cfg)
        rows = bound_table(params, cfg.bounds.kind, cfg.bounds.times, cfg.bounds.extras)
        return params, kap, rows

    if system.sample_equilibrium is not None:
        params, kap, rows = stage("bounds", bounds_stage)
        outputs["bounds"] = write_pairs(out / "bounds.csv", ["t", "bound"], rows)
        summary["bound_params"] = params.to_dict()
        summary["kappa_se"] = {"kappa1_sq": kap.se1_sq, "kappa2_sq": kap.se2_sq}

    if cfg.sweep is not None:
        case = next((c for c, n in CASES.items() if n == cfg.system.name), None)
        if case is None:
            raise PipelineError("scaling", ConfigurationError(f"{cfg.system.name} is not a case study"))
        res = stage("scaling", lambda: run_case_experiment(case, cfg))
        outputs["scaling"] = res.write_csv(out / "scaling.csv")
        summary["scaling_fit"] = res.fit_dict()

    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    outputs["summary"] = summary_path
    (out / "config.json").write_text(cfg.dumps() + "\n")
    outputs["config"] = out / "config.json"

    manifest = {
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "workers": cfg.workers,
        "versions": {
            "effdyn": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "wall_clock_seconds": time.perf_counter() - start,
        "outputs": {k: {"path": Path(p).name, "sha256": _sha256(p)} for k, p in sorted(outputs.items())},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj
