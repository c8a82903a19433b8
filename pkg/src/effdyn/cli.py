"""Command-line entry point ``effdyn``.

Every subcommand reads one JSON configuration (``--config``).  The seed is
taken from ``EFFDYN_SEED`` if set, else from ``--seed``, else from the file.
Exit codes: 0 success, 1 runtime failure (message names the stage) or a
failed frobenius check, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .bounds import BoundParams
from .config import CASES, ConfigError, ExperimentConfig, load_config, resolve_seed
from .coupled import cosimulate
from .errors import EffdynError
from .experiments import (
    PipelineError,
    bound_table,
    build_model,
    estimate_bound_params,
    integrator_for,
    record_schedule,
    run_case_experiment,
    run_pipeline,
    write_pairs,
)
from .geometry import frobenius_obstruction
from .sampler import INIT_STREAM, IntegratorConfig, replica_rng, simulate_full
from .systems import make_system


class StageError(EffdynError):
    def __init__(self, stage, cause):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")


@contextmanager
def stage(name):
    try:
        yield
    except (ConfigError, StageError, PipelineError):
        raise
    except (EffdynError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


@contextmanager
def _sink(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        with p.open("w", newline="") as fh:
            yield fh


def _system(cfg):
    with stage("system"):
        return make_system(cfg.system.name, **cfg.system.params)


def _start(system):
    if system.sample_equilibrium is not None:
        return system.sample_equilibrium
    return np.zeros(system.spec.n)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig, args):
    """Full-process trajectories; per-replica CSVs plus a mean-xi table."""
    system = _system(cfg)
    ic = cfg.integrator
    with stage("simulate"):
        traj = simulate_full(system.spec, IntegratorConfig(ic.dt, ic.n_steps, ic.n_replicas, cfg.seed,
                                                           ic.burn_in_steps, ic.thinning), _start(system))
    pattern = cfg.output.trajectory_pattern
    if pattern is not None:
        traj.write_csv(pattern)
    m = traj.xi.shape[-1]
    mean = traj.xi.mean(axis=1)
    with _sink(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"mean_xi{i + 1}" for i in range(m)])
        for t, row in zip(traj.times, mean):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    return 0


def cmd_coefficients(cfg: ExperimentConfig, args):
    """Effective model file and its CSV export."""
    system = _system(cfg)
    with stage("model"):
        model = build_model(system, cfg)
    out = Path(args.out or cfg.output.directory)
    model.save(out / "model.effdyn")
    model.write_csv(out / "model.csv")
    print(out / "model.effdyn")
    return 0


def cmd_cosim(cfg: ExperimentConfig, args):
    """Coupled co-simulation report as CSV."""
    system = _system(cfg)
    with stage("model"):
        model = build_model(system, cfg)
    with stage("cosim"):
        ic = integrator_for(system, cfg)
        rep = cosimulate(system.spec, model, ic, _start(system), coupled=not args.uncoupled,
                         record_steps=record_schedule(ic.n_steps, args.records), workers=cfg.workers)
    rep.write_csv(args.out or sys.stdout)
    if rep.unreliable:
        print(f"warning: {rep.excursion_fraction:.2%} of steps left the model grid", file=sys.stderr)
    return 0


def cmd_scaling(cfg: ExperimentConfig, args):
    """Sweep the configured parameter and fit the power law."""
    case = args.case or next((c for c, n in CASES.items() if n == cfg.system.name), None)
    if case is None:
        raise ConfigError("system.name", f"scaling needs a case system {sorted(CASES.values())}")
    if cfg.sweep is None:
        raise ConfigError("sweep", "scaling needs a sweep section")

    def report(row):
        print(f"{row['parameter']}={row['value']:g}: {row['status']}", file=sys.stderr)

    with stage("scaling"):
        res = run_case_experiment(case, cfg, progress=report)
    res.write_csv(args.out or sys.stdout)
    print(json.dumps(res.fit_dict()), file=sys.stderr)
    return 0


def cmd_frobenius(cfg: ExperimentConfig, args):
    """Residuals at uniformly sampled points; exit 1 if any exceeds the tolerance."""
    system = _system(cfg)
    n = system.spec.n
    fr = cfg.frobenius
    lo = np.full(n, -2.0) if fr.box_lo is None else np.asarray(fr.box_lo, float)
    hi = np.full(n, 2.0) if fr.box_hi is None else np.asarray(fr.box_hi, float)
    if lo.shape != (n,) or hi.shape != (n,):
        raise ConfigError("frobenius.box_lo", f"box must have {n} coordinates")
    if np.any(hi <= lo):
        raise ConfigError("frobenius.box_hi", "must exceed box_lo")
    rng = replica_rng(cfg.seed, 0, INIT_STREAM)
    x = lo + (hi - lo) * rng.random((fr.n_points, n))
    with stage("frobenius"):
        res = frobenius_obstruction(system.spec, x).residual
    with _sink(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(n)] + ["residual"])
        for p, r in zip(x, res):
            w.writerow([repr(float(v)) for v in p] + [repr(float(r))])
    worst = float(np.max(res))
    ok = worst <= cfg.frobenius_tol
    print(f"max residual {worst:.3e} ({'<=' if ok else '>'} {cfg.frobenius_tol:g})", file=sys.stderr)
    return 0 if ok else 1


def cmd_bounds(cfg: ExperimentConfig, args):
    """``t,bound`` table; constants from ``bounds.params`` or estimated."""
    b = cfg.bounds
    given = dict(b.params or {})
    if {"kappa1", "kappa2", "rho"} <= given.keys():
        try:
            params = BoundParams(**given)
        except TypeError as exc:
            raise ConfigError("bounds.params", str(exc)) from None
        except EffdynError as exc:
            raise ConfigError("bounds.params", str(exc)) from None
    else:
        system = _system(cfg)
        with stage("model"):
            model = build_model(system, cfg)
        with stage("constants"):
            params, _ = estimate_bound_params(system, model, cfg)
    with stage("bounds"):
        rows = bound_table(params, b.kind, b.times, b.extras)
    write_pairs(args.out or sys.stdout, ["t", "bound"], rows)
    return 0


def cmd_pipeline(cfg: ExperimentConfig, args):
    """Model, constants, co-simulation and bounds in one run directory."""
    out = run_pipeline(cfg, directory=args.out,
                       progress=lambda s: print(f"stage {s}", file=sys.stderr))
    print(out / "manifest.json")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "coefficients": cmd_coefficients,
    "cosim": cmd_cosim,
    "scaling": cmd_scaling,
    "frobenius": cmd_frobenius,
    "bounds": cmd_bounds,
    "pipeline": cmd_pipeline,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="effdyn", description="Effective dynamics experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.strip().splitlines()[0])
        p.add_argument("--config", "-c", required=True, help="JSON configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", "-o", default=None, help="output file or directory (default: stdout / config)")
        if name == "cosim":
            p.add_argument("--uncoupled", action="store_true", help="drive z by independent noise")
            p.add_argument("--records", type=int, default=10, help="number of recorded times")
        if name == "scaling":
            p.add_argument("--case", choices=sorted(CASES), default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed", "must be nonnegative")
        cfg = resolve_seed(load_config(args.config), args.seed)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (StageError, PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EffdynError as exc:
        print(f"error: stage '{args.command}' failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
