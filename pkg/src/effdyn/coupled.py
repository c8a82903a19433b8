"""Co-simulation of the full process and the effective process driven by the
same Brownian increments.

The effective process is driven by ``w~`` with
``dw~ = (grad xi a grad xi^T)^{-1/2} grad xi sigma dW`` evaluated along the
full path, which is an m-dimensional Brownian motion.  Sharing the noise this
way makes the pathwise distance ``sup_s |xi(x(s)) - z(s)|`` small whenever
the effective coefficients are accurate.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .effective import EffectiveModel
from .errors import ConfigurationError, DegenerateCoordinateError, DivergenceError, EffdynError
from .geometry import _phi, spd_inv_sqrt
from .model import SystemSpec
from .sampler import AUX_STREAM, IntegratorConfig, ReplicaNoise, em_step, initial_states

UNRELIABLE_FRACTION = 0.01


def coupled_noise_increment(spec: SystemSpec, x, dW):
    """``dw~ = Phi(x)^{-1/2} grad xi(x) sigma(x) dW``, shape (..., m)."""
    J = spec.jac(x)
    Phi = _phi(J, spec.a(x))
    B = spd_inv_sqrt(Phi) @ J @ spec.sigma_matrix(x)
    return np.einsum("...ij,...j->...i", B, dW)


@dataclass
class PathwiseErrorReport:
    """Monte Carlo statistics of ``|xi(x(s)) - z(s)|`` over replicas.

    ``sup_sq`` holds, per recorded time and replica, the squared running
    maximum over *every* integration step so far; ``sup_sq_recorded`` the
    same maximum taken only over recorded steps (a coarser lower bound).
    """

    times: np.ndarray
    sup_sq: np.ndarray  # (T, R)
    sup_sq_recorded: np.ndarray  # (T, R)
    err_sq: np.ndarray  # (T, R) squared error at the recorded time
    excursions: np.ndarray  # (T, R) cumulative clamped steps
    dt: float
    n_steps: int
    seed: int
    replicas: np.ndarray
    coupled: bool = True

    @property
    def horizon(self):
        return float(self.times[-1])

    @property
    def n_replicas(self):
        return int(self.sup_sq.shape[1])

    def _mean_se(self, v):
        R = v.shape[1]
        se = v.std(axis=1, ddof=1) / np.sqrt(R) if R > 1 else np.full(v.shape[0], np.nan)
        return v.mean(axis=1), se

    @property
    def mean_sq_sup(self):
        return self._mean_se(self.sup_sq)[0]

    @property
    def se_sup(self):
        return self._mean_se(self.sup_sq)[1]

    @property
    def marginal_mse(self):
        return self._mean_se(self.err_sq)[0]

    @property
    def se_marginal(self):
        return self._mean_se(self.err_sq)[1]

    @property
    def total_excursions(self):
        return self.excursions[-1].sum(axis=0)

    @property
    def excursion_fraction(self):
        steps = max(self.n_steps, 1) * self.n_replicas
        return float(self.excursions[-1].sum() / steps)

    @property
    def unreliable(self):
        return self.excursion_fraction > UNRELIABLE_FRACTION

    def at(self, t):
        """``(mean_sq_sup, se_sup)`` at the recorded time closest to ``t``."""
        k = int(np.argmin(np.abs(self.times - t)))
        if not np.isclose(self.times[k], t, rtol=1e-9, atol=1e-12):
            raise ConfigurationError(f"time {t} was not recorded")
        return float(self.mean_sq_sup[k]), float(self.se_sup[k])

    def write_csv(self, path):
        """Write ``t,mean_sq_sup,se_sup,marginal_mse,se_marginal,excursions``
        to a path or an open text stream."""
        if hasattr(path, "write"):
            self._write(path)
            return path
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            self._write(fh)
        return path

    def _write(self, fh):
        exc = self.excursions.sum(axis=1)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "mean_sq_sup", "se_sup", "marginal_mse", "se_marginal", "excursions"])
        for row in zip(self.times, self.mean_sq_sup, self.se_sup, self.marginal_mse, self.se_marginal, exc):
            w.writerow([repr(float(v)) for v in row[:5]] + [int(row[5])])

    def summary(self):
        return {
            "t": self.horizon,
            "mean_sq_sup": float(self.mean_sq_sup[-1]),
            "se_sup": float(self.se_sup[-1]),
            "marginal_mse": float(self.marginal_mse[-1]),
            "se_marginal": float(self.se_marginal[-1]),
            "excursions": int(self.excursions[-1].sum()),
            "excursion_fraction": self.excursion_fraction,
            "unreliable": bool(self.unreliable),
            "dt": self.dt,
            "n_replicas": self.n_replicas,
            "seed": self.seed,
            "coupled": self.coupled,
        }


def _tag(exc, step, replicas):
    if isinstance(exc, DivergenceError):
        if exc.step is None:
            exc.step = step
        if exc.replica is not None and exc.replica < len(replicas):
            exc.replica = int(replicas[exc.replica])
        return exc
    return type(exc)(f"{exc} (step {step}, replicas {int(replicas[0])}..{int(replicas[-1])})")


def _run_chunk(spec, model, config, x0, replicas, record, coupled):
    dt = config.dt
    beta_fac = np.sqrt(2.0 / spec.beta)
    x = initial_states(spec, x0, config.seed, replicas)
    noise = ReplicaNoise(config.seed, replicas, spec.noise_dim, dt)
    aux = None if coupled else ReplicaNoise(config.seed, replicas, spec.m, dt, stream=AUX_STREAM)
    step = 0
    try:
        for _ in range(config.burn_in_steps):
            x = em_step(spec, x, noise.next(), dt, step)
            step += 1
        z = spec.xi_value(x)
        R = len(replicas)
        T = len(record)
        sup_sq = np.zeros((T, R))
        sup_rec = np.zeros((T, R))
        err_sq = np.zeros((T, R))
        exc_out = np.zeros((T, R), dtype=np.int64)
        running = np.zeros(R)
        running_rec = np.zeros(R)
        excursions = np.zeros(R, dtype=np.int64)
        k_rec = 0
        if record[0] == 0:
            k_rec = 1
        for k in range(1, record[-1] + 1):
            dW = noise.next()
            dw = coupled_noise_increment(spec, x, dW) if coupled else aux.next()
            b, sig, outside = model.coefficients(z)
            x = em_step(spec, x, dW, dt, step)
            z = z + b * dt + beta_fac * np.einsum("...ij,...j->...i", sig, dw)
            step += 1
            if not np.all(np.isfinite(z)):
                bad = int(np.flatnonzero(~np.all(np.isfinite(z), axis=-1))[0])
                raise DivergenceError("non-finite effective state", step=step, replica=bad)
            excursions += outside
            e2 = np.sum((spec.xi_value(x) - z) ** 2, axis=-1)
            np.maximum(running, e2, out=running)
            if k == record[k_rec]:
                np.maximum(running_rec, e2, out=running_rec)
                sup_sq[k_rec] = running
                sup_rec[k_rec] = running_rec
                err_sq[k_rec] = e2
                exc_out[k_rec] = excursions
                k_rec += 1
                if k_rec == T:
                    break
    except DivergenceError as exc:
        raise _tag(exc, step, replicas)
    except DegenerateCoordinateError as exc:
        raise _tag(exc, step, replicas) from None
    return sup_sq, sup_rec, err_sq, exc_out


def cosimulate(
    spec: SystemSpec,
    model: EffectiveModel,
    config: IntegratorConfig,
    x0,
    coupled: bool = True,
    record_steps: Optional[Sequence[int]] = None,
    workers: int = 1,
    chunk: Optional[int] = None,
) -> PathwiseErrorReport:
    """Advance ``x`` by Euler-Maruyama and ``z`` by
    ``z + b~(z) dt + sqrt(2/beta) sigma~(z) dw~`` with the same increments.

    Parameters
    ----------
    x0 : array or callable
        Initial states (see :func:`effdyn.sampler.initial_states`);
        ``z(0) = xi(x(0))``.
    coupled : bool
        If false, ``z`` is driven by an independent Brownian motion instead
        (the baseline the coupling is compared against).
    record_steps : sequence of int, optional
        Step indices at which statistics are recorded; defaults to every
        ``config.thinning``-th step including 0.
    workers : int
        Replica chunks run on this many threads.  Every replica has its own
        noise stream, so results do not depend on the chunking.
    """
    if record_steps is None:
        record = config.record_steps
    else:
        record = np.unique(np.asarray(record_steps, dtype=int))
        if record.size == 0 or record[0] < 0 or record[-1] > config.n_steps:
            raise ConfigurationError("record steps must lie in [0, n_steps]")
    if record[-1] == 0:
        record = np.array([0])
    replicas = np.arange(config.n_replicas)
    chunk = chunk or max(1, int(np.ceil(config.n_replicas / max(workers, 1))))
    parts = [replicas[i:i + chunk] for i in range(0, len(replicas), chunk)]

    def run(reps):
        return _run_chunk(spec, model, config, x0, reps, record, coupled)

    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, parts))
    else:
        results = [run(p) for p in parts]
    sup_sq, sup_rec, err_sq, exc = (np.concatenate([r[i] for r in results], axis=1) for i in range(4))
    return PathwiseErrorReport(
        times=record * config.dt,
        sup_sq=sup_sq,
        sup_sq_recorded=sup_rec,
        err_sq=err_sq,
        excursions=exc,
        dt=config.dt,
        n_steps=int(record[-1]),
        seed=config.seed,
        replicas=replicas,
        coupled=coupled,
    )


@dataclass(frozen=True)
class MarginalSeries:
    t: np.ndarray
    mse: np.ndarray
    se: np.ndarray
    report: PathwiseErrorReport


def marginal_mse_experiment(spec, model, config: IntegratorConfig, x0, t_grid, workers=1) -> MarginalSeries:
    """``E |xi(x(t)) - z(t)|^2`` with standard errors at the times ``t_grid``
    (rounded to the nearest integration step)."""
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(t_grid < 0):
        raise ConfigurationError("times must be nonnegative")
    steps = np.rint(t_grid / config.dt).astype(int)
    n = int(steps.max()) if steps.size else 0
    cfg = IntegratorConfig(config.dt, max(n, 0), config.n_replicas, config.seed, config.burn_in_steps, 1)
    rep = cosimulate(spec, model, cfg, x0, record_steps=np.unique(np.concatenate([[0], steps])), workers=workers)
    idx = np.searchsorted(rep.times / config.dt, steps - 0.5)
    return MarginalSeries(t=steps * config.dt, mse=rep.marginal_mse[idx], se=rep.se_marginal[idx], report=rep)
