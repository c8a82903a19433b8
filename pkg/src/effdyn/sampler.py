"""Euler-Maruyama integrators for the full dynamics and for the fiber
(level-set constrained) dynamics.

Replicas are advanced together as one batch, but every replica draws its
Brownian increments from its own counter-based stream keyed by
``(seed, replica, stream)``.  A replica therefore produces the same path no
matter how many other replicas run alongside it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, DivergenceError, ProjectionError
from .geometry import projection_pi
from .model import SystemSpec, fd_jacobian

NOISE_STREAM = 0
INIT_STREAM = 1
AUX_STREAM = 2


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    n_steps: int
    n_replicas: int = 1
    seed: int = 0
    burn_in_steps: int = 0
    thinning: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.n_steps < 0 or self.burn_in_steps < 0:
            raise ConfigurationError("step counts must be nonnegative")
        if self.n_replicas < 1:
            raise ConfigurationError("need at least one replica")
        if self.thinning < 1:
            raise ConfigurationError("thinning must be >= 1")
        if self.n_steps % self.thinning:
            raise ConfigurationError(f"thinning {self.thinning} does not divide n_steps {self.n_steps}")

    @property
    def horizon(self):
        return self.n_steps * self.dt

    @property
    def record_steps(self):
        return np.arange(0, self.n_steps + 1, self.thinning)


@dataclass(frozen=True)
class FiberConfig:
    z: np.ndarray
    base: IntegratorConfig
    newton_tol: float = 1e-10
    newton_max_iter: int = 10

    def __post_init__(self):
        if not self.newton_tol > 0:
            raise ConfigurationError("newton_tol must be positive")
        if self.newton_max_iter < 1:
            raise ConfigurationError("newton_max_iter must be >= 1")
        object.__setattr__(self, "z", np.atleast_1d(np.asarray(self.z, dtype=float)))


def replica_rng(seed, replica, stream=NOISE_STREAM):
    """Philox generator for one replica; independent of every other replica."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replica), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


class ReplicaNoise:
    """Brownian increments ``sqrt(dt) * N(0, I)`` for a batch of replicas.

    Each call to :meth:`next` returns an array of shape (len(replicas), dim).
    Increments are drawn per replica in blocks of ``block`` steps; the
    sequence seen by a replica does not depend on the block size.
    """

    def __init__(self, seed, replicas, dim, dt, stream=NOISE_STREAM, block=512):
        self.replicas = np.asarray(replicas, dtype=int)
        self.dim = int(dim)
        self.scale = np.sqrt(dt)
        self.block = int(block)
        self._rngs = [replica_rng(seed, r, stream) for r in self.replicas]
        self._buf = None
        self._pos = 0

    def _refill(self):
        draws = [g.standard_normal((self.block, self.dim)) for g in self._rngs]
        self._buf = np.stack(draws, axis=1) * self.scale
        self._pos = 0

    def next(self):
        if self._buf is None or self._pos == self.block:
            self._refill()
        out = self._buf[self._pos]
        self._pos += 1
        return out


X0Source = Union[np.ndarray, Sequence[float], Callable]


def initial_states(spec: SystemSpec, x0: X0Source, seed, replicas):
    """Resolve an initial-condition source into an array (len(replicas), n).

    ``x0`` is either a single point, one point per replica, or a callable
    ``sampler(rng, size) -> (size, n)`` drawing from the equilibrium measure.
    Sampled starts use the replica's own stream, so they are reproducible per
    replica.
    """
    replicas = np.asarray(replicas, dtype=int)
    if callable(x0):
        pts = [np.asarray(x0(replica_rng(seed, r, INIT_STREAM), 1), float).reshape(spec.n) for r in replicas]
        return np.array(pts)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape == (spec.n,):
        return np.tile(x0, (len(replicas), 1))
    if x0.ndim == 2 and x0.shape[1] == spec.n and x0.shape[0] >= replicas.max(initial=0) + 1:
        return x0[replicas].copy()
    raise ConfigurationError(f"initial condition of shape {x0.shape} does not match n={spec.n}")


def em_step(spec: SystemSpec, x, dW, dt, step=None):
    """One Euler-Maruyama step ``x + drift(x) dt + sqrt(2/beta) sigma(x) dW``."""
    x = np.asarray(x, dtype=float)
    sig = spec.sigma_matrix(x)
    new = x + spec.drift(x) * dt + np.sqrt(2.0 / spec.beta) * np.einsum("...ij,...j->...i", sig, dW)
    if not np.all(np.isfinite(new)):
        bad = np.flatnonzero(~np.all(np.isfinite(np.atleast_2d(new)), axis=-1))
        raise DivergenceError("non-finite state after Euler-Maruyama step", step=step,
                              replica=int(bad[0]) if bad.size else None)
    return new


@dataclass
class Trajectory:
    """Recorded states: ``x`` has shape (T, R, n) and ``xi`` (T, R, m)."""

    times: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    replicas: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def write_csv(self, pattern):
        """Write one CSV per replica; ``pattern`` contains ``{replica}``."""
        n, m = self.x.shape[-1], self.xi.shape[-1]
        header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"xi{i + 1}" for i in range(m)]
        paths = []
        for k, r in enumerate(self.replicas):
            path = Path(str(pattern).format(replica=int(r)))
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                for t, xx, zz in zip(self.times, self.x[:, k], self.xi[:, k]):
                    w.writerow([repr(float(t))] + [repr(float(v)) for v in xx] + [repr(float(v)) for v in zz])
            paths.append(path)
        return paths


def _with_replica(exc, replicas):
    if isinstance(exc, DivergenceError) and exc.replica is not None and exc.replica < len(replicas):
        exc.replica = int(replicas[exc.replica])
    return exc


def iter_full(spec: SystemSpec, config: IntegratorConfig, x0: X0Source, replicas=None) -> Iterator:
    """Yield ``(t, x)`` at every recorded step of the full dynamics.

    Burn-in steps are integrated but not emitted; after burn-in the state is
    emitted every ``config.thinning`` steps, including time 0.
    """
    replicas = np.arange(config.n_replicas) if replicas is None else np.asarray(replicas, int)
    x = initial_states(spec, x0, config.seed, replicas)
    noise = ReplicaNoise(config.seed, replicas, spec.noise_dim, config.dt)
    step = 0
    try:
        for _ in range(config.burn_in_steps):
            x = em_step(spec, x, noise.next(), config.dt, step)
            step += 1
        yield 0.0, x
        for k in range(1, config.n_steps + 1):
            x = em_step(spec, x, noise.next(), config.dt, step)
            step += 1
            if k % config.thinning == 0:
                yield k * config.dt, x
    except DivergenceError as exc:
        raise _with_replica(exc, replicas)


def simulate_full(spec: SystemSpec, config: IntegratorConfig, x0: X0Source, replicas=None) -> Trajectory:
    """Integrate the full dynamics and collect the recorded states."""
    replicas = np.arange(config.n_replicas) if replicas is None else np.asarray(replicas, int)
    times, xs = [], []
    for t, x in iter_full(spec, config, x0, replicas):
        times.append(t)
        xs.append(x)
    X = np.stack(xs)
    return Trajectory(times=np.array(times), x=X, xi=spec.xi_value(X), replicas=replicas)


# ---------------------------------------------------------------------------
# fiber dynamics
# ---------------------------------------------------------------------------

def project_to_fiber(spec: SystemSpec, x, z, tol=1e-10, max_iter=10, full_output=False):
    """Move ``x`` along the columns of ``a grad xi^T`` onto ``{xi = z}``.

    Solves ``xi(x + a(x) grad xi(x)^T lam) = z`` for ``lam`` by Newton's
    method.  Works on batches; ``z`` broadcasts against the batch.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    D = spec.a(x) @ np.swapaxes(spec.jac(x), -1, -2)  # (..., n, m)
    lam = np.zeros(x.shape[:-1] + (spec.m,))
    y = x
    for it in range(max_iter + 1):
        r = spec.xi_value(y) - z
        res = np.linalg.norm(r, axis=-1)
        if np.all(res <= tol):
            return (y, it) if full_output else y
        if it == max_iter:
            break
        JD = spec.jac(y) @ D
        lam = lam - np.linalg.solve(JD, r[..., None])[..., 0]
        y = x + np.einsum("...ij,...j->...i", D, lam)
        if not np.all(np.isfinite(y)):
            break
    raise ProjectionError(
        f"Newton projection did not reach tol={tol:g} in {max_iter} iterations", residual=float(np.nanmax(res))
    )


def fiber_drift(spec: SystemSpec, x):
    """Drift ``-(Pi^T a) grad V + div(Pi^T a) / beta`` of the fiber dynamics."""

    def pta(p):
        return np.swapaxes(projection_pi(spec, p), -1, -2) @ spec.a(p)

    M = pta(x)
    div = np.trace(fd_jacobian(pta, x), axis1=-2, axis2=-1)  # sum_j d M_ij / d x_j
    return -np.einsum("...ij,...j->...i", M, spec.grad_V(x)) + div / spec.beta


def fiber_step(spec: SystemSpec, x, z, dW, dt, tol=1e-10, max_iter=10, step=None):
    """Euler-Maruyama step of the fiber dynamics followed by projection."""
    PiT = np.swapaxes(projection_pi(spec, x), -1, -2)
    noise = np.einsum("...ij,...jk,...k->...i", PiT, spec.sigma_matrix(x), dW)
    y = x + fiber_drift(spec, x) * dt + np.sqrt(2.0 / spec.beta) * noise
    if not np.all(np.isfinite(y)):
        raise DivergenceError("non-finite state in fiber dynamics", step=step)
    return project_to_fiber(spec, y, z, tol, max_iter)


def iter_fiber(spec: SystemSpec, fc: FiberConfig, x0: X0Source, replicas=None, z_per_walker=None):
    """Yield ``(t, x)`` samples of the fiber dynamics on ``{xi = fc.z}``.

    ``z_per_walker`` (shape (R, m)) overrides ``fc.z`` so that walkers on
    different level sets can be advanced as one batch.  Starting points are
    projected onto their level set before integration.
    """
    cfg = fc.base
    replicas = np.arange(cfg.n_replicas) if replicas is None else np.asarray(replicas, int)
    z = fc.z if z_per_walker is None else np.asarray(z_per_walker, float)
    x = initial_states(spec, x0, cfg.seed, replicas)
    x = project_to_fiber(spec, x, z, fc.newton_tol, fc.newton_max_iter)
    noise = ReplicaNoise(cfg.seed, replicas, spec.noise_dim, cfg.dt)
    step = 0
    try:
        for _ in range(cfg.burn_in_steps):
            x = fiber_step(spec, x, z, noise.next(), cfg.dt, fc.newton_tol, fc.newton_max_iter, step)
            step += 1
        yield 0.0, x
        for k in range(1, cfg.n_steps + 1):
            x = fiber_step(spec, x, z, noise.next(), cfg.dt, fc.newton_tol, fc.newton_max_iter, step)
            step += 1
            if k % cfg.thinning == 0:
                yield k * cfg.dt, x
    except DivergenceError as exc:
        raise _with_replica(exc, replicas)


def simulate_fiber(spec: SystemSpec, fc: FiberConfig, x0: X0Source, replicas=None) -> Trajectory:
    """Collect fiber-dynamics samples; every sample satisfies ``|xi - z| <= newton_tol``."""
    replicas = np.arange(fc.base.n_replicas) if replicas is None else np.asarray(replicas, int)
    times, xs = [], []
    for t, x in iter_fiber(spec, fc, x0, replicas):
        times.append(t)
        xs.append(x)
    X = np.stack(xs)
    return Trajectory(times=np.array(times), x=X, xi=spec.xi_value(X), replicas=replicas)
