"""Effective coefficients ``b~``, ``sigma~`` and the marginal density ``Q`` on a
grid over the reaction-coordinate space, and the constants that control how
well the effective dynamics tracks ``xi(x(s))``.

Three interchangeable estimators fill an :class:`EffectiveModel`:

* ``binned``: hard binning of equilibrium samples by nearest grid node,
* ``fiber``: long runs of the level-set dynamics at every node,
* :func:`quadrature_oracle`: deterministic quadrature over a chart of each
  level set, used as ground truth.
"""

from __future__ import annotations

import functools
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.linalg import eigh, eigh_tridiagonal

from .errors import (
    EstimationError,
    EvaluationError,
    InputError,
    NearSingularError,
    OracleError,
    UnsupportedGeometryError,
)
from .geometry import _phi, _pi, level_set_frame, spd_sqrt
from .model import SystemSpec, fd_jacobian, generator_xi
from .sampler import FiberConfig, IntegratorConfig, iter_fiber, simulate_full

FORMAT_HEADER = "effdyn-model v1"
MISSING_LIMIT = 0.05


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ZGrid:
    """Rectangular grid in R^m given by strictly increasing per-axis nodes."""

    axes: tuple

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        for a in axes:
            if a.ndim != 1 or a.size < 2 or np.any(np.diff(a) <= 0):
                raise InputError("each grid axis needs at least two strictly increasing nodes")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def uniform(cls, lo, hi, num):
        lo, hi, num = np.atleast_1d(lo), np.atleast_1d(hi), np.atleast_1d(num)
        lo, hi, num = np.broadcast_arrays(lo, hi, num)
        return cls(tuple(np.linspace(l, h, int(k)) for l, h, k in zip(lo, hi, num)))

    @property
    def m(self):
        return len(self.axes)

    @property
    def shape(self):
        return tuple(a.size for a in self.axes)

    @property
    def size(self):
        return int(np.prod(self.shape))

    def nodes(self):
        """All nodes, shape (*shape, m)."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def edges(self):
        """Cell edges per axis: midpoints between nodes, half a step beyond the ends."""
        out = []
        for a in self.axes:
            mid = 0.5 * (a[1:] + a[:-1])
            out.append(np.concatenate([[a[0] - (mid[0] - a[0])], mid, [a[-1] + (a[-1] - mid[-1])]]))
        return out

    def cell_volumes(self):
        widths = [np.diff(e) for e in self.edges()]
        return np.prod(np.stack(np.meshgrid(*widths, indexing="ij"), axis=0), axis=0)

    def interior_mask(self):
        mask = np.ones(self.shape, dtype=bool)
        for k in range(self.m):
            sl = [slice(None)] * self.m
            sl[k] = 0
            mask[tuple(sl)] = False
            sl[k] = -1
            mask[tuple(sl)] = False
        return mask if mask.any() else np.ones(self.shape, bool)

    def locate(self, z):
        """Flat index of the cell containing each ``z`` (-1 outside the grid)."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        idx = np.zeros(z.shape[0], dtype=int)
        inside = np.ones(z.shape[0], dtype=bool)
        for k, e in enumerate(self.edges()):
            i = np.searchsorted(e, z[:, k], side="right") - 1
            inside &= (i >= 0) & (i < self.shape[k])
            idx = idx * self.shape[k] + np.clip(i, 0, self.shape[k] - 1)
        return np.where(inside, idx, -1)

    def to_dict(self):
        return {"axes": [a.tolist() for a in self.axes]}


def multilinear(grid: ZGrid, values, z):
    """Piecewise multilinear interpolation of node ``values`` (shape
    ``grid.shape + tail``) at points ``z`` (shape (..., m)).

    Queries outside the grid are clamped to the boundary.  Returns the
    interpolated values and a boolean mask of clamped queries.
    """
    z = np.asarray(z, dtype=float)
    batch = z.shape[:-1]
    zf = z.reshape(-1, grid.m)
    outside = np.zeros(zf.shape[0], dtype=bool)
    lo_idx, weights = [], []
    for k, a in enumerate(grid.axes):
        q = zf[:, k]
        outside |= (q < a[0]) | (q > a[-1])
        q = np.clip(q, a[0], a[-1])
        i = np.clip(np.searchsorted(a, q, side="right") - 1, 0, a.size - 2)
        w = (q - a[i]) / (a[i + 1] - a[i])
        lo_idx.append(i)
        weights.append(w)
    values = np.asarray(values, dtype=float)
    tail = values.shape[grid.m:]
    out = np.zeros((zf.shape[0],) + tail)
    for corner in itertools.product((0, 1), repeat=grid.m):
        w = np.ones(zf.shape[0])
        index = []
        for k, c in enumerate(corner):
            w = w * (weights[k] if c else 1.0 - weights[k])
            index.append(lo_idx[k] + c)
        out += w.reshape((-1,) + (1,) * len(tail)) * values[tuple(index)]
    return out.reshape(batch + tail), outside.reshape(batch)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EffectiveModel:
    """Gridded effective coefficients.

    Attributes
    ----------
    grid : ZGrid
    b_tilde : ndarray, shape (*grid.shape, m)
    phi_mean : ndarray, shape (*grid.shape, m, m)
        Conditional mean of ``Phi``; ``sigma~`` is its SPD square root.
    Q : ndarray or None, shape grid.shape
        Marginal density of ``xi`` at the nodes.
    counts : ndarray, shape grid.shape
        Samples per node (0 for quadrature).
    missing : ndarray of bool, shape grid.shape
    b_se : ndarray, shape (*grid.shape, m)
        Monte Carlo standard errors of ``b~`` (0 for quadrature).
    a_mean : ndarray or None, shape (*grid.shape, m, m)
        Conditional mean of ``A``; differs from ``sigma~`` unless ``A`` is
        constant on level sets.
    """

    grid: ZGrid
    b_tilde: np.ndarray
    phi_mean: np.ndarray
    Q: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = None
    missing: Optional[np.ndarray] = None
    b_se: Optional[np.ndarray] = None
    a_mean: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        shape = self.grid.shape
        m = self.grid.m
        if self.b_tilde.shape != shape + (m,) or self.phi_mean.shape != shape + (m, m):
            raise InputError("coefficient arrays do not match the grid")
        missing = np.zeros(shape, bool) if self.missing is None else np.asarray(self.missing, bool)
        object.__setattr__(self, "missing", missing)
        if self.counts is None:
            object.__setattr__(self, "counts", np.zeros(shape, dtype=int))
        if self.b_se is None:
            object.__setattr__(self, "b_se", np.zeros(shape + (m,)))
        # interpolation tables with missing nodes filled from the nearest valid node
        object.__setattr__(self, "_tables", _fill_missing(self, missing))
        sig = spd_sqrt(self._tables["phi"], clamp=True)
        object.__setattr__(self, "sigma_nodes", np.where(missing[..., None, None], np.nan, sig))

    @property
    def m(self):
        return self.grid.m

    def b(self, z):
        """Interpolated effective drift, shape (..., m)."""
        return multilinear(self.grid, self._tables["b"], z)[0]

    def phi(self, z):
        P = multilinear(self.grid, self._tables["phi"], z)[0]
        return 0.5 * (P + np.swapaxes(P, -1, -2))

    def sigma(self, z):
        """``sigma~(z)``: SPD root of the interpolated conditional mean of ``Phi``."""
        return spd_sqrt(self.phi(z), clamp=True)

    def coefficients(self, z):
        """``(b~(z), sigma~(z), outside)`` with ``outside`` flagging clamped queries."""
        b, outside = multilinear(self.grid, self._tables["b"], z)
        return b, self.sigma(z), outside

    def conditional_mean_A(self, z):
        if self.a_mean is None:
            raise EstimationError("model carries no conditional mean of A")
        return multilinear(self.grid, self._tables["a"], z)[0]

    def Q_at(self, z):
        if self.Q is None:
            raise EstimationError("model carries no marginal density")
        return multilinear(self.grid, self._tables["Q"], z)[0]

    def Q_mass(self):
        """``sum Q * cell volume``; close to 1 for a grid covering the support."""
        return float(np.sum(np.where(self.missing, 0.0, self.Q) * self.grid.cell_volumes()))

    # -- io -------------------------------------------------------------------
    def to_dict(self):
        m = self.m
        iu = np.triu_indices(m)
        sig = self.sigma_nodes
        return {
            "grid": self.grid.to_dict(),
            "m": m,
            "b_tilde": self.b_tilde.tolist(),
            "b_se": self.b_se.tolist(),
            "phi_mean_upper": self.phi_mean[..., iu[0], iu[1]].tolist(),
            "sigma_tilde_upper": np.where(np.isnan(sig), None, sig)[..., iu[0], iu[1]].tolist(),
            "a_mean_upper": None if self.a_mean is None else self.a_mean[..., iu[0], iu[1]].tolist(),
            "Q": None if self.Q is None else self.Q.tolist(),
            "counts": self.counts.tolist(),
            "missing": self.missing.tolist(),
            "meta": self.meta,
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(FORMAT_HEADER + "\n" + json.dumps(_finite(self.to_dict()), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path):
        text = Path(path).read_text()
        head, _, body = text.partition("\n")
        if head.strip() != FORMAT_HEADER:
            raise InputError(f"{path}: not an effective-model file (header {head!r})")
        d = json.loads(body)
        grid = ZGrid(tuple(d["grid"]["axes"]))
        m = d["m"]

        def full(upper):
            up = np.asarray(upper, dtype=float)
            M = np.zeros(up.shape[:-1] + (m, m))
            iu = np.triu_indices(m)
            M[..., iu[0], iu[1]] = up
            M[..., iu[1], iu[0]] = up
            return M

        return cls(
            grid=grid,
            b_tilde=np.asarray(d["b_tilde"], dtype=float),
            phi_mean=full(d["phi_mean_upper"]),
            Q=None if d["Q"] is None else np.asarray(d["Q"], dtype=float),
            counts=np.asarray(d["counts"], dtype=int),
            missing=np.asarray(d["missing"], dtype=bool),
            b_se=np.asarray(d["b_se"], dtype=float),
            a_mean=None if d["a_mean_upper"] is None else full(d["a_mean_upper"]),
            meta=d.get("meta", {}),
        )

    def write_csv(self, path):
        """One row per node: ``z1..zm, b1..bm, sigma upper triangle, Q, count``."""
        import csv

        m = self.m
        iu = np.triu_indices(m)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = [f"z{i + 1}" for i in range(m)] + [f"b{i + 1}" for i in range(m)]
        header += [f"sigma{i + 1}{j + 1}" for i, j in zip(*iu)] + ["Q", "count"]
        nodes = self.grid.nodes().reshape(-1, m)
        b = self.b_tilde.reshape(-1, m)
        s = self.sigma_nodes[..., iu[0], iu[1]].reshape(len(nodes), -1)
        Q = np.full(len(nodes), np.nan) if self.Q is None else self.Q.reshape(-1)
        cnt = self.counts.reshape(-1)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(nodes)):
                w.writerow([repr(float(v)) for v in (*nodes[k], *b[k], *s[k], Q[k])] + [int(cnt[k])])
        return path


def _finite(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    return obj


def _fill_missing(model, missing):
    grid = model.grid
    tables = {"b": model.b_tilde, "phi": model.phi_mean}
    if model.a_mean is not None:
        tables["a"] = model.a_mean
    if model.Q is not None:
        tables["Q"] = model.Q
    if not missing.any():
        return {k: np.asarray(v, float) for k, v in tables.items()}
    if missing.all():
        raise EstimationError("every grid node is missing")
    idx = np.stack(np.meshgrid(*[np.arange(s) for s in grid.shape], indexing="ij"), -1).reshape(-1, grid.m)
    valid = idx[~missing.reshape(-1)]
    out = {}
    for k, v in tables.items():
        v = np.array(v, dtype=float)
        flat = v.reshape((grid.size,) + v.shape[grid.m:])
        for j in np.flatnonzero(missing.reshape(-1)):
            near = valid[np.argmin(np.sum((valid - idx[j]) ** 2, axis=1))]
            flat[j] = v[tuple(near)]
        out[k] = flat.reshape(v.shape)
    return out


# ---------------------------------------------------------------------------
# per-sample integrands
# ---------------------------------------------------------------------------

def sample_quantities(spec: SystemSpec, x):
    """``(xi, L xi, Phi, A)`` at every point of ``x`` (shape (N, n))."""
    J = spec.jac(x)
    a = spec.a(x)
    Phi = _phi(J, a)
    return spec.xi_value(x), generator_xi(spec, x), Phi, spd_sqrt(Phi)


class BinAccumulator:
    """Per-node sums for binned conditional expectations.

    Accumulators over disjoint sample sets combine with :meth:`merge`; the
    result does not depend on the order of merging (up to floating-point
    reassociation).
    """

    def __init__(self, grid: ZGrid):
        self.grid = grid
        m, size = grid.m, grid.size
        self.count = np.zeros(size, dtype=np.int64)
        self.sum_b = np.zeros((size, m))
        self.sum_b2 = np.zeros((size, m))
        self.sum_phi = np.zeros((size, m * m))
        self.sum_A = np.zeros((size, m * m))
        self.outside = 0
        self.total = 0

    def add(self, z, lxi, Phi, A):
        z = np.atleast_2d(z)
        idx = self.grid.locate(z)
        ok = idx >= 0
        self.total += len(idx)
        self.outside += int(np.sum(~ok))
        idx, m2 = idx[ok], self.grid.m**2
        size = self.grid.size
        self.count += np.bincount(idx, minlength=size)
        for arr, vals in (
            (self.sum_b, lxi[ok]),
            (self.sum_b2, lxi[ok] ** 2),
            (self.sum_phi, Phi[ok].reshape(-1, m2)),
            (self.sum_A, A[ok].reshape(-1, m2)),
        ):
            for c in range(arr.shape[1]):
                arr[:, c] += np.bincount(idx, weights=vals[:, c], minlength=size)
        return self

    def add_states(self, spec: SystemSpec, x):
        x = np.asarray(x, dtype=float).reshape(-1, spec.n)
        return self.add(*sample_quantities(spec, x))

    def merge(self, other: "BinAccumulator"):
        out = BinAccumulator(self.grid)
        for name in ("count", "sum_b", "sum_b2", "sum_phi", "sum_A"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        out.outside = self.outside + other.outside
        out.total = self.total + other.total
        return out

    def finalize(self, with_Q=True, meta=None) -> EffectiveModel:
        grid, m = self.grid, self.grid.m
        cnt = self.count
        missing = cnt == 0
        interior = grid.interior_mask().reshape(-1)
        frac = missing[interior].mean() if interior.any() else missing.mean()
        if frac > MISSING_LIMIT:
            raise EstimationError(
                f"{missing[interior].sum()} of {interior.sum()} interior grid nodes received no samples"
            )
        safe = np.maximum(cnt, 1)[:, None]
        b = self.sum_b / safe
        var = np.maximum(self.sum_b2 / safe - b**2, 0.0)
        b_se = np.sqrt(var / np.maximum(cnt - 1, 1)[:, None])
        phi = (self.sum_phi / safe).reshape(-1, m, m)
        phi = np.where(missing[:, None, None], np.eye(m), phi)
        A = (self.sum_A / safe).reshape(-1, m, m)
        Q = None
        if with_Q:
            Q = cnt / (max(self.total, 1) * grid.cell_volumes().reshape(-1))
        shape = grid.shape
        return EffectiveModel(
            grid=grid,
            b_tilde=b.reshape(shape + (m,)),
            phi_mean=phi.reshape(shape + (m, m)),
            Q=None if Q is None else Q.reshape(shape),
            counts=cnt.reshape(shape),
            missing=missing.reshape(shape),
            b_se=b_se.reshape(shape + (m,)),
            a_mean=A.reshape(shape + (m, m)),
            meta=dict(meta or {}, outside=self.outside, total=self.total),
        )


def check_sigma_identity(model: EffectiveModel, rtol=1e-10):
    """Largest ``|sigma~^2 - mean(Phi)|_F / |mean(Phi)|_F`` over valid nodes."""
    S = model.sigma_nodes
    P = model.phi_mean
    err = np.linalg.norm(S @ S - P, axis=(-2, -1)) / np.linalg.norm(P, axis=(-2, -1))
    worst = float(np.nanmax(np.where(model.missing, np.nan, err)))
    if worst > rtol:
        raise EstimationError(f"sigma~^2 differs from the conditional mean of Phi by {worst:.3g}")
    return worst


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def estimate_effective(
    spec: SystemSpec,
    grid: ZGrid,
    method="binned",
    *,
    samples=None,
    config: Optional[IntegratorConfig] = None,
    x0=None,
    newton_tol=1e-10,
    newton_max_iter=10,
    Q=None,
    q_samples=None,
    chunk=20000,
) -> EffectiveModel:
    """Estimate ``b~``, ``sigma~`` (and ``Q``) on ``grid``.

    Parameters
    ----------
    method : {"binned", "fiber"}
    samples : array_like, shape (..., n), optional
        Equilibrium states for ``binned``.  If omitted, the full dynamics is
        run with ``config`` from ``x0`` and every recorded state is used.
    config : IntegratorConfig
        For ``fiber``: ``n_replicas`` walkers per node, ``n_steps`` recorded
        steps, burn-in and thinning as usual.
    x0 : callable or array
        ``binned``: initial-state source for the full dynamics.  ``fiber``:
        callable ``z -> x`` returning a point near the level set ``z`` (it
        is projected before the run).
    Q, q_samples : optional
        Fiber mode does not produce a marginal density; supply ``Q`` on the
        nodes directly or equilibrium samples to bin.
    """
    if method == "binned":
        if samples is None:
            if config is None or x0 is None:
                raise EstimationError("binned estimation needs samples or (config, x0)")
            samples = simulate_full(spec, config, x0).x
        x = np.asarray(samples, dtype=float).reshape(-1, spec.n)
        acc = BinAccumulator(grid)
        for start in range(0, len(x), chunk):
            acc.add_states(spec, x[start:start + chunk])
        model = acc.finalize(meta={"method": "binned", "n_samples": len(x)})
        check_sigma_identity(model)
        return model
    if method == "fiber":
        return _estimate_fiber(spec, grid, config, x0, newton_tol, newton_max_iter, Q, q_samples)
    raise EstimationError(f"unknown estimation method {method!r}")


def _estimate_fiber(spec, grid, config, start, tol, max_iter, Q, q_samples):
    if config is None or start is None:
        raise EstimationError("fiber estimation needs an IntegratorConfig and a start(z) callable")
    m = grid.m
    nodes = grid.nodes().reshape(-1, m)
    W = config.n_replicas
    z_walk = np.repeat(nodes, W, axis=0)
    x_start = np.array([np.asarray(start(z), float) for z in nodes])
    x_start = np.repeat(x_start, W, axis=0)
    total = len(z_walk)
    base = IntegratorConfig(
        dt=config.dt, n_steps=config.n_steps, n_replicas=total, seed=config.seed,
        burn_in_steps=config.burn_in_steps, thinning=config.thinning,
    )
    fc = FiberConfig(z=nodes[0], base=base, newton_tol=tol, newton_max_iter=max_iter)
    sum_b = np.zeros((total, m))
    sum_phi = np.zeros((total, m, m))
    sum_A = np.zeros((total, m, m))
    n_rec = 0
    for _, x in iter_fiber(spec, fc, x_start, z_per_walker=z_walk):
        _, lxi, Phi, A = sample_quantities(spec, x)
        sum_b += lxi
        sum_phi += Phi
        sum_A += A
        n_rec += 1
    # walker means are (nearly) independent; node statistics use them
    wb = (sum_b / n_rec).reshape(-1, W, m)
    b = wb.mean(axis=1)
    b_se = wb.std(axis=1, ddof=1) / np.sqrt(W) if W > 1 else np.full_like(b, np.nan)
    phi = (sum_phi / n_rec).reshape(-1, W, m, m).mean(axis=1)
    A = (sum_A / n_rec).reshape(-1, W, m, m).mean(axis=1)
    shape = grid.shape
    if Q is None and q_samples is not None:
        acc = BinAccumulator(grid).add_states(spec, q_samples)
        Q = (acc.count / (acc.total * grid.cell_volumes().reshape(-1))).reshape(shape)
    model = EffectiveModel(
        grid=grid,
        b_tilde=b.reshape(shape + (m,)),
        phi_mean=phi.reshape(shape + (m, m)),
        Q=None if Q is None else np.asarray(Q, float).reshape(shape),
        counts=np.full(shape, W * n_rec),
        b_se=b_se.reshape(shape + (m,)),
        a_mean=A.reshape(shape + (m, m)),
        meta={"method": "fiber", "walkers": W, "records": n_rec, "dt": config.dt},
    )
    check_sigma_identity(model)
    return model


def _fiber_integrand(spec, chart, z, beta, mass_only=False):
    m = spec.m

    def weight(s):
        s = np.atleast_1d(np.asarray(s, float))
        x = chart.point(z, s)
        T = chart.tangent(z, s)
        J = spec.jac(x)
        vol = np.sqrt(np.linalg.det(T.T @ T))
        return np.exp(-beta * spec.V(x)) / np.sqrt(np.linalg.det(J @ J.T)) * vol

    if mass_only:
        return lambda s: np.atleast_1d(weight(s))

    def f(s):
        s = np.atleast_1d(np.asarray(s, float))
        x = chart.point(z, s)
        T = chart.tangent(z, s)
        J = spec.jac(x)
        a = spec.a(x)
        Phi = _phi(J, a)
        A = spd_sqrt(Phi)
        lxi = generator_xi(spec, x)
        vol = np.sqrt(np.linalg.det(T.T @ T))
        w = np.exp(-beta * spec.V(x)) / np.sqrt(np.linalg.det(J @ J.T)) * vol
        return w * np.concatenate([[1.0], lxi, Phi.reshape(m * m), A.reshape(m * m)])

    return f


def _integrate_fiber(f, bounds, epsabs, epsrel):
    if len(bounds) == 1:
        (lo, hi), = bounds
        res, err, info = integrate.quad_vec(f, lo, hi, epsabs=epsabs, epsrel=epsrel, full_output=True)
        if not info.success:
            raise OracleError("fiber quadrature did not converge", achieved=float(err))
        return res
    if len(bounds) == 2:
        (l0, h0), (l1, h1) = bounds

        def inner(s0):
            g = lambda s1: f(np.array([s0, s1]))
            res, err, info = integrate.quad_vec(g, l1, h1, epsabs=epsabs, epsrel=epsrel, full_output=True)
            if not info.success:
                raise OracleError("inner fiber quadrature did not converge", achieved=float(err))
            return res

        res, err, info = integrate.quad_vec(inner, l0, h0, epsabs=epsabs, epsrel=epsrel, full_output=True)
        if not info.success:
            raise OracleError("outer fiber quadrature did not converge", achieved=float(err))
        return res
    raise UnsupportedGeometryError("quadrature oracle supports fibers of dimension 1 or 2")


@functools.lru_cache(maxsize=8)
def _gauss_legendre(k):
    return np.polynomial.legendre.leggauss(k)


def _fiber_mass(spec, chart, z, beta, order=256, rtol=1e-10):
    """Conditional mass of one level set by vectorized Gauss-Legendre rules of
    two orders; their disagreement is the achieved tolerance."""
    if chart.dim != 1:
        f = _fiber_integrand(spec, chart, z, beta, mass_only=True)
        return _integrate_fiber(f, chart.window(z), 1e-14, rtol)[0]
    (lo, hi), = chart.window(z)

    def rule(k):
        u, w = _gauss_legendre(k)
        s = 0.5 * (hi - lo) * u + 0.5 * (hi + lo)
        x = chart.point(z, s[:, None])
        T = chart.tangent(z, s[:, None])[..., 0]
        J = spec.jac(x)
        dens = np.exp(-beta * spec.V(x)) / np.sqrt(np.linalg.det(J @ np.swapaxes(J, -1, -2)))
        return 0.5 * (hi - lo) * np.sum(w * dens * np.linalg.norm(T, axis=-1))

    coarse, fine = rule(order // 2), rule(order)
    if abs(fine - coarse) > rtol * abs(fine) + 1e-300:
        raise OracleError("level-set mass quadrature did not converge", achieved=abs(fine - coarse))
    return fine


def quadrature_oracle(system, grid: ZGrid, epsabs=1e-13, epsrel=1e-11) -> EffectiveModel:
    """Deterministic effective model by quadrature over each level set.

    ``system`` is a built-in system (it supplies the chart of the level
    sets).  The conditional measure carries the weight
    ``exp(-beta V) det(grad xi grad xi^T)^{-1/2}`` against surface measure,
    and ``Q`` is normalized over the support of the reaction coordinate.
    """
    spec, chart = system.spec, system.chart
    if chart is None:
        raise UnsupportedGeometryError(f"{system.name} has no level-set chart")
    m = spec.m
    for k, (lo, hi) in enumerate(system.z_support):
        if grid.axes[k][0] <= lo or grid.axes[k][-1] >= hi:
            raise InputError(f"grid axis {k} leaves the support ({lo}, {hi}) of the reaction coordinate")
    beta = spec.beta
    nodes = grid.nodes().reshape(-1, m)

    def fiber_moments(z):
        f = _fiber_integrand(spec, chart, z, beta)
        return _integrate_fiber(f, chart.window(z), epsabs, epsrel)

    rows = np.array([fiber_moments(z) for z in nodes])
    Z = rows[:, 0]
    if np.any(Z <= 0):
        raise OracleError("level set carries no conditional mass", achieved=float(Z.min()))
    b = rows[:, 1:1 + m] / Z[:, None]
    phi = rows[:, 1 + m:1 + m + m * m].reshape(-1, m, m) / Z[:, None, None]
    A = rows[:, 1 + m + m * m:].reshape(-1, m, m) / Z[:, None, None]

    if m == 1:
        (lo, hi), = system.z_support
        def mass(z):
            zz = np.array([z])
            return _fiber_mass(spec, chart, zz, beta)

        total, err = integrate.quad(mass, lo, hi, epsabs=1e-12, epsrel=1e-10, limit=200)
        if not np.isfinite(total) or total <= 0:
            raise OracleError("normalization of the marginal density failed", achieved=float(err))
    else:
        total = float(np.sum(Z * grid.cell_volumes().reshape(-1)))
    shape = grid.shape
    return EffectiveModel(
        grid=grid,
        b_tilde=b.reshape(shape + (m,)),
        phi_mean=phi.reshape(shape + (m, m)),
        Q=(Z / total).reshape(shape),
        a_mean=A.reshape(shape + (m, m)),
        meta={"method": "quadrature", "system": system.name},
    )


# ---------------------------------------------------------------------------
# constants of the error bounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KappaEstimate:
    kappa1: float
    kappa2: float
    kappa1_sq: float
    kappa2_sq: float
    se1_sq: float
    se2_sq: float
    n: int
    rejected: int


def _fiber_gradient_energy(spec, x, G):
    """``sum_k (Pi g_k) . (a Pi g_k)`` for gradients ``G`` of shape (N, K, n)."""
    J = spec.jac(x)
    a = spec.a(x)
    Pi = _pi(J, a, _phi(J, a))
    PG = np.einsum("...ij,...kj->...ki", Pi, G)
    return np.einsum("...ki,...ij,...kj->...", PG, a, PG)


def _per_sample(fn, x):
    try:
        return fn(x), np.ones(len(x), bool)
    except (EvaluationError, NearSingularError, FloatingPointError, np.linalg.LinAlgError):
        pass
    vals, ok = [], np.ones(len(x), bool)
    for i in range(len(x)):
        try:
            vals.append(fn(x[i:i + 1])[0])
        except (EvaluationError, NearSingularError, FloatingPointError, np.linalg.LinAlgError):
            ok[i] = False
    if not ok.any():
        raise EstimationError("every sample was rejected")
    return np.array(vals), ok


def estimate_kappas(spec: SystemSpec, mu_samples, h=None, max_reject=0.01, chunk=5000) -> KappaEstimate:
    """Monte Carlo estimates of the fiber-gradient constants.

    ``kappa1^2 = E sum_i (Pi grad L xi_i).(a Pi grad L xi_i)`` and
    ``kappa2^2 = E sum_ij (Pi grad A_ij).(a Pi grad A_ij)``; both gradients
    are central differences of the composite maps.
    """
    x = np.asarray(mu_samples, dtype=float).reshape(-1, spec.n)
    m = spec.m

    def A_of(p):
        return spd_sqrt(_phi(spec.jac(p), spec.a(p))).reshape(p.shape[:-1] + (m * m,))

    def integrands(p):
        g1 = fd_jacobian(lambda q: generator_xi(spec, q), p, h)  # (N, m, n)
        g2 = fd_jacobian(A_of, p, h)  # (N, m*m, n)
        out = np.stack([_fiber_gradient_energy(spec, p, g1), _fiber_gradient_energy(spec, p, g2)], -1)
        if not np.all(np.isfinite(out)):
            raise EvaluationError("non-finite composite derivative")
        return out

    vals, oks = [], []
    for s in range(0, len(x), chunk):
        v, ok = _per_sample(integrands, x[s:s + chunk])
        vals.append(v)
        oks.append(ok)
    vals = np.concatenate(vals)
    ok = np.concatenate(oks)
    rejected = int(np.sum(~ok))
    if rejected > max_reject * len(x):
        raise EstimationError(f"{rejected} of {len(x)} samples rejected while estimating kappa")
    k1, k2 = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else np.array([np.nan, np.nan])
    return KappaEstimate(
        kappa1=float(np.sqrt(max(k1, 0.0))), kappa2=float(np.sqrt(max(k2, 0.0))),
        kappa1_sq=float(k1), kappa2_sq=float(k2), se1_sq=float(se[0]), se2_sq=float(se[1]),
        n=int(len(vals)), rejected=rejected,
    )


def fiber_generator(spec: SystemSpec, z, chart, n_cells=800):
    """Finite-volume discretization of the fiber generator on a 1D level set.

    Returns ``(K, mass, s)``: the symmetric stiffness matrix ``K`` (``-L0`` in
    weak form), the diagonal ``mass`` of the conditional density per cell,
    and the cell centres ``s``.  ``-L0`` is similar to
    ``mass^{-1/2} K mass^{-1/2}``.
    """
    if chart is None or chart.dim != 1:
        raise UnsupportedGeometryError("spectral-gap estimation needs a one-dimensional level set")
    z = np.atleast_1d(np.asarray(z, dtype=float))
    (lo, hi), = chart.window(z)
    periodic = chart.periodic[0]
    h = (hi - lo) / n_cells
    centres = lo + h * (np.arange(n_cells) + 0.5)
    faces = lo + h * np.arange(n_cells + 1) if not periodic else lo + h * np.arange(n_cells)
    beta = spec.beta

    def density_and_diffusivity(s):
        x = chart.point(z, s[:, None])
        T = chart.tangent(z, s[:, None])[..., 0]  # (N, n)
        J = spec.jac(x)
        a = spec.a(x)
        Pi = _pi(J, a, _phi(J, a))
        PT = np.einsum("...ij,...j->...i", Pi, T)
        t2 = np.sum(T**2, axis=-1)
        D = np.einsum("...i,...ij,...j->...", PT, a, PT) / (beta * t2**2)
        logw = -beta * spec.V(x) - 0.5 * np.log(np.linalg.det(J @ np.swapaxes(J, -1, -2))) + 0.5 * np.log(t2)
        return logw, D

    logw_c, _ = density_and_diffusivity(centres)
    logw_f, D_f = density_and_diffusivity(faces)
    shift = max(logw_c.max(), logw_f.max())
    mass = np.exp(logw_c - shift) * h
    cond = np.exp(logw_f - shift) * D_f / h
    if periodic:
        # face k sits between cell k-1 and cell k (cyclically)
        K = np.zeros((n_cells, n_cells))
        left = (np.arange(n_cells) - 1) % n_cells
        right = np.arange(n_cells)
        for c, i, j in zip(cond, left, right):
            K[i, i] += c
            K[j, j] += c
            K[i, j] -= c
            K[j, i] -= c
        return K, mass, centres
    # reflecting walls: only interior faces carry flux
    ci = cond[1:-1]
    diag = np.zeros(n_cells)
    diag[:-1] += ci
    diag[1:] += ci
    K = np.diag(diag) - np.diag(ci, 1) - np.diag(ci, -1)
    return K, mass, centres


def estimate_rho(spec: SystemSpec, z, chart, n_cells=800, dense=False):
    """Spectral gap of the fiber generator on the level set ``xi = z``.

    The level set must be one-dimensional; the chart comes from a built-in
    system.  Non-periodic fibers use a tridiagonal eigensolver unless
    ``dense`` is set.
    """
    K, mass, _ = fiber_generator(spec, z, chart, n_cells)
    r = 1.0 / np.sqrt(mass)
    S = K * r[:, None] * r[None, :]
    periodic = chart.periodic[0]
    try:
        if periodic or dense:
            w = eigh(S, eigvals_only=True, subset_by_index=[0, 1])
        else:
            d = np.diag(S).copy()
            e = np.diag(S, 1).copy()
            w = eigh_tridiagonal(d, e, eigvals_only=True, select="i", select_range=(0, 1))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise EstimationError(f"eigen-solve failed: {exc}") from None
    gap = float(w[1])
    if not gap > 0:
        raise EstimationError(f"non-positive spectral gap {gap:g}")
    return gap


def estimate_rho_grid(spec: SystemSpec, grid: ZGrid, chart, n_cells=800):
    """Gap at every node and its minimum over the grid."""
    nodes = grid.nodes().reshape(-1, grid.m)
    vals = np.array([estimate_rho(spec, z, chart, n_cells) for z in nodes]).reshape(grid.shape)
    return float(vals.min()), vals


def _adjacent_pairs(grid: ZGrid, missing):
    for k in range(grid.m):
        n = grid.shape[k]
        lo = [slice(None)] * grid.m
        hi = [slice(None)] * grid.m
        lo[k] = slice(0, n - 1)
        hi[k] = slice(1, n)
        step = np.diff(grid.axes[k]).reshape([-1 if j == k else 1 for j in range(grid.m)])
        ok = ~(missing[tuple(lo)] | missing[tuple(hi)])
        yield tuple(lo), tuple(hi), np.broadcast_to(step, ok.shape), ok


def estimate_lipschitz(model: EffectiveModel):
    """Largest difference quotients of ``b~`` and ``sigma~`` over adjacent
    grid nodes.  These are lower bounds on the true Lipschitz constants."""
    if model.missing.all():
        raise EstimationError("no valid nodes")
    Lb = Ls = 0.0
    any_pair = False
    for lo, hi, step, ok in _adjacent_pairs(model.grid, model.missing):
        if not ok.any():
            continue
        any_pair = True
        db = np.linalg.norm(model.b_tilde[hi] - model.b_tilde[lo], axis=-1) / step
        ds = np.linalg.norm(model.sigma_nodes[hi] - model.sigma_nodes[lo], axis=(-2, -1)) / step
        Lb = max(Lb, float(db[ok].max()))
        Ls = max(Ls, float(ds[ok].max()))
    if not any_pair:
        raise EstimationError("no pair of adjacent valid nodes")
    return Lb, Ls


def estimate_dissipativity(model: EffectiveModel):
    """Largest ``L_d`` with ``(b~(z) - b~(z')).(z - z') <= -L_d |z - z'|^2``
    over adjacent grid nodes (an upper bound on the true constant)."""
    Ld = np.inf
    for lo, hi, step, ok in _adjacent_pairs(model.grid, model.missing):
        k = next(i for i, s in enumerate(lo) if s != slice(None))
        db = model.b_tilde[hi][..., k] - model.b_tilde[lo][..., k]
        ratio = -db / step
        if ok.any():
            Ld = min(Ld, float(ratio[ok].min()))
    if not np.isfinite(Ld):
        raise EstimationError("no pair of adjacent valid nodes")
    return Ld


# ---------------------------------------------------------------------------
# equilibrium moments of the fluctuation terms
# ---------------------------------------------------------------------------

def fluctuation_moment(spec: SystemSpec, model: EffectiveModel, mu_samples):
    """Monte Carlo ``E |L xi - b~(xi)|^2`` with its standard error."""
    x = np.asarray(mu_samples, dtype=float).reshape(-1, spec.n)
    v = np.sum((generator_xi(spec, x) - model.b(spec.xi_value(x))) ** 2, axis=-1)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


@dataclass(frozen=True)
class FrobeniusSplit:
    """Equilibrium means of the three squared Frobenius distances between
    ``A``, ``sigma~(xi)`` and the conditional mean of ``A``.

    ``identity_gap`` is the paired mean of
    ``total - within - between`` with standard error ``identity_se``.
    """

    total: float
    within: float
    between: float
    total_se: float
    within_se: float
    between_se: float
    identity_gap: float
    identity_se: float
    n: int


def frobenius_split(spec: SystemSpec, model: EffectiveModel, mu_samples) -> FrobeniusSplit:
    x = np.asarray(mu_samples, dtype=float).reshape(-1, spec.n)
    fr = level_set_frame(spec, x)
    z = spec.xi_value(x)
    S = model.sigma(z)
    EA = model.conditional_mean_A(z)
    t = np.sum((fr.A - S) ** 2, axis=(-2, -1))
    w = np.sum((fr.A - EA) ** 2, axis=(-2, -1))
    b = np.sum((S - EA) ** 2, axis=(-2, -1))
    d = t - w - b
    n = len(x)

    def se(v):
        return float(v.std(ddof=1) / np.sqrt(n))

    return FrobeniusSplit(
        total=float(t.mean()), within=float(w.mean()), between=float(b.mean()),
        total_se=se(t), within_se=se(w), between_se=se(b),
        identity_gap=float(d.mean()), identity_se=se(d), n=n,
    )
