"""Built-in test systems addressable by name.

Every built-in ships the :class:`~effdyn.model.SystemSpec` plus the extra
structure the deterministic oracles need: a chart of each level set, the
support of the reaction coordinate, and (when available) an exact sampler
of the equilibrium measure.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import ConfigurationError
from .model import SystemSpec


@dataclass(frozen=True)
class FiberChart:
    """Parameterization ``s -> point(z, s)`` of the level set through ``z``.

    ``tangent(z, s)`` returns the columns ``d point / d s_k`` with shape
    (..., n, k).  ``bounds`` gives the full integration range (possibly
    infinite) and ``window`` a finite range holding essentially all of the
    conditional mass, used when the fiber must be discretized.
    """

    point: Callable
    tangent: Callable
    bounds: Callable
    window: Callable
    periodic: tuple

    @property
    def dim(self):
        return len(self.periodic)


@dataclass(frozen=True)
class BuiltinSystem:
    name: str
    spec: SystemSpec
    chart: Optional[FiberChart]
    z_support: tuple
    sample_equilibrium: Optional[Callable] = None

    def start_on_fiber(self, z):
        """A point on the level set ``xi = z`` (middle of the chart window)."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        s = np.array([0.5 * (lo + hi) for lo, hi in self.chart.window(z)])
        return self.chart.point(z, s)


# ---------------------------------------------------------------------------
# quadratic potentials with constant diagonal mobility, xi = x_1
# ---------------------------------------------------------------------------

def _linear_gaussian(name, M, a_diag, beta, params):
    M = np.asarray(M, dtype=float)
    a_diag = np.asarray(a_diag, dtype=float)
    n = M.shape[0]
    if np.any(np.linalg.eigvalsh(M) <= 0):
        raise ConfigurationError(f"{name}: potential is not confining for parameters {params}")
    sig = np.diag(np.sqrt(a_diag))
    a = np.diag(a_diag)
    J = np.zeros((1, n))
    J[0, 0] = 1.0

    spec = SystemSpec(
        n=n,
        m=1,
        beta=beta,
        potential=lambda x: 0.5 * np.einsum("...i,ij,...j->...", x, M, x),
        potential_grad=lambda x: x @ M,
        xi=lambda x: x[..., :1],
        xi_jac=lambda x: J,
        xi_hess=lambda x: np.zeros((1, n, n)),
        sigma=lambda x: sig,
        mobility=lambda x: a,
        mobility_div=lambda x: np.zeros(n),
        c1=float(a_diag.min()),
        name=name,
        params=dict(params),
    )

    # conditional law of y = x[1:] given x_1 = z is Gaussian
    Myy = M[1:, 1:]
    Myz = M[1:, 0]
    cond_cov = np.linalg.inv(beta * Myy)
    cond_sd = np.sqrt(np.diag(cond_cov))
    shift = -np.linalg.solve(Myy, Myz)

    def point(z, s):
        s = np.asarray(s, dtype=float)
        z = np.broadcast_to(np.asarray(z, float)[..., :1], s.shape[:-1] + (1,))
        return np.concatenate([z, s], axis=-1)

    def tangent(z, s):
        s = np.asarray(s, dtype=float)
        T = np.zeros((n, n - 1))
        T[1:, :] = np.eye(n - 1)
        return np.broadcast_to(T, s.shape[:-1] + (n, n - 1))

    def window(z):
        mean = shift * float(np.atleast_1d(z)[0])
        return [(mu - 14 * sd, mu + 14 * sd) for mu, sd in zip(mean, cond_sd)]

    chart = FiberChart(
        point=point,
        tangent=tangent,
        bounds=lambda z: [(-np.inf, np.inf)] * (n - 1),
        window=window,
        periodic=(False,) * (n - 1),
    )
    cov = np.linalg.inv(beta * M)
    chol = np.linalg.cholesky(cov)

    def sample(rng, size):
        return rng.standard_normal((size, n)) @ chol.T

    marg_sd = float(np.sqrt(cov[0, 0]))
    return BuiltinSystem(name, spec, chart, ((-np.inf, np.inf),), sample), marg_sd


def _coupled_precision(coupling, stiff):
    # V = z^2/2 + c (y - z)^2 / 2 + stiff * y^2 / 2
    c = coupling
    return [[1.0 + c, -c], [-c, c + stiff]]


def ou2d(beta=1.0):
    """Isotropic Ornstein-Uhlenbeck process ``V = |x|^2/2``, ``xi = x_1``."""
    return _linear_gaussian("ou2d", np.eye(2), [1.0, 1.0], beta, {"beta": beta})[0]


def case1_linear(eps=0.1, K=1.0, coupling=1.0, beta=1.0):
    """Stiff potential ``V0 + V1/eps`` with ``V1 = K y^2/2``, identity mobility."""
    if eps <= 0 or K <= 0 or coupling < 0:
        raise ConfigurationError("case1-linear needs eps > 0, K > 0, coupling >= 0")
    params = {"eps": eps, "K": K, "coupling": coupling, "beta": beta}
    return _linear_gaussian("case1-linear", _coupled_precision(coupling, K / eps), [1.0, 1.0], beta, params)[0]


def case2_linear(delta=0.1, coupling=1.0, beta=1.0):
    """Quadratic ``V0`` with fast mobility ``a = diag(1, 1/delta)``."""
    if delta <= 0 or coupling <= 0:
        raise ConfigurationError("case2-linear needs delta > 0, coupling > 0")
    params = {"delta": delta, "coupling": coupling, "beta": beta}
    return _linear_gaussian(
        "case2-linear", _coupled_precision(coupling, 0.0), [1.0, 1.0 / delta], beta, params
    )[0]


def case3_linear(eps=0.1, delta=0.1, K=1.0, coupling=1.0, beta=1.0):
    """Both mechanisms: stiff ``V1/eps`` and fast mobility ``1/delta``."""
    if eps <= 0 or delta <= 0 or K <= 0 or coupling < 0:
        raise ConfigurationError("case3-linear needs eps, delta, K > 0 and coupling >= 0")
    params = {"eps": eps, "delta": delta, "K": K, "coupling": coupling, "beta": beta}
    return _linear_gaussian(
        "case3-linear", _coupled_precision(coupling, K / eps), [1.0, 1.0 / delta], beta, params
    )[0]


# ---------------------------------------------------------------------------
# radial potential, xi = |x|
# ---------------------------------------------------------------------------

def radial2d(k=10.0, r0=1.0, a1=1.0, a2=1.0, beta=1.0):
    """``V = k (|x| - r0)^2 / 2`` in the plane with ``xi = |x|`` and constant
    mobility ``diag(a1, a2)``.  With ``a1 == a2`` the effective coefficients
    coincide with the projected ones, so the coupled error is pure
    discretization error."""
    if k <= 0 or r0 <= 0 or a1 <= 0 or a2 <= 0:
        raise ConfigurationError("radial2d needs k, r0, a1, a2 > 0")
    a = np.diag([a1, a2])
    sig = np.diag(np.sqrt([a1, a2]))

    def r_of(x):
        return np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2)

    def grad_V(x):
        r = r_of(x)
        return (k * (r - r0) / r)[..., None] * x

    def jac(x):
        return (x / r_of(x)[..., None])[..., None, :]

    def hess(x):
        r = r_of(x)[..., None, None]
        u = x[..., :, None] * x[..., None, :]
        return ((np.eye(2) - u / r**2) / r)[..., None, :, :]

    spec = SystemSpec(
        n=2,
        m=1,
        beta=beta,
        potential=lambda x: 0.5 * k * (r_of(x) - r0) ** 2,
        potential_grad=grad_V,
        xi=lambda x: r_of(x)[..., None],
        xi_jac=jac,
        xi_hess=hess,
        sigma=lambda x: sig,
        mobility=lambda x: a,
        mobility_div=lambda x: np.zeros(2),
        c1=min(a1, a2),
        name="radial2d",
        params={"k": k, "r0": r0, "a1": a1, "a2": a2, "beta": beta},
    )

    def point(z, s):
        s = np.asarray(s, dtype=float)[..., 0]
        r = float(np.atleast_1d(z)[0])
        return r * np.stack([np.cos(s), np.sin(s)], axis=-1)

    def tangent(z, s):
        s = np.asarray(s, dtype=float)[..., 0]
        r = float(np.atleast_1d(z)[0])
        return (r * np.stack([-np.sin(s), np.cos(s)], axis=-1))[..., None]

    chart = FiberChart(
        point=point,
        tangent=tangent,
        bounds=lambda z: [(0.0, 2 * np.pi)],
        window=lambda z: [(0.0, 2 * np.pi)],
        periodic=(True,),
    )

    # inverse-CDF table for the radial marginal r exp(-beta V(r))
    width = 14.0 / np.sqrt(beta * k)
    rr = np.linspace(0.0, r0 + width, 40001)
    dens = rr * np.exp(-beta * 0.5 * k * (rr - r0) ** 2)
    cdf = cumulative_trapezoid(dens, rr, initial=0.0)
    cdf /= cdf[-1]

    def sample(rng, size):
        r = np.interp(rng.uniform(size=size), cdf, rr)
        th = rng.uniform(0.0, 2 * np.pi, size=size)
        return r[:, None] * np.stack([np.cos(th), np.sin(th)], axis=-1)

    return BuiltinSystem("radial2d", spec, chart, ((0.0, np.inf),), sample)


def radial2d_aniso(k=10.0, r0=1.0, a2=2.0, beta=1.0):
    """:func:`radial2d` with anisotropic mobility ``diag(1, a2)``: the matrix
    ``A`` varies along each circle, so the noise mismatch is nonzero."""
    sysm = radial2d(k=k, r0=r0, a1=1.0, a2=a2, beta=beta)
    spec = replace(sysm.spec, name="radial2d-aniso")
    return BuiltinSystem("radial2d-aniso", spec, sysm.chart, sysm.z_support, sysm.sample_equilibrium)


# ---------------------------------------------------------------------------
# non-integrable two-dimensional coordinate in R^3
# ---------------------------------------------------------------------------

def twisted3d(beta=1.0):
    """``xi = (x1, x2 + x1 x3)`` with ``a = I``: the fields ``grad xi_i`` do not
    commute modulo their span, so no complement coordinate exists."""
    J_const = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

    def jac(x):
        J = np.broadcast_to(J_const, x.shape[:-1] + (2, 3)).copy()
        J[..., 1, 0] = x[..., 2]
        J[..., 1, 2] = x[..., 0]
        return J

    def hess(x):
        H = np.zeros((2, 3, 3))
        H[1, 0, 2] = H[1, 2, 0] = 1.0
        return H

    spec = SystemSpec(
        n=3,
        m=2,
        beta=beta,
        potential=lambda x: 0.5 * np.sum(x**2, axis=-1),
        potential_grad=lambda x: x,
        xi=lambda x: np.stack([x[..., 0], x[..., 1] + x[..., 0] * x[..., 2]], axis=-1),
        xi_jac=jac,
        xi_hess=hess,
        sigma=lambda x: np.eye(3),
        mobility=lambda x: np.eye(3),
        mobility_div=lambda x: np.zeros(3),
        c1=1.0,
        name="twisted3d",
        params={"beta": beta},
    )

    def sample(rng, size):
        return rng.standard_normal((size, 3)) / np.sqrt(beta)

    return BuiltinSystem("twisted3d", spec, None, ((-np.inf, np.inf),) * 2, sample)


SYSTEMS = {
    "ou2d": ou2d,
    "case1-linear": case1_linear,
    "case2-linear": case2_linear,
    "case3-linear": case3_linear,
    "radial2d": radial2d,
    "radial2d-aniso": radial2d_aniso,
    "twisted3d": twisted3d,
}


def make_system(name, **params) -> BuiltinSystem:
    """Instantiate a registered system, e.g. ``make_system("case1-linear", eps=0.05)``."""
    try:
        factory = SYSTEMS[name]
    except KeyError:
        raise ConfigurationError(f"unknown system {name!r}; known: {sorted(SYSTEMS)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for {name!r}: {exc}") from None
