"""Closed-form error bounds for the effective dynamics and a Gronwall-type
comparison, plus a power-law fit for scaling studies.

Bound kinds
-----------
``prop1``
    ``3t/(beta rho) (kappa1^2 t + 32 kappa2^2/beta) e^{Lt}``
``thm1``
    ``3t/(beta rho) (27 kappa1^2/(2 rho) + 32 kappa2^2/beta) e^{Lt}``
``thm2_density``
    ``sqrt(t) c0 sqrt(chi2) e^{L't}`` with
    ``c0 = 9 kappa1/(sqrt(2 beta) rho) + 12 kappa2/(beta sqrt(rho))``;
    bounds the (unsquared) mean sup-error for a start distribution whose
    density ratio to equilibrium has second moment ``chi2``.
``thm2_fixed``
    ``{sqrt(t) c0 [1 + e^{-alpha (t1 - t0)} sqrt(p2)]
    + sqrt(t1) (3 C1 sqrt(t1) + 18 C2/sqrt(beta))} e^{L't}`` for a fixed start;
    ``p2`` is the second moment of the density ratio at time ``t0``.
``diss_contractive`` / ``diss_expansive``
    marginal mean-square bounds under a one-sided dissipativity condition.

Here ``L = 3 L_b^2 + 48 L_sigma^2/beta + 1`` and
``L' = 3/2 L_b^2 + 24 L_sigma^2/beta + 1/2``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import linregress

from .errors import FitError, QueryError, RegimeError

KINDS = ("prop1", "thm1", "thm2_density", "thm2_fixed", "diss_contractive", "diss_expansive")


@dataclass(frozen=True)
class BoundParams:
    """Constants entering the bounds.

    ``L_d`` is only used by the dissipative bounds, ``alpha`` (the Poincare
    constant of the full dynamics) and ``C1_sup_phi``, ``C2_sup_A`` only by
    ``thm2_fixed``.
    """

    kappa1: float
    kappa2: float
    rho: float
    L_b: float = 0.0
    L_sigma: float = 0.0
    beta: float = 1.0
    L_d: float = 0.0
    alpha: Optional[float] = None
    C1_sup_phi: float = 0.0
    C2_sup_A: float = 0.0

    def __post_init__(self):
        vals = [self.kappa1, self.kappa2, self.rho, self.L_b, self.L_sigma, self.beta, self.L_d,
                self.C1_sup_phi, self.C2_sup_A]
        if self.alpha is not None:
            vals.append(self.alpha)
        if not all(np.isfinite(v) for v in vals):
            raise QueryError("bound parameters must be finite")
        if not self.rho > 0 or not self.beta > 0:
            raise QueryError("rho and beta must be positive")
        if min(self.kappa1, self.kappa2, self.L_b, self.L_sigma, self.C1_sup_phi, self.C2_sup_A) < 0:
            raise QueryError("kappa, Lipschitz and sup constants must be nonnegative")
        if self.alpha is not None and not self.alpha > 0:
            raise QueryError("alpha must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class BoundQuery:
    kind: str
    params: BoundParams
    t: float
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise QueryError(f"unknown bound kind {self.kind!r}; expected one of {KINDS}")
        if not (np.isfinite(self.t) and self.t >= 0):
            raise QueryError("t must be a finite nonnegative number")
        need = {
            "thm2_density": ("chi2",),
            "thm2_fixed": ("t0", "t1", "p_t0_sq"),
            "diss_contractive": ("v1", "v2"),
            "diss_expansive": ("v1", "v2"),
        }.get(self.kind, ())
        missing = [k for k in need if self.extras.get(k) is None]
        if missing:
            raise QueryError(f"{self.kind} needs extras {missing}")
        if self.kind == "thm2_fixed":
            t0, t1 = self.extras["t0"], self.extras["t1"]
            if not 0 < t0 <= t1 <= self.t:
                raise QueryError("thm2_fixed needs 0 < t0 <= t1 <= t")
            if t1 > t0 and self.params.alpha is None:
                raise QueryError("thm2_fixed with t1 > t0 needs alpha")
            if self.extras["p_t0_sq"] < 0:
                raise QueryError("p_t0_sq must be nonnegative")
        if self.kind == "thm2_density" and self.extras["chi2"] < 0:
            raise QueryError("chi2 must be nonnegative")
        if self.kind.startswith("diss") and not (self.extras["v1"] > 0 and self.extras["v2"] > 0):
            raise QueryError("v1 and v2 must be positive")


def growth_rate(p: BoundParams):
    """``L = 3 L_b^2 + 48 L_sigma^2/beta + 1``."""
    return 3.0 * p.L_b**2 + 48.0 * p.L_sigma**2 / p.beta + 1.0


def growth_rate_half(p: BoundParams):
    """``L' = 3/2 L_b^2 + 24 L_sigma^2/beta + 1/2``."""
    return 1.5 * p.L_b**2 + 24.0 * p.L_sigma**2 / p.beta + 0.5


def _exp(x):
    """``e^x`` that returns ``inf`` instead of raising (the bound is then vacuous)."""
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


def _expm1(x):
    try:
        return math.expm1(x)
    except OverflowError:
        return math.inf


def _sqrt_prefactor(p: BoundParams):
    return 9.0 * p.kappa1 / (math.sqrt(2.0 * p.beta) * p.rho) + 12.0 * p.kappa2 / (p.beta * math.sqrt(p.rho))


def _diss_bracket(p, v1, v2):
    return (p.kappa1**2 / (2.0 * v1) + 2.0 * p.kappa2**2 / p.beta * (1.0 + 1.0 / v2)) / (p.beta * p.rho)


def theorem_bound(q: BoundQuery) -> float:
    """Evaluate the right-hand side selected by ``q.kind`` at time ``q.t``."""
    p, t, x = q.params, q.t, q.extras
    if q.kind == "prop1":
        return 3.0 * t / (p.beta * p.rho) * (p.kappa1**2 * t + 32.0 * p.kappa2**2 / p.beta) * _exp(growth_rate(p) * t)
    if q.kind == "thm1":
        return (
            3.0 * t / (p.beta * p.rho)
            * (27.0 * p.kappa1**2 / (2.0 * p.rho) + 32.0 * p.kappa2**2 / p.beta)
            * _exp(growth_rate(p) * t)
        )
    if q.kind == "thm2_density":
        return math.sqrt(t) * _sqrt_prefactor(p) * math.sqrt(x["chi2"]) * _exp(growth_rate_half(p) * t)
    if q.kind == "thm2_fixed":
        t0, t1 = x["t0"], x["t1"]
        decay = 1.0 if t1 == t0 else math.exp(-p.alpha * (t1 - t0))
        first = math.sqrt(t) * _sqrt_prefactor(p) * (1.0 + decay * math.sqrt(x["p_t0_sq"]))
        second = math.sqrt(t1) * (3.0 * p.C1_sup_phi * math.sqrt(t1) + 18.0 * p.C2_sup_A / math.sqrt(p.beta))
        return (first + second) * _exp(growth_rate_half(p) * t)
    v1, v2 = x["v1"], x["v2"]
    if q.kind == "diss_contractive":
        if not p.L_d > p.L_sigma**2 / p.beta:
            raise RegimeError("contractive bound needs L_d > L_sigma^2 / beta")
        C1 = p.L_d - p.L_sigma**2 * (1.0 + v2) / p.beta - v1 / 2.0
        if not C1 > 0:
            raise RegimeError(f"v1={v1}, v2={v2} give nonpositive contraction rate {C1:g}")
        return _diss_bracket(p, v1, v2) / C1 * (-math.expm1(-2.0 * C1 * t))
    # diss_expansive
    C2 = p.L_sigma**2 * (1.0 + v2) / p.beta - p.L_d + v1 / 2.0
    if not C2 > 0:
        raise RegimeError(f"v1={v1}, v2={v2} give nonpositive growth rate {C2:g}")
    return _diss_bracket(p, v1, v2) / C2 * _expm1(2.0 * C2 * t)


def bound(kind, params: BoundParams, t, **extras) -> float:
    """Shorthand for ``theorem_bound(BoundQuery(kind, params, t, extras))``."""
    return theorem_bound(BoundQuery(kind, params, float(t), dict(extras)))


def minimize_thm2_fixed(params: BoundParams, t, t0, p_t0_sq, t1_grid: Sequence[float]):
    """Smallest ``thm2_fixed`` bound over admissible ``t1`` in ``t1_grid``.

    Returns ``(value, t1)``.
    """
    best = (math.inf, None)
    for t1 in t1_grid:
        if not t0 <= t1 <= t:
            continue
        v = bound("thm2_fixed", params, t, t0=t0, t1=float(t1), p_t0_sq=p_t0_sq)
        if v < best[0]:
            best = (v, float(t1))
    if best[1] is None:
        raise QueryError("no t1 in the grid lies in [t0, t]")
    return best


def minimize_dissipative(kind, params: BoundParams, t, n=80, upper=4.0):
    """Minimize a dissipative bound over ``(v1, v2)`` on a uniform grid of
    ``(0, upper]^2``.  Returns ``(value, v1, v2)``; grid points outside the
    admissible regime are skipped."""
    if kind not in ("diss_contractive", "diss_expansive"):
        raise QueryError(f"{kind} is not a dissipative bound")
    if kind == "diss_contractive" and not params.L_d > params.L_sigma**2 / params.beta:
        raise RegimeError("contractive bound needs L_d > L_sigma^2 / beta")
    vals = upper * np.arange(1, n + 1) / n
    best = (math.inf, None, None)
    for v1 in vals:
        for v2 in vals:
            try:
                b = bound(kind, params, t, v1=float(v1), v2=float(v2))
            except RegimeError:
                continue
            if b < best[0]:
                best = (b, float(v1), float(v2))
    if best[1] is None:
        raise RegimeError("no admissible (v1, v2) on the grid")
    return best


# ---------------------------------------------------------------------------
# Gronwall-type comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GronwallBound:
    monotone: float
    integral: float


def gronwall_bound(g, C1, C2, t, times=None) -> GronwallBound:
    """Gronwall-type bounds for ``u(t) = E f(t)^2`` when
    ``u(t) <= g(t) + C1 E(int_0^t f)^2 + C2 int_0^t u``.

    Parameters
    ----------
    g : array_like or callable
        Tabulated values on ``times`` (uniform on ``[0, t]`` if omitted), or
        a callable evaluated there.
    Returns
    -------
    GronwallBound
        ``monotone = g(t) e^{(C1+C2+1)t}`` (valid for nondecreasing ``g``)
        and ``integral = g(t) + (C1+C2) int_0^t e^{(C1+C2+1)(t-s)} g(s) ds``
        by the trapezoid rule.
    """
    if C1 < 0 or C2 < 0:
        raise QueryError("C1 and C2 must be nonnegative")
    if t < 0:
        raise QueryError("t must be nonnegative")
    if callable(g):
        times = np.linspace(0.0, t, 1001) if times is None else np.asarray(times, float)
        vals = np.asarray([g(s) for s in times], dtype=float)
    else:
        vals = np.asarray(g, dtype=float)
        times = np.linspace(0.0, t, vals.size) if times is None else np.asarray(times, float)
    if times.shape != vals.shape or times.size < 1:
        raise QueryError("g must be tabulated on the time grid")
    if not np.isclose(times[-1], t) or times[0] != 0.0:
        raise QueryError("time grid must span [0, t]")
    c = C1 + C2
    rate = c + 1.0
    monotone = float(vals[-1] * math.exp(rate * t))
    if times.size == 1:
        return GronwallBound(monotone, float(vals[-1]))
    integrand = np.exp(rate * (t - times)) * vals
    integral = float(vals[-1] + c * np.trapezoid(integrand, times))
    return GronwallBound(monotone, integral)


# ---------------------------------------------------------------------------
# scaling fits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalingFit:
    slope: float
    stderr: float
    intercept: float
    n: int


def fit_scaling(points, model="power-law") -> ScalingFit:
    """Least-squares slope of ``log y`` against ``log x``."""
    if model != "power-law":
        raise FitError(f"unknown scaling model {model!r}")
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise FitError("points must be (parameter, value) pairs")
    if len(pts) < 3:
        raise FitError("need at least three points")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise FitError("power-law fit needs positive finite parameters and measurements")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    if np.ptp(lx) == 0:
        raise FitError("parameter values must not all coincide")
    r = linregress(lx, ly)
    return ScalingFit(slope=float(r.slope), stderr=float(r.stderr), intercept=float(r.intercept), n=len(pts))


def params_from_estimates(kappas, rho, lipschitz, beta, L_d=0.0, alpha=None, C1=0.0, C2=0.0) -> BoundParams:
    """Assemble :class:`BoundParams` from estimator outputs."""
    L_b, L_s = lipschitz
    return BoundParams(
        kappa1=kappas.kappa1, kappa2=kappas.kappa2, rho=rho, L_b=L_b, L_sigma=L_s, beta=beta,
        L_d=L_d, alpha=alpha, C1_sup_phi=C1, C2_sup_A=C2,
    )
