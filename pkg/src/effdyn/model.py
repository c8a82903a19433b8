"""Full reversible diffusion and its infinitesimal generator.

All callbacks are *batched*: they receive an array whose last axis has
length ``n`` and arbitrary leading axes, and return arrays with the same
leading axes.  A callback that returns a value without the leading axes
(for example a constant mobility matrix) is broadcast automatically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, EvaluationError

EPS = np.finfo(float).eps
GRAD_REL_STEP = EPS ** (1.0 / 3.0)
HESS_REL_STEP = EPS ** 0.25

Field = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def default_step(x, rel=GRAD_REL_STEP):
    """Per-coordinate step ``rel * max(1, |x_i|)``."""
    return rel * np.maximum(1.0, np.abs(x))


def _evaluate_stencil(f, pts, batch_ndim):
    # pts: (*batch, P, n) -> values with the stencil axis moved last
    vals = np.asarray(f(pts), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise EvaluationError("non-finite function value on finite-difference stencil")
    return np.moveaxis(vals, batch_ndim, -1)


def _expand(h, out_ndim):
    # (*batch, P) -> (*batch, 1, ..., 1, P) so it broadcasts against outputs
    return h.reshape(h.shape[:-1] + (1,) * out_ndim + h.shape[-1:])


def fd_jacobian(f: Field, x, h=None):
    """Central-difference derivative of ``f`` along the last axis of ``x``.

    Returns an array of shape ``f(x).shape + (n,)``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    h = default_step(x) if h is None else np.broadcast_to(np.asarray(h, float), x.shape)
    disp = h[..., :, None] * np.eye(n)
    xp = x[..., None, :] + disp
    xm = x[..., None, :] - disp
    width = (xp - xm)[..., np.arange(n), np.arange(n)]  # actual representable spacing
    fp = _evaluate_stencil(f, xp, x.ndim - 1)
    fm = _evaluate_stencil(f, xm, x.ndim - 1)
    return (fp - fm) / _expand(width, fp.ndim - x.ndim)


def fd_hessian(f: Field, x, h=None):
    """Central-difference Hessian, symmetrized; shape ``f(x).shape + (n, n)``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    h = default_step(x, HESS_REL_STEP) if h is None else np.broadcast_to(np.asarray(h, float), x.shape)
    bd = x.ndim - 1
    f0 = np.asarray(f(x), dtype=float)
    if not np.all(np.isfinite(f0)):
        raise EvaluationError("non-finite function value at stencil centre")
    out_ndim = f0.ndim - bd
    disp = h[..., :, None] * np.eye(n)
    fp = _evaluate_stencil(f, x[..., None, :] + disp, bd)
    fm = _evaluate_stencil(f, x[..., None, :] - disp, bd)
    hh = _expand(h, out_ndim)
    diag = (fp - 2.0 * f0[..., None] + fm) / hh**2

    H = np.zeros(f0.shape + (n, n))
    H[..., np.arange(n), np.arange(n)] = diag
    if n > 1:
        I, J = np.triu_indices(n, 1)
        di, dj = disp[..., I, :], disp[..., J, :]
        xc = x[..., None, :]
        fpp = _evaluate_stencil(f, xc + di + dj, bd)
        fpm = _evaluate_stencil(f, xc + di - dj, bd)
        fmp = _evaluate_stencil(f, xc - di + dj, bd)
        fmm = _evaluate_stencil(f, xc - di - dj, bd)
        off = (fpp - fpm - fmp + fmm) / (4.0 * _expand(h[..., I] * h[..., J], out_ndim))
        H[..., I, J] = off
        H[..., J, I] = off
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def finite_difference_bundle(f: Field, x, h=None):
    """Gradient and Hessian of a scalar field by O(h^2) central differences.

    Parameters
    ----------
    f : callable
        Batched scalar field.
    x : array_like, shape (..., n)
        Evaluation point(s).
    h : float, optional
        Absolute step for every coordinate.  Defaults to
        ``cbrt(eps) * max(1, |x_i|)`` for the gradient and
        ``eps**(1/4) * max(1, |x_i|)`` for the Hessian.

    Returns
    -------
    grad : ndarray, shape (..., n)
    hess : ndarray, shape (..., n, n)
    """
    if h is not None and not h > 0:
        raise ValueError("finite-difference step must be positive")
    return fd_jacobian(f, x, h), fd_hessian(f, x, h)


# ---------------------------------------------------------------------------
# system definition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarField:
    """Scalar test function with optional analytic derivatives."""

    value: Field
    grad: Optional[Field] = None
    hess: Optional[Field] = None

    def gradient(self, x):
        if self.grad is not None:
            return np.asarray(self.grad(x), dtype=float)
        return fd_jacobian(self.value, x)

    def hessian(self, x):
        if self.hess is not None:
            return np.asarray(self.hess(x), dtype=float)
        if self.grad is not None:
            H = fd_jacobian(self.grad, x)
            return 0.5 * (H + np.swapaxes(H, -1, -2))
        return fd_hessian(self.value, x)


@dataclass(frozen=True)
class SystemSpec:
    """Reversible diffusion ``dx = (-a grad V + div(a)/beta) ds + sqrt(2/beta) sigma dw``
    together with a reaction coordinate ``xi : R^n -> R^m``.

    Missing derivative callbacks (``potential_grad``, ``mobility_div``,
    ``xi_jac``, ``xi_hess``) are replaced by central finite differences.
    At least one of ``sigma`` and ``mobility`` must be given; if only
    ``mobility`` is given, ``sigma`` is its Cholesky factor.
    """

    n: int
    m: int
    beta: float
    potential: Field
    xi: Field
    potential_grad: Optional[Field] = None
    sigma: Optional[Field] = None
    mobility: Optional[Field] = None
    mobility_div: Optional[Field] = None
    xi_jac: Optional[Field] = None
    xi_hess: Optional[Field] = None
    c1: float = 0.0
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (isinstance(self.n, (int, np.integer)) and isinstance(self.m, (int, np.integer))):
            raise ConfigurationError("n and m must be integers")
        if not 1 <= self.m < self.n:
            raise ConfigurationError(f"need 1 <= m < n, got m={self.m}, n={self.n}")
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ConfigurationError("beta must be positive")
        if self.sigma is None and self.mobility is None:
            raise ConfigurationError("supply a sigma or a mobility callback")
        if self.c1 < 0:
            raise ConfigurationError("ellipticity floor c1 must be nonnegative")

    # -- shape helpers ------------------------------------------------------
    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.n,):
            raise ConfigurationError(f"expected points with last axis {self.n}, got shape {x.shape}")
        return x

    @staticmethod
    def _shaped(value, batch, tail, what):
        value = np.asarray(value, dtype=float)
        try:
            return np.broadcast_to(value, batch + tail)
        except ValueError:
            raise ConfigurationError(
                f"{what} callback returned shape {value.shape}, expected {batch + tail}"
            ) from None

    # -- potential ------------------------------------------------------------
    def V(self, x):
        x = self._check(x)
        return self._shaped(self.potential(x), x.shape[:-1], (), "potential")

    def grad_V(self, x):
        x = self._check(x)
        if self.potential_grad is not None:
            g = self.potential_grad(x)
        else:
            g = fd_jacobian(self.V, x)
        return self._shaped(g, x.shape[:-1], (self.n,), "potential_grad")

    # -- diffusion ------------------------------------------------------------
    def a(self, x):
        x = self._check(x)
        batch = x.shape[:-1]
        if self.mobility is not None:
            return self._shaped(self.mobility(x), batch, (self.n, self.n), "mobility")
        s = self.sigma_matrix(x)
        return s @ np.swapaxes(s, -1, -2)

    def sigma_matrix(self, x):
        x = self._check(x)
        batch = x.shape[:-1]
        if self.sigma is not None:
            s = np.asarray(self.sigma(x), dtype=float)
            if s.ndim < 2 or s.shape[-2] != self.n:
                raise ConfigurationError(f"sigma callback returned shape {s.shape}")
            return np.broadcast_to(s, batch + s.shape[-2:])
        return np.linalg.cholesky(self.a(x))

    @property
    def noise_dim(self):
        """Dimension n' of the driving Brownian motion."""
        if self.sigma is None:
            return self.n
        probe = np.zeros(self.n)
        return int(np.asarray(self.sigma(probe)).shape[-1])

    def div_a(self, x):
        x = self._check(x)
        batch = x.shape[:-1]
        if self.mobility_div is not None:
            return self._shaped(self.mobility_div(x), batch, (self.n,), "mobility_div")
        D = fd_jacobian(self.a, x)  # (..., n, n, n): d a_ij / d x_k
        return np.trace(D, axis1=-2, axis2=-1)

    def drift(self, x):
        """``-a grad V + div(a) / beta``."""
        a = self.a(x)
        return -np.einsum("...ij,...j->...i", a, self.grad_V(x)) + self.div_a(x) / self.beta

    # -- reaction coordinate --------------------------------------------------
    def xi_value(self, x):
        x = self._check(x)
        return self._shaped(self.xi(x), x.shape[:-1], (self.m,), "xi")

    def jac(self, x):
        x = self._check(x)
        J = self.xi_jac(x) if self.xi_jac is not None else fd_jacobian(self.xi_value, x)
        return self._shaped(J, x.shape[:-1], (self.m, self.n), "xi_jac")

    def hess(self, x):
        """Hessians of all components, shape (..., m, n, n)."""
        x = self._check(x)
        if self.xi_hess is not None:
            H = self.xi_hess(x)
        elif self.xi_jac is not None:
            H = fd_jacobian(self.jac, x)
            H = 0.5 * (H + np.swapaxes(H, -1, -2))
        else:
            H = fd_hessian(self.xi_value, x)
        return self._shaped(H, x.shape[:-1], (self.m, self.n, self.n), "xi_hess")

    # -- validation -----------------------------------------------------------
    def validate(self, points, rtol=1e-12):
        """Check the standing assumptions at the given sample points.

        Raises :class:`ConfigurationError` when ``a`` is not symmetric, falls
        below the ellipticity floor ``c1``, disagrees with ``sigma sigma^T``,
        or when ``grad xi`` is rank deficient.
        """
        x = self._check(np.atleast_2d(points))
        a = self.a(x)
        scale = np.linalg.norm(a, axis=(-2, -1))
        if np.any(np.linalg.norm(a - np.swapaxes(a, -1, -2), axis=(-2, -1)) > 1e-12 * scale):
            raise ConfigurationError("mobility is not symmetric")
        lam = np.linalg.eigvalsh(a)[..., 0]
        if np.any(lam <= 0) or np.any(lam < self.c1 * (1 - 1e-12)):
            raise ConfigurationError(f"mobility violates ellipticity floor c1={self.c1}: min eig {lam.min():.3g}")
        if self.sigma is not None and self.mobility is not None:
            s = np.broadcast_to(np.asarray(self.sigma(x), float), x.shape[:-1] + (self.n, self.noise_dim))
            err = np.linalg.norm(a - s @ np.swapaxes(s, -1, -2), axis=(-2, -1))
            if np.any(err > rtol * scale):
                raise ConfigurationError("mobility differs from sigma sigma^T")
        J = self.jac(x)
        sv = np.linalg.svd(J, compute_uv=False)
        if np.any(sv[..., -1] <= 1e-12 * np.maximum(1.0, sv[..., 0])):
            raise ConfigurationError("grad xi is rank deficient at a sampled point")


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def _generator(spec, x, grad, hess):
    a = spec.a(x)
    drift = -np.einsum("...ij,...j->...i", a, spec.grad_V(x)) + spec.div_a(x) / spec.beta
    first = np.einsum("...i,...i->...", drift, grad)
    second = np.einsum("...ij,...ij->...", a, hess)
    return first + second / spec.beta


def apply_generator(spec: SystemSpec, f: ScalarField, x):
    """Evaluate ``(L f)(x) = -a grad V . grad f + div(a) . grad f / beta + a : hess f / beta``."""
    x = spec._check(x)
    grad = f.gradient(x)
    hess = f.hessian(x)
    batch = x.shape[:-1]
    if grad.shape != batch + (spec.n,) or hess.shape != batch + (spec.n, spec.n):
        raise ConfigurationError(
            f"test-function derivatives have shapes {grad.shape}, {hess.shape}; expected n={spec.n}"
        )
    return _generator(spec, x, grad, hess)


def generator_xi(spec: SystemSpec, x):
    """``L xi_l`` for every component, shape (..., m)."""
    x = spec._check(x)
    a = spec.a(x)
    drift = -np.einsum("...ij,...j->...i", a, spec.grad_V(x)) + spec.div_a(x) / spec.beta
    J = spec.jac(x)
    H = spec.hess(x)
    return np.einsum("...li,...i->...l", J, drift) + np.einsum("...ij,...lij->...l", a, H) / spec.beta
