"""Level-set linear algebra: Phi, its SPD square root A, the skew projector Pi,
and the integrability residual of the mobility-weighted normal fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCoordinateError, InputError, NearSingularError
from .model import SystemSpec, fd_jacobian

EIG_FLOOR = 1e-12


def spd_sqrt(M, floor=EIG_FLOOR, clamp=False):
    """Symmetric positive definite square root by eigendecomposition.

    Parameters
    ----------
    M : array_like, shape (..., k, k)
        Symmetric positive definite matrices.
    floor : float
        Smallest admissible eigenvalue.
    clamp : bool
        If true, eigenvalues below ``floor`` are raised to it instead of
        raising :class:`NearSingularError`.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise InputError(f"expected square matrices, got shape {M.shape}")
    asym = np.linalg.norm(M - np.swapaxes(M, -1, -2), axis=(-2, -1))
    if np.any(asym > 1e-9 * np.linalg.norm(M, axis=(-2, -1))):
        raise InputError("matrix is not symmetric")
    if M.shape[-1] == 1:
        w = M[..., 0, 0]
        if clamp:
            w = np.maximum(w, floor)
        elif np.any(w < floor):
            raise NearSingularError(f"eigenvalue {np.min(w):.3g} below floor {floor:g}")
        return np.sqrt(w)[..., None, None]
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    w, U = np.linalg.eigh(M)
    if clamp:
        w = np.maximum(w, floor)
    elif np.any(w < floor):
        raise NearSingularError(f"eigenvalue {np.min(w):.3g} below floor {floor:g}")
    X = (U * np.sqrt(w)[..., None, :]) @ np.swapaxes(U, -1, -2)
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def spd_inv_sqrt(M, floor=EIG_FLOOR):
    """Inverse of :func:`spd_sqrt` (same checks, no clamping)."""
    M = np.asarray(M, dtype=float)
    if M.shape[-1] == 1:
        w = M[..., 0, 0]
        if np.any(w < floor):
            raise NearSingularError(f"eigenvalue {np.min(w):.3g} below floor {floor:g}")
        return (1.0 / np.sqrt(w))[..., None, None]
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    w, U = np.linalg.eigh(M)
    if np.any(w < floor):
        raise NearSingularError(f"eigenvalue {np.min(w):.3g} below floor {floor:g}")
    return (U / np.sqrt(w)[..., None, :]) @ np.swapaxes(U, -1, -2)


def _phi(J, a):
    P = J @ a @ np.swapaxes(J, -1, -2)
    P = 0.5 * (P + np.swapaxes(P, -1, -2))
    lam = np.linalg.eigvalsh(P)[..., 0] if P.shape[-1] > 1 else P[..., 0, 0]
    if np.any(lam <= EIG_FLOOR):
        raise DegenerateCoordinateError(
            f"grad xi a grad xi^T has eigenvalue {np.min(lam):.3g}; reaction coordinate degenerate"
        )
    return P


def phi_matrix(spec: SystemSpec, x):
    """``Phi = grad xi  a  grad xi^T``, shape (..., m, m)."""
    return _phi(spec.jac(x), spec.a(x))


def _pi(J, a, Phi):
    n = J.shape[-1]
    G = np.linalg.solve(Phi, J @ a)  # Phi^{-1} grad xi a, shape (..., m, n)
    return np.eye(n) - np.swapaxes(J, -1, -2) @ G


def projection_pi(spec: SystemSpec, x):
    """Skew projector ``Pi = I - sum_ij (Phi^{-1})_ij grad xi_i (x) a grad xi_j``."""
    J = spec.jac(x)
    a = spec.a(x)
    return _pi(J, a, _phi(J, a))


def tangent_projector(spec: SystemSpec, x):
    """Orthogonal projector onto the tangent space of the level set through ``x``."""
    J = spec.jac(x)
    n = J.shape[-1]
    G = np.linalg.solve(J @ np.swapaxes(J, -1, -2), J)
    return np.eye(n) - np.swapaxes(J, -1, -2) @ G


@dataclass(frozen=True)
class LevelSetFrame:
    x: np.ndarray
    phi_mat: np.ndarray
    A: np.ndarray
    Pi: np.ndarray
    grad_xi: np.ndarray


def level_set_frame(spec: SystemSpec, x) -> LevelSetFrame:
    x = np.asarray(x, dtype=float)
    J = spec.jac(x)
    a = spec.a(x)
    Phi = _phi(J, a)
    return LevelSetFrame(x=x, phi_mat=Phi, A=spd_sqrt(Phi), Pi=_pi(J, a, Phi), grad_xi=J)


@dataclass(frozen=True)
class FrobeniusResult:
    B: np.ndarray  # (..., m, m, n)
    residual: np.ndarray  # (...,)


def frobenius_obstruction(spec: SystemSpec, x) -> FrobeniusResult:
    """Commutator vectors ``B_ij`` of the fields ``a grad xi_i`` and the size of
    their component outside ``span{a grad xi_k}``, measured as ``|Pi^T B_ij|``.

    A vanishing residual around ``x`` is the condition for a local complement
    coordinate ``phi`` with ``grad xi a grad phi^T = 0``.
    """
    x = np.asarray(x, dtype=float)

    def fields(p):
        return spec.a(p) @ np.swapaxes(spec.jac(p), -1, -2)  # (..., n, m), column i = a grad xi_i

    u = fields(x)
    Du = fd_jacobian(fields, x)  # (..., n[l'], m[j], n[l])
    T = np.einsum("...pjl,...li->...ijp", Du, u)
    B = T - np.swapaxes(T, -3, -2)
    Pi = projection_pi(spec, x)
    PtB = np.einsum("...lp,...ijl->...ijp", Pi, B)
    res = np.linalg.norm(PtB, axis=-1).max(axis=(-2, -1))
    return FrobeniusResult(B=B, residual=res)
