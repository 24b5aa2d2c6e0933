"""Stacked (state, adjoint-of-adjoint) operators of the leader's FB system.

The augmented state is ``col(X, Y)`` (size 2n) where ``Y`` is the leader's
adjoint of the follower's costate.  The filter-error system used for the
follower's covariance lives in 4n dimensions: ``col(X_aug, e)`` with ``e`` the
leader's estimation error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import GridError, InversionError
from .integrators import MatrixPath
from .problem import ProblemSpec

COND_LIMIT = 1e12


def spd_inverse(M, name="matrix"):
    """Inverse of a symmetric positive definite matrix via Cholesky."""
    M = np.asarray(M, dtype=float)
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise InversionError(f"{name} is numerically singular (condition number {cond:.3g})")
    try:
        factor = linalg.cho_factor(M)
    except linalg.LinAlgError as exc:
        raise InversionError(f"{name} is not positive definite") from exc
    inv = linalg.cho_solve(factor, np.eye(M.shape[0]))
    return 0.5 * (inv + inv.T)


@dataclass(frozen=True, eq=False)
class AugmentedSystem:
    spec: ProblemSpec
    Abold: np.ndarray
    Stilde: np.ndarray
    Shat: np.ndarray
    Qbold: np.ndarray
    Gbold: np.ndarray
    Dbold: np.ndarray
    H: np.ndarray
    H_L: np.ndarray
    H_F: np.ndarray
    gamma_mean: np.ndarray
    Sigma0: np.ndarray
    Xi0: np.ndarray
    R_FF_inv: np.ndarray
    R_LL_inv: np.ndarray

    @property
    def n(self):
        return self.spec.dims.n

    @property
    def S(self):
        """``Stilde + Shat``, the coupling of the full Riccati flow."""
        return self.Stilde + self.Shat


def augment(spec: ProblemSpec) -> AugmentedSystem:
    n = spec.dims.n
    R_FF_inv = spd_inverse(spec.R_FF, "R_FF")
    R_LL_inv = spd_inverse(spec.R_LL, "R_LL")
    Z = np.zeros((n, n))

    S_L = spec.B_L @ R_LL_inv @ spec.B_L.T
    S_F = spec.B_F @ R_FF_inv @ spec.B_F.T
    S_FLF = spec.B_F @ R_FF_inv @ spec.R_LF @ R_FF_inv @ spec.B_F.T

    Abold = np.block([[spec.A, Z], [Z, spec.A]])
    Stilde = np.block([[-S_L, Z], [Z, Z]])
    Shat = np.block([[Z, -S_F], [-S_F, S_FLF]])
    Qbold = np.block([[spec.Q_L, spec.Q_F], [spec.Q_F, Z]])
    Gbold = np.block([[spec.G_L, spec.G_F], [spec.G_F, Z]])
    Dbold = np.vstack([spec.D, np.zeros_like(spec.D)])
    H_L = np.hstack([spec.H1, np.zeros_like(spec.H1)])
    H_F = np.hstack([spec.H2, np.zeros_like(spec.H2)])
    H = np.vstack([H_L, H_F])
    gamma_mean = np.concatenate([spec.x0_mean, np.zeros(n)])
    Sigma0 = np.block([[spec.x0_cov, Z], [Z, Z]])
    Xi0 = np.block([[Sigma0, Sigma0], [Sigma0, Sigma0]])

    return AugmentedSystem(
        spec=spec, Abold=Abold, Stilde=Stilde, Shat=Shat, Qbold=Qbold, Gbold=Gbold,
        Dbold=Dbold, H=H, H_L=H_L, H_F=H_F, gamma_mean=gamma_mean, Sigma0=Sigma0,
        Xi0=Xi0, R_FF_inv=R_FF_inv, R_LL_inv=R_LL_inv,
    )


@dataclass(frozen=True, eq=False)
class CheckSystemPath:
    """Time-gridded blocks of the 4n-dimensional error system."""

    F: MatrixPath
    Dcheck: np.ndarray
    Gdag: MatrixPath
    Gddag: MatrixPath
    Hcheck_F: np.ndarray


def check_system_blocks(aug: AugmentedSystem, Pdag, Sigma):
    """Node arrays ``(F, Gdag, Gddag)`` for stacked ``Pdag``/``Sigma`` arrays.

    Works on any leading batch shape, so it is also used for RK4 midpoints.
    """
    Pdag = np.asarray(Pdag)
    Sigma = np.asarray(Sigma)
    n2 = aug.Abold.shape[0]
    batch = Pdag.shape[:-2]
    StP = aug.Stilde @ Pdag
    F = np.zeros(batch + (2 * n2, 2 * n2))
    F[..., :n2, :n2] = aug.Abold + StP
    F[..., :n2, n2:] = -StP
    F[..., n2:, n2:] = aug.Abold - Sigma @ (aug.H.T @ aug.H)
    l = aug.H_L.shape[0]
    m = aug.H_F.shape[0]
    Gdag = np.zeros(batch + (2 * n2, l))
    Gdag[..., n2:, :] = -Sigma @ aug.H_L.T
    Gddag = np.zeros(batch + (2 * n2, m))
    Gddag[..., n2:, :] = -Sigma @ aug.H_F.T
    return F, Gdag, Gddag


def check_noise_blocks(aug: AugmentedSystem):
    """Constant ``(Dcheck, Hcheck_F)``."""
    n2 = aug.Abold.shape[0]
    Dcheck = np.vstack([aug.Dbold, aug.Dbold])
    Hcheck_F = np.hstack([aug.H_F, np.zeros((aug.H_F.shape[0], n2))])
    return Dcheck, Hcheck_F


def build_check_system(aug: AugmentedSystem, Pdag: MatrixPath, Sigma: MatrixPath) -> CheckSystemPath:
    if Pdag.grid != Sigma.grid:
        raise GridError("Pdag and Sigma live on different grids")
    F, Gdag, Gddag = check_system_blocks(aug, Pdag.values, Sigma.values)
    Dcheck, Hcheck_F = check_noise_blocks(aug)
    grid = Pdag.grid
    return CheckSystemPath(
        F=MatrixPath(grid, F), Dcheck=Dcheck, Gdag=MatrixPath(grid, Gdag),
        Gddag=MatrixPath(grid, Gddag), Hcheck_F=Hcheck_F,
    )
