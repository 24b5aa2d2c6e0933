"""The four coupled Riccati flows behind the equilibrium gains.

``P`` (backward) and ``Sigma`` (forward) are standalone.  ``Pdag`` (backward)
and ``Xi`` (forward) are coupled through ``Xi_11`` and the error-system matrix
``F(Pdag, Sigma)``; they are solved by damped Picard sweeps over the whole
interval.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentedSystem, check_noise_blocks, check_system_blocks
from .errors import FixedPointError
from .integrators import Coef, MatrixPath, TimeGrid, midpoints, riccati_sweep

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FixedPointConfig:
    damping: float = 0.5
    tol: float = 1e-8
    max_iter: int = 200
    raise_on_failure: bool = True


@dataclass
class FixedPointReport:
    iterations: int
    final_delta: float
    tol: float
    deltas: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.final_delta <= self.tol

    def as_dict(self):
        return {"iterations": self.iterations, "final_delta": self.final_delta,
                "tol": self.tol, "converged": self.converged, "deltas": list(self.deltas)}


@dataclass(eq=False)
class RiccatiBundle:
    aug: AugmentedSystem
    grid: TimeGrid
    P: MatrixPath
    Pdag: MatrixPath
    Pddag: MatrixPath
    Sigma: MatrixPath
    Xi: MatrixPath
    Xi11: MatrixPath
    fp_report: FixedPointReport

    @property
    def converged(self) -> bool:
        return self.fp_report.converged

    def paths(self):
        return {"P": self.P, "Pdag": self.Pdag, "Pddag": self.Pddag,
                "Sigma": self.Sigma, "Xi": self.Xi, "Xi11": self.Xi11}


def solve_P(aug: AugmentedSystem, grid: TimeGrid) -> MatrixPath:
    """Backward flow ``P' + A'P + PA + P(S~ + S^)P + Q = 0``, ``P(T) = G``."""
    A = aug.Abold
    values = riccati_sweep(-A.T, -A, -aug.S, -aug.Qbold, aug.Gbold, grid,
                           backward=True, symmetrize=True, what="P Riccati flow")
    return MatrixPath(grid, values)


def solve_Sigma(aug: AugmentedSystem, grid: TimeGrid) -> MatrixPath:
    """Forward filter flow ``Sigma' = A Sigma + Sigma A' - Sigma H'H Sigma + DD'``."""
    A = aug.Abold
    values = riccati_sweep(A, A.T, -aug.H.T @ aug.H, aug.Dbold @ aug.Dbold.T, aug.Sigma0, grid,
                           backward=False, symmetrize=True, what="Sigma filter flow")
    return MatrixPath(grid, values)


def _xi_coefficients(aug: AugmentedSystem, Pdag, Sigma):
    """``(A(t), D(t))`` of the Xi flow rewritten as ``A Xi + Xi A' - Xi H'H Xi + D``."""
    Dcheck, Hcheck = check_noise_blocks(aug)
    F, Gdag, Gddag = check_system_blocks(aug, Pdag, Sigma)
    Acoef = F - Gddag @ Hcheck
    Dcoef = Dcheck @ Dcheck.T + Gdag @ np.swapaxes(Gdag, -1, -2)
    return Acoef, Dcoef


def solve_Xi(aug: AugmentedSystem, Pdag, Sigma, grid: TimeGrid) -> np.ndarray:
    """Forward covariance flow of the follower's estimate of ``col(X_aug, e)``.

    ``Pdag`` and ``Sigma`` are node arrays.  The correlated-noise gain term is
    folded into the linear coefficient, leaving a standard Riccati form.
    """
    _, Hcheck = check_noise_blocks(aug)
    A_n, D_n = _xi_coefficients(aug, Pdag, Sigma)
    A_m, D_m = _xi_coefficients(aug, midpoints(Pdag), midpoints(Sigma))
    return riccati_sweep(
        Coef(A_n, A_m), Coef(np.swapaxes(A_n, -1, -2), np.swapaxes(A_m, -1, -2)),
        -Hcheck.T @ Hcheck, Coef(D_n, D_m), aug.Xi0, grid,
        backward=False, symmetrize=True, what="Xi covariance flow")


def solve_Pdag(aug: AugmentedSystem, P, Pddag, Xi11, grid: TimeGrid) -> np.ndarray:
    """Backward sweep ``Pdag' + A'Pdag + Pdag A + Pdag S~ Pdag + Q + Pddag Xi11 H_F'H_F = 0``.

    ``Pddag`` is held fixed (lagged) so each sweep is an ordinary Riccati flow.
    """
    A = aug.Abold
    HtH = aug.H_F.T @ aug.H_F
    forcing = -(aug.Qbold + np.asarray(Pddag) @ np.asarray(Xi11) @ HtH)
    return riccati_sweep(-A.T, -A, -aug.Stilde, Coef(forcing), aug.Gbold, grid,
                         backward=True, symmetrize=False, what="Pdag Riccati flow")


def _sup_frobenius(a, b):
    return float(np.sqrt(((a - b) ** 2).sum(axis=(-2, -1))).max())


def solve_leader_pair(aug: AugmentedSystem, P: MatrixPath, Sigma: MatrixPath, grid: TimeGrid,
                      fp_config: FixedPointConfig | None = None):
    """Damped Picard iteration for the coupled ``(Pdag, Xi)`` pair.

    Each sweep integrates ``Xi`` forward with the current damped iterate and
    then ``Pdag`` backward.  The reported delta is the sup-over-nodes Frobenius
    change between successive sweep outputs; the last sweep output is returned.
    """
    cfg = fp_config or FixedPointConfig()
    n2 = aug.Abold.shape[0]
    Pv, Sv = P.values, Sigma.values
    x = Pv.copy()
    prev_out = None
    deltas = []
    delta = np.inf
    out = x
    for it in range(1, cfg.max_iter + 1):
        Xi = solve_Xi(aug, x, Sv, grid)
        out = solve_Pdag(aug, Pv, Pv - x, Xi[:, :n2, :n2], grid)
        if prev_out is not None:
            delta = _sup_frobenius(out, prev_out)
            deltas.append(delta)
            log.debug("Picard sweep %d: delta=%.3e", it, delta)
            if delta <= cfg.tol:
                break
        prev_out = out
        x = cfg.damping * out + (1.0 - cfg.damping) * x
    report = FixedPointReport(iterations=it, final_delta=float(delta), tol=cfg.tol, deltas=deltas)
    Xi = solve_Xi(aug, out, Sv, grid)
    if not report.converged and cfg.raise_on_failure:
        raise FixedPointError(
            f"Pdag/Xi iteration did not converge in {cfg.max_iter} sweeps "
            f"(final delta {report.final_delta:.3e}); try a smaller damping", report=report)
    return MatrixPath(grid, out), MatrixPath(grid, Xi), report


def solve_riccati(aug: AugmentedSystem, grid: TimeGrid, fp_config: FixedPointConfig | None = None) -> RiccatiBundle:
    P = solve_P(aug, grid)
    Sigma = solve_Sigma(aug, grid)
    Pdag, Xi, report = solve_leader_pair(aug, P, Sigma, grid, fp_config)
    n2 = aug.Abold.shape[0]
    return RiccatiBundle(
        aug=aug, grid=grid, P=P, Pdag=Pdag, Pddag=MatrixPath(grid, P.values - Pdag.values),
        Sigma=Sigma, Xi=Xi, Xi11=Xi.block(slice(0, n2), slice(0, n2)), fp_report=report,
    )


# -- residual checks -----------------------------------------------------------

def central_derivative(values, h, order=4) -> np.ndarray:
    """Finite-difference derivative at interior nodes ``1..N-1``.

    ``order=2`` is the three-point central stencil.  ``order=4`` uses the
    five-point central stencil, with the skewed five-point stencils at the two
    nodes next to the ends (needs ``N >= 4``).
    """
    v = np.asarray(values, dtype=float)
    N = v.shape[0] - 1
    if order == 2 or N < 4:
        return (v[2:] - v[:-2]) / (2.0 * h)
    if order != 4:
        raise ValueError(f"order must be 2 or 4, got {order}")
    d = np.empty_like(v[1:-1])
    d[1:-1] = (v[:-4] - 8.0 * v[1:-3] + 8.0 * v[3:-1] - v[4:]) / (12.0 * h)
    d[0] = (-3.0 * v[0] - 10.0 * v[1] + 18.0 * v[2] - 6.0 * v[3] + v[4]) / (12.0 * h)
    d[-1] = (3.0 * v[-1] + 10.0 * v[-2] - 18.0 * v[-3] + 6.0 * v[-4] - v[-5]) / (12.0 * h)
    return d


def riccati_residual(path: MatrixPath, rhs, grid: TimeGrid, order: int = 4) -> float:
    """Max Frobenius norm of (difference derivative - rhs) over interior nodes."""
    v = path.values
    t = grid.nodes
    deriv = central_derivative(v, grid.h, order)
    worst = 0.0
    for j in range(1, grid.N):
        worst = max(worst, float(np.linalg.norm(deriv[j - 1] - rhs(t[j], v[j]))))
    return worst


def P_rhs(aug: AugmentedSystem):
    A, S, Q = aug.Abold, aug.S, aug.Qbold
    return lambda t, M: -(A.T @ M + M @ A + M @ S @ M + Q)


def Sigma_rhs(aug: AugmentedSystem):
    A, HtH, DD = aug.Abold, aug.H.T @ aug.H, aug.Dbold @ aug.Dbold.T
    return lambda t, M: A @ M + M @ A.T - M @ HtH @ M + DD


def Pdag_rhs(bundle: RiccatiBundle):
    aug, grid = bundle.aug, bundle.grid
    A, St, Q = aug.Abold, aug.Stilde, aug.Qbold
    HtH = aug.H_F.T @ aug.H_F

    def rhs(t, M):
        j = grid.index(t)
        Pddag = bundle.P[j] - M
        return -(A.T @ M + M @ A + M @ St @ M + Q + Pddag @ bundle.Xi11[j] @ HtH)
    return rhs


def Xi_rhs(bundle: RiccatiBundle):
    """Right-hand side of the Xi flow in its original (un-folded) form."""
    aug, grid = bundle.aug, bundle.grid
    Dcheck, Hcheck = check_noise_blocks(aug)
    DD = Dcheck @ Dcheck.T

    def rhs(t, M):
        j = grid.index(t)
        F, Gdag, Gddag = check_system_blocks(aug, bundle.Pdag[j], bundle.Sigma[j])
        gain = M @ Hcheck.T + Gddag
        return F @ M + M @ F.T + DD + Gdag @ Gdag.T + Gddag @ Gddag.T - gain @ gain.T
    return rhs


def residuals(bundle: RiccatiBundle, order: int = 4) -> dict:
    g = bundle.grid
    return {
        "P": riccati_residual(bundle.P, P_rhs(bundle.aug), g, order),
        "Sigma": riccati_residual(bundle.Sigma, Sigma_rhs(bundle.aug), g, order),
        "Pdag": riccati_residual(bundle.Pdag, Pdag_rhs(bundle), g, order),
        "Xi": riccati_residual(bundle.Xi, Xi_rhs(bundle), g, order),
    }
