"""Independent checks of the equilibrium pipeline.

* layer checks: the costate representations ``p^ = P X^`` and
  ``p~ = Pdag X~ + Pddag X^`` recomputed from predictor integrals;
* a dense trapezoidal boundary-value solve of the noise-free system;
* a generic partially observed LQG solver used to compute the follower's
  best response to a fixed leader strategy;
* convex-perturbation stationarity tests and a filter-consistency test.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .augment import AugmentedSystem, spd_inverse
from .errors import DivergenceError, NotConvergedError, ParameterError, StackLQGError
from .integrators import Coef, MatrixPath, TimeGrid, riccati_sweep, transition_path, trapezoid
from .riccati import RiccatiBundle
from .simulation import (ClosedLoop, FilterDiagnostics, draw_noise, map_chunks, mean_se,
                         run_batch, running_cost, terminal_cost)
from .strategies import GainSchedule

log = logging.getLogger(__name__)


def _require_converged(bundle: RiccatiBundle):
    if not bundle.converged:
        raise NotConvergedError("oracle refuses a non-converged Riccati bundle")


def _rel_error(lhs, rhs):
    return float(np.linalg.norm(lhs - rhs) / (1.0 + np.linalg.norm(lhs)))


# -- layer representation checks ---------------------------------------------------

@dataclass
class LayerCheckResult:
    t_index: int
    lhs: np.ndarray
    rhs: np.ndarray
    rel_error: float


def _state_transition(aug: AugmentedSystem, grid: TimeGrid) -> np.ndarray:
    """``Phi(t_i, 0)`` for the constant augmented drift; ``Phi(s, t) = Phi(s - t, 0)``."""
    return transition_path(aug.Abold, grid, 0)


def _costate_integral(aug, grid, t_index, Phi, pred):
    """``Phi'(T,t) G x_T + int_t^T Phi'(s,t) Q x_s ds`` for a predicted path ``x_s``."""
    k = grid.N - t_index
    PhiT = np.swapaxes(Phi[:k + 1], 1, 2)
    integrand = np.einsum("sij,jk,sk->si", PhiT, aug.Qbold, pred)
    terminal = PhiT[k] @ aug.Gbold @ pred[k]
    if k == 0:
        return terminal
    sub = TimeGrid(grid.T - grid.nodes[t_index], k)
    return terminal + trapezoid(integrand, sub)


def inner_layer_check(bundle: RiccatiBundle, aug: AugmentedSystem, grid: TimeGrid, t_index: int,
                      x_hat_sample, _cache=None) -> LayerCheckResult:
    """Compare ``P(t) x`` with the predictor integral along ``A + (S~ + S^) P``."""
    _require_converged(bundle)
    grid.check_index(t_index)
    x = np.asarray(x_hat_sample, dtype=float)
    cache = _cache if _cache is not None else {}
    if "Phi" not in cache:
        cache["Phi"] = _state_transition(aug, grid)
        cache["closed"] = MatrixPath(grid, aug.Abold + aug.S @ bundle.P.values)
    Psi = transition_path(cache["closed"], grid, t_index)
    pred = Psi @ x
    rhs = _costate_integral(aug, grid, t_index, cache["Phi"], pred)
    lhs = bundle.P[t_index] @ x
    return LayerCheckResult(t_index, lhs, rhs, _rel_error(lhs, rhs))


def theta_path(bundle: RiccatiBundle, aug: AugmentedSystem) -> np.ndarray:
    """Drift of the joint (truth, leader estimate, follower estimate) system."""
    n2 = aug.Abold.shape[0]
    P, Pdag, Pddag = bundle.P.values, bundle.Pdag.values, bundle.Pddag.values
    Ups = bundle.Xi11.values
    HtH = aug.H_F.T @ aug.H_F
    cross = aug.Stilde @ Pddag + aug.Shat @ P
    th = np.zeros((P.shape[0], 3 * n2, 3 * n2))
    a, b, c = slice(0, n2), slice(n2, 2 * n2), slice(2 * n2, 3 * n2)
    th[:, a, a] = aug.Abold
    th[:, a, b] = aug.Stilde @ Pdag
    th[:, a, c] = cross
    th[:, b, b] = aug.Abold + aug.Stilde @ Pdag
    th[:, b, c] = cross
    th[:, c, a] = Ups @ HtH
    th[:, c, c] = aug.Abold + aug.S @ P - Ups @ HtH
    return th


def outer_layer_check(bundle: RiccatiBundle, aug: AugmentedSystem, grid: TimeGrid, t_index: int,
                      x_tilde_sample, x_hat_sample, _cache=None) -> LayerCheckResult:
    """Compare ``Pdag x~ + Pddag x^`` with the prediction integral through ``Pi``."""
    _require_converged(bundle)
    grid.check_index(t_index)
    xt = np.asarray(x_tilde_sample, dtype=float)
    xh = np.asarray(x_hat_sample, dtype=float)
    n2 = xt.size
    cache = _cache if _cache is not None else {}
    if "Theta" not in cache:
        cache["Phi"] = _state_transition(aug, grid)
        cache["Theta"] = MatrixPath(grid, theta_path(bundle, aug))
    Pi = transition_path(cache["Theta"], grid, t_index)
    pred = (Pi @ np.concatenate([xt, xt, xh]))[:, n2:2 * n2]
    rhs = _costate_integral(aug, grid, t_index, cache["Phi"], pred)
    lhs = bundle.Pdag[t_index] @ xt + bundle.Pddag[t_index] @ xh
    return LayerCheckResult(t_index, lhs, rhs, _rel_error(lhs, rhs))


def random_layer_probes(bundle, aug, grid, probes=20, seed=0, outer=False):
    """Layer checks at random nodes with standard-normal samples."""
    rng = np.random.default_rng(seed)
    n2 = aug.Abold.shape[0]
    cache = {}
    out = []
    for _ in range(probes):
        j = int(rng.integers(0, grid.N + 1))
        if outer:
            out.append(outer_layer_check(bundle, aug, grid, j, rng.standard_normal(n2),
                                         rng.standard_normal(n2), _cache=cache))
        else:
            out.append(inner_layer_check(bundle, aug, grid, j, rng.standard_normal(n2), _cache=cache))
    return out


# -- deterministic boundary-value oracle -----------------------------------------

@dataclass(eq=False)
class TPBVPSolution:
    grid: TimeGrid
    X: np.ndarray
    Y: np.ndarray
    p_L: np.ndarray
    p_F: np.ndarray
    u_F: np.ndarray
    u_L: np.ndarray
    J_F: float
    J_L: float


def deterministic_tpbvp_oracle(spec, grid: TimeGrid, allow_noise=False) -> TPBVPSolution:
    """Noise-free equilibrium from one sparse linear solve over all nodes.

    Unknowns per node are ``(X, Y, p_L, p_F)`` with

        X'   = A X - S_L p_L - S_F p_F
        Y'   = A Y - S_F p_L + S_FLF p_F
        p_L' = -A' p_L - Q_L X - Q_F Y
        p_F' = -A' p_F - Q_F X

    ``X(0) = x0``, ``Y(0) = 0``, ``p_L(T) = G_L X(T) + G_F Y(T)``,
    ``p_F(T) = G_F X(T)``; trapezoidal rule between nodes.  Built from the raw
    game matrices, independently of the augmented operators.
    """
    if not allow_noise and (np.any(spec.D != 0) or np.any(spec.x0_cov != 0)):
        raise ParameterError("the boundary-value oracle needs D = 0 and x0_cov = 0")
    n = spec.dims.n
    R_FF_inv = spd_inverse(spec.R_FF, "R_FF")
    R_LL_inv = spd_inverse(spec.R_LL, "R_LL")
    S_L = spec.B_L @ R_LL_inv @ spec.B_L.T
    S_F = spec.B_F @ R_FF_inv @ spec.B_F.T
    S_FLF = spec.B_F @ R_FF_inv @ spec.R_LF @ R_FF_inv @ spec.B_F.T
    A, Z = spec.A, np.zeros((n, n))
    M = np.block([
        [A, Z, -S_L, -S_F],
        [Z, A, -S_F, S_FLF],
        [-spec.Q_L, -spec.Q_F, -A.T, Z],
        [-spec.Q_F, Z, Z, -A.T],
    ])
    q = 4 * n
    N, h = grid.N, grid.h
    I = sparse.identity(q, format="csr")
    Ms = sparse.csr_matrix(M)
    left = -I - 0.5 * h * Ms
    right = I - 0.5 * h * Ms
    blocks = sparse.lil_matrix(((N + 1) * q, (N + 1) * q))
    rhs = np.zeros((N + 1) * q)
    for j in range(N):
        r = slice(j * q, (j + 1) * q)
        blocks[r, j * q:(j + 1) * q] = left
        blocks[r, (j + 1) * q:(j + 2) * q] = right
    base = N * q
    # X(0), Y(0)
    blocks[base:base + 2 * n, 0:2 * n] = np.eye(2 * n)
    rhs[base:base + n] = spec.x0_mean
    # terminal costate conditions
    end = N * q
    tc = np.zeros((2 * n, q))
    tc[:n, :n] = -spec.G_L
    tc[:n, n:2 * n] = -spec.G_F
    tc[:n, 2 * n:3 * n] = np.eye(n)
    tc[n:, :n] = -spec.G_F
    tc[n:, 3 * n:] = np.eye(n)
    blocks[base + 2 * n:base + 4 * n, end:end + q] = tc
    mat = blocks.tocsc()
    z = spsolve(mat, rhs).reshape(N + 1, q)
    if not np.all(np.isfinite(z)):
        raise StackLQGError("boundary-value system is singular: the equilibrium is not unique "
                            "or the discretization failed")
    X, Y, pL, pF = z[:, :n], z[:, n:2 * n], z[:, 2 * n:3 * n], z[:, 3 * n:]
    uL = -pL @ (R_LL_inv @ spec.B_L.T).T
    uF = -pF @ (R_FF_inv @ spec.B_F.T).T
    JF = trapezoid(running_cost(X, uF, uL, spec.Q_F, spec.R_FL, spec.R_FF), grid) \
        + terminal_cost(X[-1:], spec.G_F)[0]
    JL = trapezoid(running_cost(X, uF, uL, spec.Q_L, spec.R_LL, spec.R_LF), grid) \
        + terminal_cost(X[-1:], spec.G_L)[0]
    return TPBVPSolution(grid, X, Y, pL, pF, uF, uL, float(JF), float(JL))


# -- generic partially observed LQG -----------------------------------------------

@dataclass(eq=False)
class PartiallyObservedLQG:
    """``ds = (A s + B u) dt + Gamma dnu``, ``dz = C s dt + J dnu`` with ``J J' = I``.

    Cost ``E[ 0.5 int (s'Q s + u'R u) dt + 0.5 s_T' G s_T ]``; initial law
    ``N(m0, S0)``.  Time-varying coefficients are node arrays.
    """

    grid: TimeGrid
    A: np.ndarray      # (N+1, ns, ns)
    B: np.ndarray      # (ns, k)
    Gamma: np.ndarray  # (N+1, ns, q)
    C: np.ndarray      # (m, ns)
    J: np.ndarray      # (m, q)
    Q: np.ndarray      # (N+1, ns, ns)
    R: np.ndarray      # (k, k)
    G: np.ndarray      # (ns, ns)
    m0: np.ndarray
    S0: np.ndarray

    def solve(self) -> "LQGSolution":
        g = self.grid
        R_inv = spd_inverse(self.R, "R")
        BRB = self.B @ R_inv @ self.B.T
        A = self.A
        At = np.swapaxes(A, 1, 2)
        Pi = riccati_sweep(Coef(-At), Coef(-A), BRB, Coef(-self.Q), self.G, g, backward=True,
                           symmetrize=True, what="best-response control Riccati")
        GJ = self.Gamma @ self.J.T
        Af = A - GJ @ self.C
        eye = np.eye(self.J.shape[1])
        Dn = self.Gamma @ (eye - self.J.T @ self.J) @ np.swapaxes(self.Gamma, 1, 2)
        S = riccati_sweep(Coef(Af), Coef(np.swapaxes(Af, 1, 2)), -self.C.T @ self.C, Coef(Dn), self.S0, g,
                          backward=False, symmetrize=True, what="best-response filter Riccati")
        K = S @ self.C.T + GJ
        gain = -R_inv @ self.B.T @ Pi
        GG = self.Gamma @ np.swapaxes(self.Gamma, 1, 2)
        noise = np.einsum("tij,tji->t", Pi, GG)
        est = np.einsum("tij,jk,tkl,tli->t", Pi, BRB, Pi, S)
        value = 0.5 * (self.m0 @ Pi[0] @ self.m0 + np.trace(Pi[0] @ self.S0)) \
            + 0.5 * trapezoid(noise + est, g)
        return LQGSolution(problem=self, Pi=Pi, S=S, K=K, gain=gain, value=float(value))


@dataclass(eq=False)
class LQGSolution:
    problem: PartiallyObservedLQG
    Pi: np.ndarray
    S: np.ndarray
    K: np.ndarray     # filter gain S C' + Gamma J'
    gain: np.ndarray  # u = gain @ s_hat
    value: float


@dataclass(eq=False)
class FollowerResponseModel:
    """The follower's problem against a leader strategy held as a process.

    Joint state ``s = (X*, X~*, X^*, X)``: the equilibrium augmented truth and
    both equilibrium filters (6n, autonomous) plus the physical state actually
    driven by the follower's free control and the leader's control process
    ``u_L = K_L s``.  The follower observes the equilibrium ``Z2``.
    """

    lqg: PartiallyObservedLQG
    K_L: np.ndarray       # (N+1, d, ns) leader control as a function of s
    phys: slice
    hat: slice
    Q_L: np.ndarray       # leader running weight on s, (N+1, ns, ns)
    width: tuple


def follower_response_model(aug: AugmentedSystem, bundle: RiccatiBundle, gains: GainSchedule,
                            equilibrium: GainSchedule | None = None) -> FollowerResponseModel:
    """Assemble the follower's LQG against the leader law carried by ``gains``.

    The equilibrium processes are generated by ``equilibrium`` (defaults to
    the bundle's own gains); only the leader law in ``gains`` may differ.
    """
    spec = aug.spec
    dims = spec.dims
    n, n2 = dims.n, 2 * dims.n
    w, l, m = dims.w, dims.l, dims.m
    grid = bundle.grid
    eq_gains = equilibrium or gains
    loop = ClosedLoop.build(aug, bundle, eq_gains)
    T1 = slice(0, n2)
    T2 = slice(n2, 2 * n2)
    T3 = slice(2 * n2, 3 * n2)
    T4 = slice(3 * n2, 3 * n2 + n)
    ns = 3 * n2 + n
    q = w + l + m
    Np = grid.N + 1
    H = aug.H
    Ltil = eq_gains.L_tilde.values
    Lhat = eq_gains.L_hat.values

    A = np.zeros((Np, ns, ns))
    A[:, T1, T1] = aug.Abold
    A[:, T1, T2] = loop.M_tilde
    A[:, T1, T3] = loop.M_hat
    A[:, T2, T1] = Ltil @ H
    A[:, T2, T2] = eq_gains.A_tilde_cl.values - Ltil @ H
    A[:, T2, T3] = eq_gains.B_tilde_cross.values
    A[:, T3, T1] = Lhat @ aug.H_F
    A[:, T3, T3] = eq_gains.A_hat_cl.values - Lhat @ aug.H_F
    K_L = np.zeros((Np, dims.d, ns))
    K_L[:, :, T2] = gains.K_L_tilde.values
    K_L[:, :, T3] = gains.K_L_hat.values
    A[:, T4, T4] = spec.A
    A[:, T4, :] += spec.B_L @ K_L

    B = np.zeros((ns, dims.k))
    B[T4] = spec.B_F

    Gamma = np.zeros((Np, ns, q))
    Gamma[:, T1, :w] = aug.Dbold
    Gamma[:, T2, w:] = Ltil
    Gamma[:, T3, w + l:] = Lhat
    Gamma[:, T4, :w] = spec.D

    C = np.zeros((m, ns))
    C[:, T1] = aug.H_F
    J = np.zeros((m, q))
    J[:, w + l:] = np.eye(m)

    E = np.zeros((n, ns))
    E[:, T4] = np.eye(n)
    KLt = np.swapaxes(K_L, 1, 2)
    Q_F = E.T @ spec.Q_F @ E + KLt @ spec.R_FL @ K_L
    Q_L = E.T @ spec.Q_L @ E + KLt @ spec.R_LL @ K_L
    G = E.T @ spec.G_F @ E

    # initial law: physical parts of X* and X share the same draw
    m0 = np.zeros(ns)
    m0[T1] = aug.gamma_mean
    m0[T2] = aug.gamma_mean
    m0[T3] = aug.gamma_mean
    m0[T4] = spec.x0_mean
    # x0 enters both copies, so every block of their joint covariance is x0_cov
    sel = np.zeros((ns, n))
    sel[:n] = np.eye(n)
    sel[T4] = np.eye(n)
    S0 = sel @ spec.x0_cov @ sel.T

    lqg = PartiallyObservedLQG(grid=grid, A=A, B=B, Gamma=Gamma, C=C, J=J, Q=Q_F, R=spec.R_FF,
                               G=G, m0=m0, S0=S0)
    return FollowerResponseModel(lqg=lqg, K_L=K_L, phys=T4, hat=T3, Q_L=Q_L, width=(w, l, m))


@dataclass
class BestResponse:
    solution: LQGSolution
    model: FollowerResponseModel
    J_F_value: float
    J_F_achieved: float | None = None
    J_F_se: float | None = None
    J_L_achieved: float | None = None
    J_L_se: float | None = None
    J_F_paths: np.ndarray | None = field(default=None, repr=False)
    J_L_paths: np.ndarray | None = field(default=None, repr=False)
    max_control_gap: float | None = None

    @property
    def gain(self):
        return self.solution.gain


def simulate_response(model: FollowerResponseModel, sol: LQGSolution, aug: AugmentedSystem, x0, inc,
                      K_F=None):
    """Monte Carlo of the joint state under the follower's LQG strategy.

    Returns per-path follower and leader costs (and, optionally, the largest
    gap between the response control and ``K_F X^*`` when ``K_F`` is given).
    """
    spec = aug.spec
    lqg = model.lqg
    grid = lqg.grid
    N, h = grid.N, grid.h
    n, n2 = spec.dims.n, 2 * spec.dims.n
    P = x0.shape[0]
    ns = lqg.A.shape[1]
    s = np.zeros((P, ns))
    s[:, :n] = x0
    s[:, n2:2 * n2] = aug.gamma_mean
    s[:, 2 * n2:3 * n2] = aug.gamma_mean
    s[:, model.phys] = x0
    s_hat = np.broadcast_to(lqg.m0, (P, ns)).copy()
    BT = lqg.B.T
    CT = lqg.C.T
    JT = lqg.J.T
    JF = np.zeros(P)
    JL = np.zeros(P)
    gap = 0.0
    phys = model.phys
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(N + 1):
            uF = s_hat @ sol.gain[j].T
            uL = s @ model.K_L[j].T
            X = s[:, phys]
            wt = h if 0 < j < N else 0.5 * h
            JF += wt * running_cost(X, uF, uL, spec.Q_F, spec.R_FL, spec.R_FF)
            JL += wt * running_cost(X, uF, uL, spec.Q_L, spec.R_LL, spec.R_LF)
            if K_F is not None:
                gap = max(gap, float(np.abs(uF - s[:, model.hat] @ K_F[j].T).max()))
            if j == N:
                break
            dnu = inc[:, j]
            dz = (s @ CT) * h + dnu @ JT
            drift_hat = s_hat @ lqg.A[j].T + uF @ BT
            s = s + (s @ lqg.A[j].T + uF @ BT) * h + dnu @ lqg.Gamma[j].T
            s_hat = s_hat + drift_hat * h + (dz - (s_hat @ CT) * h) @ sol.K[j].T
        X = s[:, phys]
        JF += terminal_cost(X, spec.G_F)
        JL += terminal_cost(X, spec.G_L)
    if not (np.all(np.isfinite(JF)) and np.all(np.isfinite(JL))):
        raise DivergenceError("best-response simulation produced non-finite costs")
    return JF, JL, gap


def best_response_lqg(spec, aug: AugmentedSystem, gains: GainSchedule, grid: TimeGrid,
                      bundle: RiccatiBundle | None = None, M: int = 0, master_seed: int = 0,
                      threads=None, equilibrium: GainSchedule | None = None) -> BestResponse:
    """Follower's optimal response to the leader law in ``gains``.

    Returns the response gain over the joint-state estimate, its exact LQG
    value and (for ``M > 0``) Monte Carlo estimates of both players' costs
    with the same seeding scheme as :func:`~stacklqg.simulation.monte_carlo`.
    """
    del spec
    if bundle is None:
        raise ParameterError("best_response_lqg needs the Riccati bundle of the equilibrium")
    _require_converged(bundle)
    if bundle.grid != grid:
        raise ParameterError("bundle and grid differ")
    model = follower_response_model(aug, bundle, gains, equilibrium)
    sol = model.lqg.solve()
    br = BestResponse(solution=sol, model=model, J_F_value=sol.value)
    if M > 0:
        eq = equilibrium or gains
        KF = eq.K_F.values

        def work(paths):
            x0, inc = draw_noise(aug, grid, master_seed, paths)
            return simulate_response(model, sol, aug, x0, inc, K_F=KF)

        parts = map_chunks(work, M, threads)
        br.J_F_paths = np.concatenate([p[0] for p in parts])
        br.J_L_paths = np.concatenate([p[1] for p in parts])
        br.max_control_gap = max(p[2] for p in parts)
        br.J_F_achieved, br.J_F_se = mean_se(br.J_F_paths)
        br.J_L_achieved, br.J_L_se = mean_se(br.J_L_paths)
    return br


# -- stationarity ---------------------------------------------------------------------

@dataclass
class StationarityReport:
    epsilons: list
    delta_J: list
    delta_se: list
    J0: float
    fitted_quadratic_coeff: float
    fitted_linear_coeff: float
    min_delta: float
    bound_rel: float
    who: str = ""
    direction: str = ""

    def bounds(self):
        return [-(3.0 * se + self.bound_rel * abs(self.J0)) for se in self.delta_se]

    @property
    def passed_bound(self) -> bool:
        return all(d >= b for d, b in zip(self.delta_J, self.bounds()))

    @property
    def scaling_ratio(self):
        """``dJ(eps_0) / dJ(eps_1)`` for the two largest epsilons."""
        if len(self.delta_J) < 2 or self.delta_J[1] == 0:
            return None
        return self.delta_J[0] / self.delta_J[1]

    @property
    def passed(self) -> bool:
        return self.passed_bound and self.fitted_quadratic_coeff > 0

    def as_dict(self):
        return {"who": self.who, "direction": self.direction, "epsilons": list(self.epsilons),
                "delta_J": list(self.delta_J), "delta_se": list(self.delta_se), "J0": self.J0,
                "bounds": self.bounds(), "fitted_quadratic_coeff": self.fitted_quadratic_coeff,
                "fitted_linear_coeff": self.fitted_linear_coeff, "min_delta": self.min_delta,
                "scaling_ratio": self.scaling_ratio, "passed": self.passed}


def _check_epsilons(epsilons):
    eps = [float(e) for e in epsilons]
    if any(e <= 0 for e in eps) or any(a <= b for a, b in zip(eps, eps[1:])):
        raise ParameterError("epsilons must be positive and strictly decreasing")
    return eps


def _fit(eps, dJ):
    e = np.asarray(eps)
    d = np.asarray(dJ)
    c = float((e ** 2 @ d) / (e ** 4).sum())
    lin, quad = np.linalg.lstsq(np.column_stack([e, e ** 2]), d, rcond=None)[0]
    return c, float(lin), float(quad)


def _report(eps, diffs, J0, bound_rel, who, direction):
    dJ, se = [], []
    for d in diffs:
        mu, s = mean_se(d)
        dJ.append(mu)
        se.append(0.0 if s is None else s)
    c, lin, _ = _fit(eps, dJ)
    return StationarityReport(epsilons=eps, delta_J=dJ, delta_se=se, J0=float(J0),
                              fitted_quadratic_coeff=c, fitted_linear_coeff=lin,
                              min_delta=float(min(dJ)), bound_rel=bound_rel, who=who,
                              direction=direction)


def _as_gain_path(direction, shape, Np):
    D = np.asarray(direction, dtype=float)
    if D.ndim == 1:
        D = D.reshape(shape)
    if D.shape == shape:
        D = np.broadcast_to(D, (Np,) + shape)
    if D.shape != (Np,) + shape:
        raise ParameterError(f"direction has shape {D.shape}, expected {shape} or {(Np,) + shape}")
    return D


def follower_stationarity_test(spec, bundle: RiccatiBundle, gains: GainSchedule, grid: TimeGrid,
                               M: int, direction, epsilons=(0.4, 0.2, 0.1, 0.05), master_seed=0,
                               threads=None, bound_rel=5e-3) -> StationarityReport:
    """Convex perturbation ``u_F = u_F* + eps dK_F X^*`` with common random numbers.

    The perturbation is applied to the follower's control process along the
    equilibrium filter path; the leader's control process is unchanged.
    """
    _require_converged(bundle)
    eps = _check_epsilons(epsilons)
    aug = bundle.aug
    dims = aug.spec.dims
    dK = _as_gain_path(direction, (dims.k, 2 * dims.n), grid.N + 1)
    loop = ClosedLoop.build(aug, bundle, gains)

    def work(paths):
        x0, inc = draw_noise(aug, grid, master_seed, paths)
        out = []
        for e in [0.0] + eps:
            dev = (lambda j, xh, xt, e=e: (e * (xh @ dK[j].T), None))
            out.append(run_batch(loop, x0, inc, deviation=dev).J_F)
        return out

    parts = map_chunks(work, M, threads)
    J = [np.concatenate([p[i] for p in parts]) for i in range(len(eps) + 1)]
    return _report(eps, [J[i + 1] - J[0] for i in range(len(eps))], J[0].mean(), bound_rel,
                   "follower", np.array2string(np.asarray(direction)))


def leader_stationarity_test(spec, bundle: RiccatiBundle, gains: GainSchedule, grid: TimeGrid,
                             M: int, direction, epsilons=(0.4, 0.2, 0.1, 0.05), master_seed=0,
                             threads=None, bound_rel=1e-2) -> StationarityReport:
    """Leader perturbation with the follower's best response recomputed for every eps.

    ``direction`` is ``(dK_tilde, dK_hat)``; each is ``None``, a ``d x 2n``
    matrix or a node array.  The perturbed leader control is
    ``u_L* + eps (dK_tilde X~* + dK_hat X^*)``.
    """
    _require_converged(bundle)
    eps = _check_epsilons(epsilons)
    aug = bundle.aug
    dims = aug.spec.dims
    Np = grid.N + 1
    shape = (dims.d, 2 * dims.n)
    d_tilde, d_hat = direction
    dKt = np.zeros((Np,) + shape) if d_tilde is None else _as_gain_path(d_tilde, shape, Np)
    dKh = np.zeros((Np,) + shape) if d_hat is None else _as_gain_path(d_hat, shape, Np)
    sols = []
    for e in [0.0] + eps:
        g_e = gains.with_leader(gains.K_L_tilde.values + e * dKt, gains.K_L_hat.values + e * dKh)
        model = follower_response_model(aug, bundle, g_e, equilibrium=gains)
        sols.append((model, model.lqg.solve()))

    def work(paths):
        x0, inc = draw_noise(aug, grid, master_seed, paths)
        return [simulate_response(model, sol, aug, x0, inc)[1] for model, sol in sols]

    parts = map_chunks(work, M, threads)
    J = [np.concatenate([p[i] for p in parts]) for i in range(len(eps) + 1)]
    label = []
    if d_tilde is not None:
        label.append("tilde")
    if d_hat is not None:
        label.append("hat")
    return _report(eps, [J[i + 1] - J[0] for i in range(len(eps))], J[0].mean(), bound_rel,
                   "leader", "+".join(label))


# -- filter consistency -----------------------------------------------------------------

@dataclass
class FilterConsistencyReport:
    checkpoints: list
    max_excess_hat: float
    max_excess_tilde: float
    rel: float
    details: list

    @property
    def passed(self) -> bool:
        return self.max_excess_hat <= 0.0 and self.max_excess_tilde <= 0.0

    def as_dict(self):
        return {"checkpoints": self.checkpoints, "max_excess_hat": self.max_excess_hat,
                "max_excess_tilde": self.max_excess_tilde, "rel": self.rel,
                "passed": self.passed, "details": self.details}


def filter_consistency_test(diag: FilterDiagnostics, bundle: RiccatiBundle, checkpoints,
                            rel=0.05, n_se=3.0) -> FilterConsistencyReport:
    """Ensemble error covariances against ``Xi_11`` and ``Sigma`` at checkpoints.

    Entry ``(i, j)`` passes when ``|C_ij - ref_ij| <= rel |ref_ij| + n_se SE_ij``
    (plus a round-off floor of ``1e-12 max|ref|``).  Excess is the largest
    violation, non-positive when everything passes.
    """
    if diag.M < 2:
        raise ParameterError("filter consistency needs at least two paths")
    n = bundle.aug.n
    details = []
    worst_hat = -np.inf
    worst_til = -np.inf
    for j in checkpoints:
        ref = bundle.Xi11[j]
        floor = 1e-12 * max(1.0, np.abs(ref).max())
        ex = np.abs(diag.err_cov_hat[j] - ref) - (rel * np.abs(ref) + n_se * diag.err_cov_hat_se[j] + floor)
        ref_t = bundle.Sigma[j][:n, :n]
        est_t = diag.err_cov_tilde[j][:n, :n]
        ex_t = np.abs(est_t - ref_t) - (rel * np.abs(ref_t) + n_se * diag.err_cov_tilde_se[j][:n, :n] + floor)
        worst_hat = max(worst_hat, float(ex.max()))
        worst_til = max(worst_til, float(ex_t.max()))
        details.append({"node": int(j), "err_cov_hat": diag.err_cov_hat[j].tolist(), "Xi11": ref.tolist(),
                        "err_cov_tilde_phys": est_t.tolist(), "Sigma_phys": ref_t.tolist()})
    return FilterConsistencyReport(list(map(int, checkpoints)), worst_hat, worst_til, rel, details)


def innovation_whiteness(diag: FilterDiagnostics, n_band=3.0):
    """Largest normalized lag-1..3 autocorrelation against the ``3/sqrt(MN)`` band."""
    band = n_band / np.sqrt(diag.M * diag.N)
    worst = {k: float(np.abs(v).max()) if v.size else 0.0 for k, v in diag.innovation_autocorr.items()}
    return {"band": band, "max_abs": worst, "passed": all(v <= band for v in worst.values())}
