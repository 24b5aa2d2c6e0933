"""Seeded Monte Carlo of the closed-loop game.

Every path owns a generator seeded by ``SeedSequence(master_seed,
spawn_key=(p,))``; it draws the initial-state normals first and then one
``(N, w + l + m)`` block of increments.  Paths are simulated in fixed-size
chunks (vectorized across the chunk), so results never depend on how chunks
are scheduled across threads.  Chunk statistics are reduced in chunk order.
"""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentedSystem
from .errors import DivergenceError, SimulationError
from .integrators import MatrixPath, TimeGrid
from .io import fmt
from .riccati import RiccatiBundle
from .strategies import GainSchedule

log = logging.getLogger(__name__)

CHUNK = 250
MAX_LAG = 3


# -- randomness ----------------------------------------------------------------

def path_generator(master_seed: int, p: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(master_seed), spawn_key=(int(p),))))


def cov_sqrt(cov) -> np.ndarray:
    """Symmetric square root of a PSD matrix (tiny negative eigenvalues clipped)."""
    vals, vecs = np.linalg.eigh(np.asarray(cov, dtype=float))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def draw_noise(aug: AugmentedSystem, grid: TimeGrid, master_seed: int, paths):
    """Initial states ``(P, n)`` and scaled increments ``(P, N, w + l + m)``."""
    spec = aug.spec
    dims = spec.dims
    width = dims.w + dims.l + dims.m
    root = cov_sqrt(spec.x0_cov)
    paths = list(paths)
    x0 = np.empty((len(paths), dims.n))
    inc = np.empty((len(paths), grid.N, width))
    sq = np.sqrt(grid.h)
    for i, p in enumerate(paths):
        rng = path_generator(master_seed, p)
        x0[i] = spec.x0_mean + root @ rng.standard_normal(dims.n)
        inc[i] = rng.standard_normal((grid.N, width)) * sq
    return x0, inc


def resolve_threads(threads=None) -> int:
    if threads is None:
        threads = os.environ.get("STACKLQG_THREADS", "1")
    try:
        threads = int(threads)
    except ValueError as exc:
        raise ValueError(f"invalid thread count {threads!r}") from exc
    return max(1, threads)


# -- closed-loop data ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ClosedLoop:
    """Per-node matrices of the closed-loop truth, filters and costs."""

    aug: AugmentedSystem
    gains: GainSchedule
    grid: TimeGrid
    M_tilde: np.ndarray  # S~ Pdag, multiplies x_tilde in the truth drift
    M_hat: np.ndarray    # S~ (P - Pdag) + S^ P, multiplies x_hat

    @classmethod
    def build(cls, aug: AugmentedSystem, bundle: RiccatiBundle, gains: GainSchedule) -> "ClosedLoop":
        Mt = aug.Stilde @ bundle.Pdag.values
        Mh = aug.Stilde @ bundle.Pddag.values + aug.Shat @ bundle.P.values
        return cls(aug=aug, gains=gains, grid=bundle.grid, M_tilde=Mt, M_hat=Mh)


def running_cost(X, uF, uL, Q, R_L, R_F):
    """``0.5 (X'QX + uL'R_L uL + uF'R_F uF)`` for batched rows."""
    return 0.5 * (np.einsum("pi,ij,pj->p", X, Q, X) + np.einsum("pi,ij,pj->p", uL, R_L, uL)
                  + np.einsum("pi,ij,pj->p", uF, R_F, uF))


def terminal_cost(X, G):
    return 0.5 * np.einsum("pi,ij,pj->p", X, G, X)


@dataclass
class _Stats:
    """Additive ensemble sums for one chunk (or a reduction of chunks)."""

    count: int
    e_hat: np.ndarray
    ee_hat: np.ndarray
    ee2_hat: np.ndarray
    e_tilde: np.ndarray
    ee_tilde: np.ndarray
    ee2_tilde: np.ndarray
    lag_F: np.ndarray  # (MAX_LAG + 1, m) sums of dI_j dI_{j+lag}
    lag_L: np.ndarray
    pairs: np.ndarray  # number of products per lag

    @classmethod
    def zeros(cls, N, n2, m, ml):
        z = np.zeros
        return cls(0, z((N + 1, n2)), z((N + 1, n2, n2)), z((N + 1, n2, n2)),
                   z((N + 1, n2)), z((N + 1, n2, n2)), z((N + 1, n2, n2)),
                   z((MAX_LAG + 1, m)), z((MAX_LAG + 1, ml)), z(MAX_LAG + 1))

    def add_errors(self, j, e_hat, e_tilde):
        self.e_hat[j] += e_hat.sum(axis=0)
        outer = np.einsum("pi,pj->pij", e_hat, e_hat)
        self.ee_hat[j] += outer.sum(axis=0)
        self.ee2_hat[j] += (outer * outer).sum(axis=0)
        self.e_tilde[j] += e_tilde.sum(axis=0)
        outer = np.einsum("pi,pj->pij", e_tilde, e_tilde)
        self.ee_tilde[j] += outer.sum(axis=0)
        self.ee2_tilde[j] += (outer * outer).sum(axis=0)

    def merge(self, other: "_Stats"):
        self.count += other.count
        for name in ("e_hat", "ee_hat", "ee2_hat", "e_tilde", "ee_tilde", "ee2_tilde",
                     "lag_F", "lag_L", "pairs"):
            getattr(self, name).__iadd__(getattr(other, name))


@dataclass(eq=False)
class BatchResult:
    J_F: np.ndarray
    J_L: np.ndarray
    finite: np.ndarray
    arrays: dict | None = None
    stats: _Stats | None = None


def run_batch(loop: ClosedLoop, x0, inc, record=False, deviation=None, collect_stats=False) -> BatchResult:
    """Simulate a batch of paths from given initial states and increments.

    ``deviation(j, x_hat, x_tilde) -> (du_F, du_L)`` (either may be ``None``)
    perturbs the control processes along the equilibrium filter paths.  When
    given, a shadow physical state driven by the same noise and the perturbed
    controls is integrated, and the costs refer to it; the equilibrium truth,
    observations and filters are unchanged.
    """
    aug, gains, grid = loop.aug, loop.gains, loop.grid
    spec = aug.spec
    n, dims = aug.n, spec.dims
    w, l, m = dims.w, dims.l, dims.m
    N, h = grid.N, grid.h
    P = x0.shape[0]
    n2 = 2 * n

    X = np.zeros((P, n2))
    X[:, :n] = x0
    xh = np.broadcast_to(aug.gamma_mean, (P, n2)).copy()
    xt = xh.copy()
    Xs = x0.copy() if deviation is not None else None

    AT = aug.Abold.T
    DT = aug.Dbold.T
    H1T, H2T = spec.H1.T, spec.H2.T
    HT, HFT = aug.H.T, aug.H_F.T
    A_T, BFT, BLT, D_T = spec.A.T, spec.B_F.T, spec.B_L.T, spec.D.T
    KF, KLt, KLh = gains.K_F.values, gains.K_L_tilde.values, gains.K_L_hat.values
    Ahat, Lhat = gains.A_hat_cl.values, gains.L_hat.values
    Atil, Bcross, Ltil = gains.A_tilde_cl.values, gains.B_tilde_cross.values, gains.L_tilde.values

    weights_F = (spec.Q_F, spec.R_FL, spec.R_FF)
    weights_L = (spec.Q_L, spec.R_LL, spec.R_LF)
    JF = np.zeros(P)
    JL = np.zeros(P)

    if record:
        rec = {
            "X": np.empty((N + 1, P, n2)), "x_hat": np.empty((N + 1, P, n2)),
            "x_tilde": np.empty((N + 1, P, n2)), "u_F": np.empty((N + 1, P, dims.k)),
            "u_L": np.empty((N + 1, P, dims.d)), "dZ1": np.empty((N, P, l)), "dZ2": np.empty((N, P, m)),
        }
        if deviation is not None:
            rec["X_dev"] = np.empty((N + 1, P, n))
    stats = _Stats.zeros(N, n2, m, l + m) if collect_stats else None
    hist_F = []
    hist_L = []

    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(N + 1):
            uF = xh @ KF[j].T
            uL = xt @ KLt[j].T + xh @ KLh[j].T
            if deviation is not None:
                duF, duL = deviation(j, xh, xt)
                if duF is not None:
                    uF = uF + duF
                if duL is not None:
                    uL = uL + duL
                Xc = Xs
            else:
                Xc = X[:, :n]
            wt = h if 0 < j < N else 0.5 * h
            JF += wt * running_cost(Xc, uF, uL, *weights_F)
            JL += wt * running_cost(Xc, uF, uL, *weights_L)
            if record:
                rec["X"][j] = X
                rec["x_hat"][j] = xh
                rec["x_tilde"][j] = xt
                rec["u_F"][j] = uF
                rec["u_L"][j] = uL
                if deviation is not None:
                    rec["X_dev"][j] = Xs
            if stats is not None:
                stats.add_errors(j, X - xh, X - xt)
            if j == N:
                break

            dW = inc[:, j, :w]
            dV1 = inc[:, j, w:w + l]
            dV2 = inc[:, j, w + l:]
            Xp = X[:, :n]
            dZ1 = (Xp @ H1T) * h + dV1
            dZ2 = (Xp @ H2T) * h + dV2
            drift = X @ AT + xt @ loop.M_tilde[j].T + xh @ loop.M_hat[j].T
            noise = dW @ DT

            innov_F = dZ2 - (xh @ HFT) * h
            innov_L = np.concatenate([dZ1, dZ2], axis=1) - (xt @ HT) * h
            xt_new = xt + (xt @ Atil[j].T + xh @ Bcross[j].T) * h + innov_L @ Ltil[j].T
            xh = xh + (xh @ Ahat[j].T) * h + innov_F @ Lhat[j].T
            xt = xt_new
            if deviation is not None:
                Xs = Xs + (Xs @ A_T + uF @ BFT + uL @ BLT) * h + dW @ D_T
            X = X + drift * h + noise
            if record:
                rec["dZ1"][j] = dZ1
                rec["dZ2"][j] = dZ2
            if stats is not None:
                hist_F.insert(0, innov_F)
                hist_L.insert(0, innov_L)
                del hist_F[MAX_LAG + 1:]
                del hist_L[MAX_LAG + 1:]
                for lag in range(len(hist_F)):
                    stats.lag_F[lag] += (hist_F[0] * hist_F[lag]).sum(axis=0)
                    stats.lag_L[lag] += (hist_L[0] * hist_L[lag]).sum(axis=0)
                    stats.pairs[lag] += P

        XT = Xs if deviation is not None else X[:, :n]
        JF += terminal_cost(XT, spec.G_F)
        JL += terminal_cost(XT, spec.G_L)
    finite = np.isfinite(JF) & np.isfinite(JL) & np.isfinite(X).all(axis=1)
    if stats is not None:
        stats.count = P
    arrays = None
    if record:
        arrays = {k: np.swapaxes(v, 0, 1) for k, v in rec.items()}
    return BatchResult(J_F=JF, J_L=JL, finite=finite, arrays=arrays, stats=stats)


# -- single paths -------------------------------------------------------------

@dataclass(eq=False)
class Trajectory:
    grid: TimeGrid
    X: np.ndarray        # (N+1, n)
    Y: np.ndarray        # (N+1, n)
    x_hat: np.ndarray    # (N+1, 2n)
    x_tilde: np.ndarray  # (N+1, 2n)
    u_F: np.ndarray      # (N+1, k)
    u_L: np.ndarray      # (N+1, d)
    dZ1: np.ndarray      # (N, l)
    dZ2: np.ndarray      # (N, m)
    seed: tuple

    @property
    def Z1(self):
        return np.vstack([np.zeros((1, self.dZ1.shape[1])), np.cumsum(self.dZ1, axis=0)])

    @property
    def Z2(self):
        return np.vstack([np.zeros((1, self.dZ2.shape[1])), np.cumsum(self.dZ2, axis=0)])

    @property
    def state(self):
        """Augmented truth ``col(X, Y)`` at every node."""
        return np.hstack([self.X, self.Y])

    def to_csv(self, filename):
        n = self.X.shape[1]
        k, d = self.u_F.shape[1], self.u_L.shape[1]
        header = (["t"] + [f"X_{i + 1}" for i in range(n)] + [f"Y_{i + 1}" for i in range(n)]
                  + [f"xhat_{i + 1}" for i in range(2 * n)] + [f"xtilde_{i + 1}" for i in range(2 * n)]
                  + [f"uF_{i + 1}" for i in range(k)] + [f"uL_{i + 1}" for i in range(d)])
        t = self.grid.nodes
        with open(filename, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            for j in range(self.grid.N + 1):
                row = np.concatenate([self.X[j], self.Y[j], self.x_hat[j], self.x_tilde[j],
                                      self.u_F[j], self.u_L[j]])
                wr.writerow([fmt(t[j])] + [fmt(v) for v in row])


def _trajectory(arrays, p, grid, n, seed):
    X = arrays["X"][p]
    return Trajectory(grid=grid, X=X[:, :n].copy(), Y=X[:, n:].copy(), x_hat=arrays["x_hat"][p],
                      x_tilde=arrays["x_tilde"][p], u_F=arrays["u_F"][p], u_L=arrays["u_L"][p],
                      dZ1=arrays["dZ1"][p], dZ2=arrays["dZ2"][p], seed=seed)


def simulate_path(spec, aug: AugmentedSystem, bundle: RiccatiBundle, gains: GainSchedule,
                  grid: TimeGrid, path_seed=0) -> Trajectory:
    """One closed-loop sample path.

    ``path_seed`` is a master seed (path index 0) or a ``(master_seed, p)`` pair,
    so path ``p`` of :func:`monte_carlo` can be reproduced on its own.
    """
    del spec  # carried by ``aug``; kept for a uniform call signature
    master, p = path_seed if isinstance(path_seed, tuple) else (path_seed, 0)
    loop = ClosedLoop.build(aug, bundle, gains)
    x0, inc = draw_noise(aug, grid, master, [p])
    res = run_batch(loop, x0, inc, record=True)
    if not res.finite[0]:
        bad = _first_bad_node(res.arrays["X"][0])
        raise DivergenceError(f"path {p} diverged at node {bad}", node=bad,
                              time=float(grid.nodes[bad]) if bad is not None else None)
    return _trajectory(res.arrays, 0, grid, aug.n, (master, p))


def _first_bad_node(X):
    bad = np.nonzero(~np.isfinite(X).all(axis=-1))[0]
    return int(bad[0]) if bad.size else None


def evaluate_costs(traj: Trajectory, spec) -> tuple:
    """Trapezoid running cost plus terminal cost on the physical state."""
    grid = traj.grid
    w = np.full(grid.N + 1, grid.h)
    w[0] = w[-1] = 0.5 * grid.h
    out = []
    for Q, R_L, R_F, G in ((spec.Q_F, spec.R_FL, spec.R_FF, spec.G_F),
                           (spec.Q_L, spec.R_LL, spec.R_LF, spec.G_L)):
        run = running_cost(traj.X, traj.u_F, traj.u_L, Q, R_L, R_F)
        out.append(float(w @ run + terminal_cost(traj.X[-1:], G)[0]))
    return tuple(out)


# -- ensembles ----------------------------------------------------------------

@dataclass(eq=False)
class FilterDiagnostics:
    err_cov_hat: MatrixPath
    err_cov_tilde: MatrixPath
    err_cov_hat_se: np.ndarray
    err_cov_tilde_se: np.ndarray
    err_mean_hat: np.ndarray
    err_mean_hat_se: np.ndarray
    innovation_autocorr: dict
    M: int
    N: int

    @property
    def whiteness_band(self) -> float:
        return 3.0 / np.sqrt(self.M * self.N)

    def as_dict(self, checkpoints=None):
        g = self.err_cov_hat.grid
        idx = checkpoints if checkpoints is not None else [0, g.N // 4, g.N // 2, g.N]
        return {
            "checkpoints": [float(g.nodes[j]) for j in idx],
            "err_cov_hat": [self.err_cov_hat[j].tolist() for j in idx],
            "err_cov_hat_se": [self.err_cov_hat_se[j].tolist() for j in idx],
            "err_cov_tilde": [self.err_cov_tilde[j].tolist() for j in idx],
            "innovation_autocorr": {k: v.tolist() for k, v in self.innovation_autocorr.items()},
            "whiteness_band": self.whiteness_band,
        }


@dataclass(eq=False)
class CostReport:
    J_F_mean: float
    J_L_mean: float
    J_F_se: float | None
    J_L_se: float | None
    M: int
    filter_stats: FilterDiagnostics | None = None
    J_F_paths: np.ndarray = field(default=None, repr=False)
    J_L_paths: np.ndarray = field(default=None, repr=False)

    def as_dict(self):
        out = {"M": self.M, "J_F_mean": self.J_F_mean, "J_L_mean": self.J_L_mean,
               "J_F_se": self.J_F_se, "J_L_se": self.J_L_se}
        if self.filter_stats is not None:
            out["filter_diagnostics"] = self.filter_stats.as_dict()
        return out


def mean_se(values):
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    if values.size < 2:
        return mean, None
    return mean, float(values.std(ddof=1) / np.sqrt(values.size))


def _chunks(M, chunk=CHUNK):
    return [range(s, min(s + chunk, M)) for s in range(0, M, chunk)]


def map_chunks(fn, M, threads=None, bit_exact=True, chunk=CHUNK):
    """Apply ``fn(path_range)`` to fixed chunks; results in chunk order.

    With ``bit_exact=False`` results are returned in completion order, which
    only matters to callers that reduce non-associatively.
    """
    chunks = _chunks(M, chunk)
    threads = resolve_threads(threads)
    if threads == 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, c) for c in chunks]
        if bit_exact:
            return [f.result() for f in futures]
        from concurrent.futures import as_completed
        return [f.result() for f in as_completed(futures)]


def _diagnostics(stats: _Stats, grid: TimeGrid) -> FilterDiagnostics:
    M = stats.count

    def cov(s, ss, ss2):
        mean = s / M
        second = ss / M
        C = second - np.einsum("ti,tj->tij", mean, mean)
        C = 0.5 * (C + np.swapaxes(C, 1, 2))
        var = np.clip(ss2 / M - second ** 2, 0.0, None)
        return C, np.sqrt(var / max(M - 1, 1)), mean

    C_hat, se_hat, mean_hat = cov(stats.e_hat, stats.ee_hat, stats.ee2_hat)
    C_til, se_til, _ = cov(stats.e_tilde, stats.ee_tilde, stats.ee2_tilde)
    var_e = np.clip(np.einsum("tii->ti", C_hat), 0.0, None)
    auto = {}
    for name, lag in (("follower", stats.lag_F), ("leader", stats.lag_L)):
        with np.errstate(invalid="ignore", divide="ignore"):
            norm = (lag[1:] / stats.pairs[1:, None]) / (lag[0] / stats.pairs[0])
        auto[name] = np.nan_to_num(norm)
    return FilterDiagnostics(
        err_cov_hat=MatrixPath(grid, C_hat), err_cov_tilde=MatrixPath(grid, C_til),
        err_cov_hat_se=se_hat, err_cov_tilde_se=se_til, err_mean_hat=mean_hat,
        err_mean_hat_se=np.sqrt(var_e / max(M, 1)), innovation_autocorr=auto, M=M, N=grid.N,
    )


def monte_carlo(spec, aug: AugmentedSystem, bundle: RiccatiBundle, gains: GainSchedule, grid: TimeGrid,
                M: int, master_seed: int = 0, threads=None, bit_exact=True, diagnostics=True,
                deviation=None) -> CostReport:
    """Ensemble costs (and filter diagnostics) over ``M`` seeded paths."""
    del spec
    if M < 1:
        raise ValueError(f"need at least one path, got M={M}")
    loop = ClosedLoop.build(aug, bundle, gains)

    def work(rng_paths):
        x0, inc = draw_noise(aug, grid, master_seed, rng_paths)
        res = run_batch(loop, x0, inc, deviation=deviation, collect_stats=diagnostics)
        return rng_paths, res

    results = map_chunks(work, M, threads, bit_exact=bit_exact)
    # statistics are merged in the order received: chunk order in bit-exact
    # mode, so the reduction is identical whatever the thread count
    merge_order = list(results)
    results.sort(key=lambda r: r[0].start)
    JF = np.concatenate([r.J_F for _, r in results])
    JL = np.concatenate([r.J_L for _, r in results])
    finite = np.concatenate([r.finite for _, r in results])
    if not finite.all():
        failed = [int(p) for p in np.nonzero(~finite)[0]]
        raise SimulationError(
            f"{len(failed)} of {M} paths diverged (first seeds: "
            f"{[(master_seed, p) for p in failed[:5]]})", failed_paths=failed)
    stats = None
    if diagnostics:
        total = None
        for _, r in merge_order:
            if total is None:
                total = r.stats
            else:
                total.merge(r.stats)
        total.count = M
        stats = _diagnostics(total, grid)
    jf, jf_se = mean_se(JF)
    jl, jl_se = mean_se(JL)
    return CostReport(J_F_mean=jf, J_L_mean=jl, J_F_se=jf_se, J_L_se=jl_se, M=M,
                      filter_stats=stats, J_F_paths=JF, J_L_paths=JL)
