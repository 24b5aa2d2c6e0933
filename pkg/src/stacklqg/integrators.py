"""Fixed-step integration on one shared uniform grid.

RK4 for deterministic matrix flows, Euler-Maruyama for the stochastic ones,
trapezoid for time integrals.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import DivergenceError, GridError


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise GridError(f"grid needs at least 2 steps, got N={self.N}")
        if not self.T > 0:
            raise GridError(f"horizon must be positive, got T={self.T}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "N", int(self.N))

    @property
    def h(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.N + 1) * self.h
        t[-1] = self.T
        return t

    def index(self, t, atol=1e-12) -> int:
        """Node index of time ``t``; raises if ``t`` is not a node."""
        j = int(round(t / self.h))
        if j < 0 or j > self.N or abs(self.nodes[j] - t) > atol * max(1.0, self.T):
            raise GridError(f"t={t} is not a grid node")
        return j

    def check_index(self, j):
        if not 0 <= j <= self.N:
            raise GridError(f"node index {j} outside 0..{self.N}")
        return j


class MatrixPath:
    """Values of one fixed-shape matrix at every node of a grid."""

    def __init__(self, grid: TimeGrid, values):
        values = np.asarray(values, dtype=float)
        if values.shape[0] != grid.N + 1:
            raise GridError(f"path has {values.shape[0]} nodes, grid has {grid.N + 1}")
        values.setflags(write=False)
        self.grid = grid
        self.values = values

    @property
    def shape(self):
        return self.values.shape[1:]

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, j):
        return self.values[j]

    def at(self, t):
        """Linear interpolation, exact at nodes."""
        g = self.grid
        if t <= 0.0:
            return self.values[0]
        if t >= g.T:
            return self.values[-1]
        x = t / g.h
        j = min(int(np.floor(x)), g.N - 1)
        w = x - j
        if w == 0.0:
            return self.values[j]
        return (1.0 - w) * self.values[j] + w * self.values[j + 1]

    def block(self, rows, cols) -> "MatrixPath":
        return MatrixPath(self.grid, self.values[:, rows, cols])

    def map(self, fn) -> "MatrixPath":
        return MatrixPath(self.grid, fn(self.values))

    def midpoints(self) -> np.ndarray:
        return midpoints(self.values)


def midpoints(values) -> np.ndarray:
    """Cubic (four-node) interpolation of node values at interval midpoints.

    Keeps RK4 stages fourth-order accurate when coefficients are only known on
    the grid.  Falls back to lower order when fewer than four nodes exist.
    """
    v = np.asarray(values, dtype=float)
    n_int = v.shape[0] - 1
    if n_int < 1:
        raise GridError("need at least two nodes")
    if n_int == 1:
        return 0.5 * (v[:1] + v[1:])
    if n_int == 2:
        # quadratic through the three nodes
        left = (3.0 * v[0] + 6.0 * v[1] - v[2]) / 8.0
        right = (-v[0] + 6.0 * v[1] + 3.0 * v[2]) / 8.0
        return np.stack([left, right])
    out = np.empty((n_int,) + v.shape[1:])
    out[1:-1] = (-v[:-3] + 9.0 * v[1:-2] + 9.0 * v[2:-1] - v[3:]) / 16.0
    out[0] = (5.0 * v[0] + 15.0 * v[1] - 5.0 * v[2] + v[3]) / 16.0
    out[-1] = (v[-4] - 5.0 * v[-3] + 15.0 * v[-2] + 5.0 * v[-1]) / 16.0
    return out


class Coef:
    """A Riccati coefficient: either constant or sampled on the grid."""

    __slots__ = ("nodes", "mids")

    def __init__(self, value, mids=None):
        value = np.asarray(value, dtype=float)
        if value.ndim == 2:
            self.nodes = np.ascontiguousarray(value[None])
            self.mids = self.nodes
        else:
            self.nodes = np.ascontiguousarray(value)
            self.mids = np.ascontiguousarray(midpoints(value) if mids is None else mids)


def riccati_sweep(A, B, C, D, boundary, grid: TimeGrid, backward: bool, symmetrize=False,
                  what="matrix flow", kernel=None) -> np.ndarray:
    """RK4 for ``dM/dt = A M + M B + M C M + D`` with :class:`Coef` inputs."""
    kernel = kernel or _backend.riccati_rk4
    coefs = [c if isinstance(c, Coef) else Coef(c) for c in (A, B, C, D)]
    args = []
    for c in coefs:
        args.extend([c.nodes, c.mids])
    M0 = np.ascontiguousarray(boundary, dtype=float)
    if M0.ndim != 2:
        raise ValueError("boundary must be a matrix")
    # constant-only sweeps need the step count from the grid
    if all(c.nodes.shape[0] == 1 for c in coefs):
        args[7] = np.ascontiguousarray(np.broadcast_to(coefs[3].nodes[0], (grid.N,) + coefs[3].nodes.shape[1:]))
    values, bad = kernel(*args, M0, grid.h, bool(backward), bool(symmetrize))
    if bad >= 0:
        raise DivergenceError(f"{what} left the finite range at node {bad} (t={grid.nodes[bad]:.6g})",
                              node=int(bad), time=float(grid.nodes[bad]))
    return values


def integrate_matrix_ode(rhs, boundary, direction, grid: TimeGrid) -> MatrixPath:
    """Classical RK4 for an arbitrary right-hand side ``rhs(t, M)``.

    ``direction`` is ``"forward"`` (``boundary`` at t=0) or ``"backward"``
    (``boundary`` at t=T).
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    h = grid.h
    t = grid.nodes
    M = np.array(boundary, dtype=float)
    out = np.empty((grid.N + 1,) + M.shape)
    if direction == "forward":
        out[0] = M
        for j in range(grid.N):
            t0, tm, t1 = t[j], t[j] + 0.5 * h, t[j + 1]
            k1 = rhs(t0, M)
            k2 = rhs(tm, M + 0.5 * h * k1)
            k3 = rhs(tm, M + 0.5 * h * k2)
            k4 = rhs(t1, M + h * k3)
            M = M + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(M)):
                raise DivergenceError(f"non-finite value at node {j + 1}", node=j + 1, time=t1)
            out[j + 1] = M
    else:
        out[-1] = M
        for j in range(grid.N - 1, -1, -1):
            t0, tm, t1 = t[j + 1], t[j] + 0.5 * h, t[j]
            k1 = rhs(t0, M)
            k2 = rhs(tm, M - 0.5 * h * k1)
            k3 = rhs(tm, M - 0.5 * h * k2)
            k4 = rhs(t1, M - h * k3)
            M = M - (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(M)):
                raise DivergenceError(f"non-finite value at node {j}", node=j, time=t1)
            out[j] = M
    return MatrixPath(grid, out)


def transition_matrix(generator, grid: TimeGrid, from_index: int, to_index: int) -> np.ndarray:
    """``Phi(t_i, t_j)`` for ``dPhi/ds = generator(s) Phi``, ``Phi(t_j) = I``.

    ``generator`` is a callable of time or a :class:`MatrixPath`.
    """
    grid.check_index(from_index)
    grid.check_index(to_index)
    if to_index < from_index:
        raise GridError("transition_matrix integrates forward only (to_index >= from_index)")
    return transition_path(generator, grid, from_index)[to_index - from_index]


def transition_path(generator, grid: TimeGrid, from_index: int) -> np.ndarray:
    """``Phi(t_i, t_j)`` for every ``i >= j`` (array indexed by ``i - j``)."""
    j = grid.check_index(from_index)
    if isinstance(generator, MatrixPath):
        size = generator.shape[0]
        A = Coef(generator.values[j:], generator.midpoints()[j:]) if j < grid.N else None
    elif callable(generator):
        size = np.asarray(generator(grid.nodes[j])).shape[0]
        A = None
    else:
        size = np.asarray(generator).shape[0]
        A = Coef(generator)
    eye = np.eye(size)
    if j == grid.N:
        return eye[None]
    if A is None:
        h = grid.h
        t = grid.nodes
        out = np.empty((grid.N - j + 1, size, size))
        out[0] = eye
        M = eye
        for i in range(j, grid.N):
            tm = t[i] + 0.5 * h
            k1 = generator(t[i]) @ M
            k2 = generator(tm) @ (M + 0.5 * h * k1)
            k3 = generator(tm) @ (M + 0.5 * h * k2)
            k4 = generator(t[i + 1]) @ (M + h * k3)
            M = M + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            out[i - j + 1] = M
        return out
    sub = TimeGrid(grid.T - grid.nodes[j], grid.N - j) if grid.N - j >= 2 else None
    zero_q = np.zeros((size, size))
    if sub is None:
        # single remaining interval
        return _single_step_flow(A, eye, grid.h)
    return riccati_sweep(A, zero_q, zero_q, zero_q, eye, sub, backward=False, what="transition matrix")


def _single_step_flow(A: Coef, M, h):
    a0 = A.nodes[0]
    am = A.mids[0]
    a1 = A.nodes[-1]
    k1 = a0 @ M
    k2 = am @ (M + 0.5 * h * k1)
    k3 = am @ (M + 0.5 * h * k2)
    k4 = a1 @ (M + h * k3)
    return np.stack([M, M + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)])


def euler_maruyama_step(state, drift, diffusion, dW, h):
    """``state + drift h + diffusion dW``; broadcasts over leading path axes."""
    state = np.asarray(state, dtype=float)
    return state + np.asarray(drift) * h + np.asarray(dW) @ np.asarray(diffusion).T


def trapezoid(values, grid: TimeGrid) -> float:
    """Trapezoidal rule over the grid nodes (first axis of ``values``)."""
    v = np.asarray(values, dtype=float)
    if v.shape[0] != grid.N + 1:
        raise GridError(f"{v.shape[0]} samples for a grid with {grid.N + 1} nodes")
    return grid.h * (0.5 * v[0] + v[1:-1].sum(axis=0) + 0.5 * v[-1])
