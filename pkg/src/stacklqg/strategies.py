"""Equilibrium gain schedules and the two nested Kalman-Bucy filters.

The follower filters the augmented state from its own channel ``Z2``; the
leader filters it from both channels and also runs (or receives) the
follower's estimate, which it can reproduce because ``Z2`` is part of its
information.  All step functions broadcast over a leading batch of paths.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import AugmentedSystem
from .errors import GridError, NotConvergedError
from .integrators import MatrixPath
from .io import write_matrix_path_csv
from .riccati import RiccatiBundle


@dataclass(frozen=True, eq=False)
class GainSchedule:
    K_F: MatrixPath
    K_L_tilde: MatrixPath
    K_L_hat: MatrixPath
    A_hat_cl: MatrixPath
    L_hat: MatrixPath
    A_tilde_cl: MatrixPath
    B_tilde_cross: MatrixPath
    L_tilde: MatrixPath
    H: np.ndarray
    H_F: np.ndarray

    @property
    def grid(self):
        return self.K_F.grid

    def paths(self):
        return {name: getattr(self, name) for name in
                ("K_F", "K_L_tilde", "K_L_hat", "A_hat_cl", "L_hat", "A_tilde_cl",
                 "B_tilde_cross", "L_tilde")}

    def scaled_leader(self, tilde=1.0, hat=1.0) -> "GainSchedule":
        """Copy with the leader gains multiplied by ``tilde`` and ``hat``."""
        return self.with_leader(self.K_L_tilde.values * tilde, self.K_L_hat.values * hat)

    def with_leader(self, K_L_tilde, K_L_hat) -> "GainSchedule":
        g = self.grid
        return GainSchedule(
            K_F=self.K_F, K_L_tilde=MatrixPath(g, K_L_tilde), K_L_hat=MatrixPath(g, K_L_hat),
            A_hat_cl=self.A_hat_cl, L_hat=self.L_hat, A_tilde_cl=self.A_tilde_cl,
            B_tilde_cross=self.B_tilde_cross, L_tilde=self.L_tilde, H=self.H, H_F=self.H_F,
        )


def build_gains(bundle: RiccatiBundle, aug: AugmentedSystem | None = None, allow_unconverged=False) -> GainSchedule:
    """Feedback gains and filter matrices, nodewise from the Riccati bundle."""
    if not bundle.converged and not allow_unconverged:
        raise NotConvergedError("refusing to build gains from a non-converged Riccati bundle")
    aug = aug or bundle.aug
    g = bundle.grid
    n = aug.n
    spec = aug.spec
    P, Pdag, Sigma, Xi11 = bundle.P.values, bundle.Pdag.values, bundle.Sigma.values, bundle.Xi11.values
    FL = -aug.R_LL_inv @ spec.B_L.T
    FF = -aug.R_FF_inv @ spec.B_F.T
    SP = aug.S @ P
    StPdag = aug.Stilde @ Pdag
    return GainSchedule(
        K_F=MatrixPath(g, FF @ P[:, n:, :]),
        K_L_tilde=MatrixPath(g, FL @ Pdag[:, :n, :]),
        K_L_hat=MatrixPath(g, FL @ (P - Pdag)[:, :n, :]),
        A_hat_cl=MatrixPath(g, aug.Abold + SP),
        L_hat=MatrixPath(g, Xi11 @ aug.H_F.T),
        A_tilde_cl=MatrixPath(g, aug.Abold + StPdag),
        B_tilde_cross=MatrixPath(g, SP - StPdag),
        L_tilde=MatrixPath(g, Sigma @ aug.H.T),
        H=aug.H, H_F=aug.H_F,
    )


@dataclass(frozen=True)
class FilterState:
    """Filter estimates at a node; arrays may carry a leading path axis."""

    x_hat: np.ndarray
    x_tilde: np.ndarray
    node: int = 0

    @classmethod
    def initial(cls, aug: AugmentedSystem, paths: int | None = None) -> "FilterState":
        m = aug.gamma_mean
        if paths is not None:
            m = np.broadcast_to(m, (paths, m.size)).copy()
        return cls(x_hat=m.copy(), x_tilde=m.copy(), node=0)


def _mv(M, x):
    # M @ x for x of shape (2n,) or (paths, 2n)
    return x @ M.T


def _check_node(gains: GainSchedule, node: int):
    if node >= gains.grid.N:
        raise GridError(f"cannot step past the last node (node={node}, N={gains.grid.N})")


def follower_filter_update(x_hat, dZ2, gains: GainSchedule, node: int, h: float):
    j = node
    innov = dZ2 - _mv(gains.H_F, x_hat) * h
    return x_hat + _mv(gains.A_hat_cl[j], x_hat) * h + _mv(gains.L_hat[j], innov)


def leader_filter_update(x_tilde, dZ1, dZ2, x_hat, gains: GainSchedule, node: int, h: float):
    j = node
    dZ = np.concatenate([dZ1, dZ2], axis=-1)
    innov = dZ - _mv(gains.H, x_tilde) * h
    drift = _mv(gains.A_tilde_cl[j], x_tilde) + _mv(gains.B_tilde_cross[j], x_hat)
    return x_tilde + drift * h + _mv(gains.L_tilde[j], innov)


def follower_filter_step(state: FilterState, dZ2, gains: GainSchedule, h: float) -> FilterState:
    """One Euler step of the follower filter; the leader estimate is carried along."""
    _check_node(gains, state.node)
    x_hat = follower_filter_update(state.x_hat, np.asarray(dZ2, dtype=float), gains, state.node, h)
    return FilterState(x_hat=x_hat, x_tilde=state.x_tilde, node=state.node + 1)


def leader_filter_step(state: FilterState, dZ1, dZ2, x_hat, gains: GainSchedule, h: float) -> FilterState:
    """One Euler step of the leader filter.

    ``x_hat`` is the follower estimate at the current node, before its own
    update.  The returned state keeps ``state.x_hat`` untouched.
    """
    _check_node(gains, state.node)
    x_tilde = leader_filter_update(state.x_tilde, np.asarray(dZ1, dtype=float),
                                   np.asarray(dZ2, dtype=float), np.asarray(x_hat, dtype=float),
                                   gains, state.node, h)
    return FilterState(x_hat=state.x_hat, x_tilde=x_tilde, node=state.node + 1)


def step_filters(state: FilterState, dZ1, dZ2, gains: GainSchedule, h: float) -> FilterState:
    """Advance both filters over one interval using the same increments."""
    _check_node(gains, state.node)
    j = state.node
    x_tilde = leader_filter_update(state.x_tilde, dZ1, dZ2, state.x_hat, gains, j, h)
    x_hat = follower_filter_update(state.x_hat, dZ2, gains, j, h)
    return FilterState(x_hat=x_hat, x_tilde=x_tilde, node=j + 1)


def control_follower(gains: GainSchedule, node: int, x_hat):
    return _mv(gains.K_F[node], np.asarray(x_hat, dtype=float))


def control_leader(gains: GainSchedule, node: int, x_tilde, x_hat):
    return (_mv(gains.K_L_tilde[node], np.asarray(x_tilde, dtype=float))
            + _mv(gains.K_L_hat[node], np.asarray(x_hat, dtype=float)))


def telescoped_leader_gain(bundle: RiccatiBundle, aug: AugmentedSystem | None = None) -> np.ndarray:
    """``-R_LL^-1 B_L' [P11, P12]`` at every node (the single-filter leader law)."""
    aug = aug or bundle.aug
    n = aug.n
    return -aug.R_LL_inv @ aug.spec.B_L.T @ bundle.P.values[:, :n, :]


def write_gains_csv(gains: GainSchedule, directory):
    """One CSV per gain path: ``node,t`` then row-major entries."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, path in gains.paths().items():
        fn = directory / f"{name}.csv"
        write_matrix_path_csv(path, fn, name)
        written.append(fn)
    return written
