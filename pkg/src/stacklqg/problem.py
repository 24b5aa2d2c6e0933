"""Game data, assumption checks and the two worked example families.

A :class:`ProblemSpec` holds the raw matrices of the leader-follower game

    dX = (A X + B_F u_F + B_L u_L) dt + D dW
    dZ1 = H1 X dt + dV1          (leader only)
    dZ2 = H2 X dt + dV2          (shared)

with quadratic costs weighted by ``Q_i, R_ij, G_i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, ParameterError

SYM_TOL = 1e-12
PD_TOL = 1e-10
PSD_COV_TOL = 1e-12

MATRIX_FIELDS = ("A", "B_F", "B_L", "D", "H1", "H2")
WEIGHT_FIELDS = ("Q_F", "Q_L", "R_FF", "R_FL", "R_LL", "R_LF", "G_F", "G_L")
SYMMETRIC_FIELDS = WEIGHT_FIELDS


class Dimensions(NamedTuple):
    n: int
    k: int
    d: int
    l: int
    m: int
    w: int


def _as_matrix(value, name):
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(name, arr.shape, ("r", "c"))
    return arr


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """All raw data of one game instance.

    Shapes are checked on construction; definiteness is not (see
    :func:`validate_assumptions`).
    """

    A: np.ndarray
    B_F: np.ndarray
    B_L: np.ndarray
    D: np.ndarray
    H1: np.ndarray
    H2: np.ndarray
    Q_F: np.ndarray
    Q_L: np.ndarray
    R_FF: np.ndarray
    R_LL: np.ndarray
    R_LF: np.ndarray
    G_F: np.ndarray
    G_L: np.ndarray
    T: float
    x0_mean: np.ndarray
    x0_cov: np.ndarray
    R_FL: np.ndarray | None = None
    name: str = field(default="")

    def __post_init__(self):
        for f in MATRIX_FIELDS + WEIGHT_FIELDS + ("x0_cov",):
            value = getattr(self, f)
            if f == "R_FL" and value is None:
                continue
            object.__setattr__(self, f, _as_matrix(value, f))
        mean = np.array(self.x0_mean, dtype=float).reshape(-1)
        object.__setattr__(self, "x0_mean", mean)
        object.__setattr__(self, "T", float(self.T))
        if self.R_FL is None:
            d = self.B_L.shape[1]
            object.__setattr__(self, "R_FL", np.zeros((d, d)))
        self._check_shapes()
        for f in MATRIX_FIELDS + WEIGHT_FIELDS + ("x0_mean", "x0_cov"):
            getattr(self, f).setflags(write=False)

    def _check_shapes(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise DimensionError("A", self.A.shape, (n, n))
        k = self.B_F.shape[1]
        d = self.B_L.shape[1]
        w = self.D.shape[1]
        l = self.H1.shape[0]
        m = self.H2.shape[0]
        expected = {
            "B_F": (n, k), "B_L": (n, d), "D": (n, w),
            "H1": (l, n), "H2": (m, n),
            "Q_F": (n, n), "Q_L": (n, n), "G_F": (n, n), "G_L": (n, n),
            "R_FF": (k, k), "R_LF": (k, k), "R_LL": (d, d), "R_FL": (d, d),
            "x0_cov": (n, n),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise DimensionError(name, actual, shape, against=f"A {self.A.shape}")
        if self.x0_mean.shape != (n,):
            raise DimensionError("x0_mean", self.x0_mean.shape, (n,), against=f"A {self.A.shape}")
        if min(n, k, d, m, w) < 1:
            raise DimensionError("dims", (n, k, d, l, m, w), ("all >= 1 except l",))

    @property
    def dims(self) -> Dimensions:
        return Dimensions(
            n=self.A.shape[0], k=self.B_F.shape[1], d=self.B_L.shape[1],
            l=self.H1.shape[0], m=self.H2.shape[0], w=self.D.shape[1],
        )

    def replace(self, **changes) -> "ProblemSpec":
        return replace(self, **changes)

    def equals(self, other: "ProblemSpec") -> bool:
        """Exact (bitwise) equality of every field."""
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if a.shape != b.shape or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True


class Failure(NamedTuple):
    check: str
    message: str
    detail: object


@dataclass
class ValidationReport:
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def add(self, check, message, detail):
        self.failures.append(Failure(check, message, detail))

    def __str__(self):
        if self.passed:
            return "all assumptions satisfied"
        return "\n".join(f"[{f.check}] {f.message} ({f.detail})" for f in self.failures)


def _asymmetry(M):
    scale = max(np.linalg.norm(M), 1.0)
    return np.linalg.norm(M - M.T) / scale


def _eigs(M):
    return np.linalg.eigvalsh(0.5 * (M + M.T))


def is_positive_definite(M, tol=PD_TOL):
    ev = _eigs(M)
    return ev.min() > tol * (1.0 + max(ev.max(), 0.0))


def is_psd(M, tol=PD_TOL):
    ev = _eigs(M)
    return ev.min() >= -tol * (1.0 + max(ev.max(), 0.0))


def validate_assumptions(spec: ProblemSpec) -> ValidationReport:
    """Check symmetry, follower/leader weight definiteness, horizon and initial covariance.

    Violations are collected, never raised.
    """
    report = ValidationReport()
    for name in SYMMETRIC_FIELDS:
        M = getattr(spec, name)
        asym = _asymmetry(M)
        if asym > SYM_TOL:
            report.add("symmetry", f"{name} not symmetric", asym)
    for name in ("Q_F", "G_F", "Q_L", "G_L"):
        M = getattr(spec, name)
        if not is_psd(M):
            check = "follower_weights" if name.endswith("F") else "leader_weights"
            report.add(check, f"{name} not PSD", _eigs(M).min())
    for name in ("R_FF", "R_LL", "R_LF"):
        M = getattr(spec, name)
        if not is_positive_definite(M):
            check = "follower_weights" if name == "R_FF" else "leader_weights"
            report.add(check, f"{name} not positive definite", _eigs(M).min())
    if not spec.T > 0:
        report.add("horizon", "T must be positive", spec.T)
    ev = _eigs(spec.x0_cov)
    if ev.min() < -PSD_COV_TOL:
        report.add("initial", "x0_cov not PSD", ev.min())
    if _asymmetry(spec.x0_cov) > SYM_TOL:
        report.add("symmetry", "x0_cov not symmetric", _asymmetry(spec.x0_cov))
    return report


def build_example_debt(r=0.05, rho1=1.0, rho2=1.0, lam=1.0, eta=1.0, kappa=1.0,
                       T=5.0, debt0_mean=1.0, debt0_var=1.0, offset=0.0) -> ProblemSpec:
    """Government debt stabilization game (fiscal leader, monetary follower).

    State is ``(d - d_bar, r d_bar + f_bar - m_bar)``; the second coordinate is
    a constant drift term, so ``A = [[r, 1], [0, 0]]``.  ``offset`` is its
    (deterministic) value.
    """
    if debt0_var < 0:
        raise ParameterError("debt0_var must be non-negative")
    if T <= 0:
        raise ParameterError("T must be positive")
    return ProblemSpec(
        A=[[r, 1.0], [0.0, 0.0]],
        B_F=[[-1.0], [0.0]],
        B_L=[[1.0], [0.0]],
        D=np.zeros((2, 1)),
        H1=[[rho1, 0.0]],
        H2=[[rho2, 0.0]],
        Q_F=np.diag([kappa, 0.0]),
        Q_L=np.diag([lam, 0.0]),
        R_FF=[[1.0]],
        R_LL=[[1.0]],
        R_LF=[[eta]],
        R_FL=[[0.0]],
        G_F=np.zeros((2, 2)),
        G_L=np.zeros((2, 2)),
        T=T,
        x0_mean=[debt0_mean, offset],
        x0_cov=np.diag([debt0_var, 0.0]),
        name="debt",
    )


def build_example_servo(A1, A2, L, B1, B2, D1, D2, h1, h2, G11, G12, G21, G22,
                        theta, T, x0_mean=None, x0_cov=None) -> ProblemSpec:
    """Two-plant servo game; plant 1 leads, plant 2 tracks.

    State is ``(x1, x2, s)`` where ``s`` is the command generator.  ``G11``..
    ``G22`` are the tracking maps (``G21``: x1 -> x2 space, ``G22``: s -> x2
    space, ``G12``: x2 -> x1 space, ``G11``: s -> x1 space).
    """
    if not 0.0 < theta < 1.0:
        raise ParameterError(f"theta must lie in (0, 1), got {theta}")
    A1, A2, L = (np.atleast_2d(np.asarray(M, float)) for M in (A1, A2, L))
    B1, B2 = np.atleast_2d(np.asarray(B1, float)), np.atleast_2d(np.asarray(B2, float))
    D1, D2 = np.atleast_2d(np.asarray(D1, float)), np.atleast_2d(np.asarray(D2, float))
    n1, n2, ns = A1.shape[0], A2.shape[0], L.shape[0]
    n = n1 + n2 + ns
    d, k = B1.shape[1], B2.shape[1]
    G11, G12, G21, G22 = (np.asarray(M, float).reshape(shape)
                          for M, shape in ((G11, (n1, ns)), (G12, (n1, n2)),
                                           (G21, (n2, n1)), (G22, (n2, ns))))

    A = np.zeros((n, n))
    A[:n1, :n1] = A1
    A[n1:n1 + n2, n1:n1 + n2] = A2
    A[n1 + n2:, n1 + n2:] = L
    B_L = np.vstack([B1, np.zeros((n2 + ns, d))])
    B_F = np.vstack([np.zeros((n1, k)), B2, np.zeros((ns, k))])
    w1, w2 = D1.shape[1], D2.shape[1]
    D = np.zeros((n, w1 + w2))
    D[:n1, :w1] = D1
    D[n1:n1 + n2, w1:] = D2
    h1 = np.atleast_2d(np.asarray(h1, float))
    h2 = np.atleast_2d(np.asarray(h2, float))
    H1 = np.hstack([h1, np.zeros((h1.shape[0], ns))])
    H2 = np.hstack([h2, np.zeros((h2.shape[0], ns))])

    # follower tracks G21 x1 + G22 s, leader tracks G12 x2 + G11 s
    M_F = np.hstack([-G21, np.eye(n2), -G22])
    M_L = np.hstack([np.eye(n1), -G12, -G11])

    if x0_mean is None:
        x0_mean = np.zeros(n)
    if x0_cov is None:
        x0_cov = np.zeros((n, n))
    return ProblemSpec(
        A=A, B_F=B_F, B_L=B_L, D=D, H1=H1, H2=H2,
        Q_F=M_F.T @ M_F, Q_L=M_L.T @ M_L,
        R_FF=np.eye(k), R_LL=(1.0 - theta) * np.eye(d), R_LF=theta * np.eye(k),
        R_FL=np.zeros((d, d)),
        G_F=np.zeros((n, n)), G_L=np.zeros((n, n)),
        T=T, x0_mean=x0_mean, x0_cov=x0_cov, name="servo",
    )


def fixture_scalar(**changes) -> ProblemSpec:
    """Scalar fixture: every dimension one, unit weights, horizon one."""
    spec = ProblemSpec(
        A=[[0.0]], B_F=[[1.0]], B_L=[[1.0]], D=[[1.0]], H1=[[1.0]], H2=[[1.0]],
        Q_F=[[1.0]], Q_L=[[1.0]], R_FF=[[1.0]], R_LL=[[1.0]], R_LF=[[1.0]],
        R_FL=[[0.0]], G_F=[[0.0]], G_L=[[0.0]], T=1.0,
        x0_mean=[0.0], x0_cov=[[1.0]], name="scalar",
    )
    return spec.replace(**changes) if changes else spec


def fixture_debt(**changes) -> ProblemSpec:
    """Debt fixture: debt game with r=0.05, unit weights and T=5."""
    spec = build_example_debt(r=0.05, rho1=1.0, rho2=1.0, lam=1.0, eta=1.0, kappa=1.0,
                              T=5.0, debt0_mean=1.0, debt0_var=1.0)
    return spec.replace(**changes) if changes else spec


def fixture_det(**changes) -> ProblemSpec:
    """Deterministic fixture: the scalar fixture without process noise and with a known unit start."""
    spec = fixture_scalar(D=[[0.0]], x0_mean=[1.0], x0_cov=[[0.0]]).replace(name="det")
    return spec.replace(**changes) if changes else spec


FIXTURES = {"scalar": fixture_scalar, "debt": fixture_debt, "det": fixture_det}
