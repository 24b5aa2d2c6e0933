"""Reference (numpy) implementation of the RK4 matrix-Riccati sweep.

``riccati_rk4`` integrates

    dM/dt = A(t) M + M B(t) + M C(t) M + D(t)

over a uniform grid.  Each coefficient is given at the grid nodes (shape
``(N+1, r, c)``) and at the interval midpoints (``(N, r, c)``); a leading
dimension of one marks a constant coefficient.  Returns the node values and
the index of the first non-finite node (``-1`` when the sweep is clean).
"""
import numpy as np


def _pick(arr, j):
    return arr[0] if arr.shape[0] == 1 else arr[j]


def riccati_rk4(A_n, A_m, B_n, B_m, C_n, C_m, D_n, D_m, M0, h, backward, symmetrize):
    N = max(A_m.shape[0], B_m.shape[0], C_m.shape[0], D_m.shape[0],
            A_n.shape[0] - 1, B_n.shape[0] - 1, C_n.shape[0] - 1, D_n.shape[0] - 1)
    if N < 1:
        raise ValueError("cannot infer the number of steps from constant coefficients")
    p, q = M0.shape
    out = np.empty((N + 1, p, q))
    M = np.array(M0, dtype=float)

    def f(M, A, B, C, D):
        MC = M @ C
        return A @ M + M @ B + MC @ M + D

    if backward:
        out[N] = M
        sign = -1.0
        order = range(N - 1, -1, -1)
    else:
        out[0] = M
        sign = 1.0
        order = range(N)
    for j in order:
        # start node -> end node; midpoint j sits between nodes j and j+1
        s, e = (j + 1, j) if backward else (j, j + 1)
        c_s = (_pick(A_n, s), _pick(B_n, s), _pick(C_n, s), _pick(D_n, s))
        c_m = (_pick(A_m, j), _pick(B_m, j), _pick(C_m, j), _pick(D_m, j))
        c_e = (_pick(A_n, e), _pick(B_n, e), _pick(C_n, e), _pick(D_n, e))
        k1 = f(M, *c_s)
        k2 = f(M + (sign * 0.5 * h) * k1, *c_m)
        k3 = f(M + (sign * 0.5 * h) * k2, *c_m)
        k4 = f(M + (sign * h) * k3, *c_e)
        M = M + (sign * h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if symmetrize:
            M = 0.5 * (M + M.T)
        if not np.all(np.isfinite(M)):
            out[e] = M
            return out, e
        out[e] = M
    return out, -1
