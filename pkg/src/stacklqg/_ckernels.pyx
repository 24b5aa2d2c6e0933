# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled RK4 matrix-Riccati sweep (same contract as ``_kernels_py``)."""
import numpy as np
from libc.math cimport isfinite
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy


cdef inline Py_ssize_t _row(Py_ssize_t length, Py_ssize_t j) nogil:
    return 0 if length == 1 else j


cdef void _rhs(const double* M, const double* A, const double* B, const double* C,
               const double* D, double* out, double* MC, Py_ssize_t p, Py_ssize_t q) nogil:
    # out = A M + M B + (M C) M + D ;  M: p x q, A: p x p, B: q x q, C: q x p
    cdef Py_ssize_t i, j, r
    cdef double acc
    for i in range(p):
        for j in range(p):
            acc = 0.0
            for r in range(q):
                acc = acc + M[i * q + r] * C[r * p + j]
            MC[i * p + j] = acc
    for i in range(p):
        for j in range(q):
            acc = D[i * q + j]
            for r in range(p):
                acc = acc + (A[i * p + r] + MC[i * p + r]) * M[r * q + j]
            for r in range(q):
                acc = acc + M[i * q + r] * B[r * q + j]
            out[i * q + j] = acc


def riccati_rk4(const double[:, :, ::1] A_n, const double[:, :, ::1] A_m,
                const double[:, :, ::1] B_n, const double[:, :, ::1] B_m,
                const double[:, :, ::1] C_n, const double[:, :, ::1] C_m,
                const double[:, :, ::1] D_n, const double[:, :, ::1] D_m,
                const double[:, ::1] M0, double h, bint backward, bint symmetrize):
    cdef Py_ssize_t N = max(A_m.shape[0], B_m.shape[0], C_m.shape[0], D_m.shape[0],
                            A_n.shape[0] - 1, B_n.shape[0] - 1, C_n.shape[0] - 1,
                            D_n.shape[0] - 1)
    if N < 1:
        raise ValueError("cannot infer the number of steps from constant coefficients")
    cdef Py_ssize_t p = M0.shape[0]
    cdef Py_ssize_t q = M0.shape[1]
    cdef Py_ssize_t sz = p * q
    out_arr = np.empty((N + 1, p, q))
    cdef double[:, :, ::1] out = out_arr
    cdef double* M = <double*> malloc(sz * sizeof(double))
    cdef double* tmp = <double*> malloc(sz * sizeof(double))
    cdef double* k1 = <double*> malloc(sz * sizeof(double))
    cdef double* k2 = <double*> malloc(sz * sizeof(double))
    cdef double* k3 = <double*> malloc(sz * sizeof(double))
    cdef double* k4 = <double*> malloc(sz * sizeof(double))
    cdef double* MC = <double*> malloc(p * p * sizeof(double))
    cdef Py_ssize_t i, jj, step, s, e, a, b
    cdef double sign = -1.0 if backward else 1.0
    cdef double hh = sign * 0.5 * h
    cdef double hf = sign * h
    cdef double h6 = sign * h / 6.0
    cdef double v
    cdef Py_ssize_t bad = -1
    try:
        with nogil:
            for a in range(p):
                for b in range(q):
                    M[a * q + b] = M0[a, b]
            if backward:
                s = N
            else:
                s = 0
            memcpy(&out[s, 0, 0], M, sz * sizeof(double))
            for step in range(N):
                if backward:
                    jj = N - 1 - step
                    s = jj + 1
                    e = jj
                else:
                    jj = step
                    s = jj
                    e = jj + 1
                _rhs(M, &A_n[_row(A_n.shape[0], s), 0, 0], &B_n[_row(B_n.shape[0], s), 0, 0],
                     &C_n[_row(C_n.shape[0], s), 0, 0], &D_n[_row(D_n.shape[0], s), 0, 0],
                     k1, MC, p, q)
                for i in range(sz):
                    tmp[i] = M[i] + hh * k1[i]
                _rhs(tmp, &A_m[_row(A_m.shape[0], jj), 0, 0], &B_m[_row(B_m.shape[0], jj), 0, 0],
                     &C_m[_row(C_m.shape[0], jj), 0, 0], &D_m[_row(D_m.shape[0], jj), 0, 0],
                     k2, MC, p, q)
                for i in range(sz):
                    tmp[i] = M[i] + hh * k2[i]
                _rhs(tmp, &A_m[_row(A_m.shape[0], jj), 0, 0], &B_m[_row(B_m.shape[0], jj), 0, 0],
                     &C_m[_row(C_m.shape[0], jj), 0, 0], &D_m[_row(D_m.shape[0], jj), 0, 0],
                     k3, MC, p, q)
                for i in range(sz):
                    tmp[i] = M[i] + hf * k3[i]
                _rhs(tmp, &A_n[_row(A_n.shape[0], e), 0, 0], &B_n[_row(B_n.shape[0], e), 0, 0],
                     &C_n[_row(C_n.shape[0], e), 0, 0], &D_n[_row(D_n.shape[0], e), 0, 0],
                     k4, MC, p, q)
                for i in range(sz):
                    M[i] = M[i] + h6 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                if symmetrize:
                    for a in range(p):
                        for b in range(a + 1, p):
                            v = 0.5 * (M[a * q + b] + M[b * q + a])
                            M[a * q + b] = v
                            M[b * q + a] = v
                memcpy(&out[e, 0, 0], M, sz * sizeof(double))
                for i in range(sz):
                    if not isfinite(M[i]):
                        bad = e
                        break
                if bad >= 0:
                    break
    finally:
        free(M)
        free(tmp)
        free(k1)
        free(k2)
        free(k3)
        free(k4)
        free(MC)
    return out_arr, bad
