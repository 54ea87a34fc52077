# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the numpy hot kernels.

Same call signatures and semantics as ``numpy_backend``; plain C loops over
the (N, C) vector channels.  Selected at import by ``vnn._kernels`` when the
extension built successfully.
"""

import numpy as np

from libc.math cimport sqrt, INFINITY

NAME = "cython"


def channel_map_fwd(double[:, ::1] w, double[:, :, ::1] v):
    cdef Py_ssize_t n = v.shape[0], ci = v.shape[1], co = w.shape[0]
    out_arr = np.zeros((n, co, 3), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, o, c
    cdef double wv, a0, a1, a2
    for i in range(n):
        for o in range(co):
            a0 = 0.0
            a1 = 0.0
            a2 = 0.0
            for c in range(ci):
                wv = w[o, c]
                a0 += wv * v[i, c, 0]
                a1 += wv * v[i, c, 1]
                a2 += wv * v[i, c, 2]
            out[i, o, 0] = a0
            out[i, o, 1] = a1
            out[i, o, 2] = a2
    return out_arr


def channel_map_bwd(double[:, ::1] w, double[:, :, ::1] v, double[:, :, ::1] g):
    cdef Py_ssize_t n = v.shape[0], ci = v.shape[1], co = w.shape[0]
    gw_arr = np.zeros((co, ci), dtype=np.float64)
    gv_arr = np.zeros((n, ci, 3), dtype=np.float64)
    cdef double[:, ::1] gw = gw_arr
    cdef double[:, :, ::1] gv = gv_arr
    cdef Py_ssize_t i, o, c
    cdef double g0, g1, g2, wv
    for i in range(n):
        for o in range(co):
            g0 = g[i, o, 0]
            g1 = g[i, o, 1]
            g2 = g[i, o, 2]
            for c in range(ci):
                gw[o, c] += g0 * v[i, c, 0] + g1 * v[i, c, 1] + g2 * v[i, c, 2]
                wv = w[o, c]
                gv[i, c, 0] += wv * g0
                gv[i, c, 1] += wv * g1
                gv[i, c, 2] += wv * g2
    return gw_arr, gv_arr


def vn_clip_fwd(double[:, :, ::1] q, double[:, :, ::1] k, double eps, double alpha):
    cdef Py_ssize_t n = q.shape[0], nc = q.shape[1]
    out_arr = np.empty((n, nc, 3), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, c
    cdef double q0, q1, q2, k0, k1, k2, dot, kn, inv, u0, u1, u2, s, beta
    beta = 1.0 - alpha
    for i in range(n):
        for c in range(nc):
            q0 = q[i, c, 0]; q1 = q[i, c, 1]; q2 = q[i, c, 2]
            k0 = k[i, c, 0]; k1 = k[i, c, 1]; k2 = k[i, c, 2]
            dot = q0 * k0 + q1 * k1 + q2 * k2
            if dot >= 0.0:
                out[i, c, 0] = q0
                out[i, c, 1] = q1
                out[i, c, 2] = q2
            else:
                kn = sqrt(k0 * k0 + k1 * k1 + k2 * k2)
                inv = 1.0 / (kn + eps)
                u0 = k0 * inv; u1 = k1 * inv; u2 = k2 * inv
                s = q0 * u0 + q1 * u1 + q2 * u2
                out[i, c, 0] = q0 - beta * s * u0
                out[i, c, 1] = q1 - beta * s * u1
                out[i, c, 2] = q2 - beta * s * u2
    return out_arr


def vn_clip_bwd(double[:, :, ::1] q, double[:, :, ::1] k, double eps, double alpha,
                double[:, :, ::1] g):
    cdef Py_ssize_t n = q.shape[0], nc = q.shape[1]
    gq_arr = np.empty((n, nc, 3), dtype=np.float64)
    gk_arr = np.zeros((n, nc, 3), dtype=np.float64)
    cdef double[:, :, ::1] gq = gq_arr
    cdef double[:, :, ::1] gk = gk_arr
    cdef Py_ssize_t i, c
    cdef double q0, q1, q2, k0, k1, k2, g0, g1, g2
    cdef double dot, kn, denom, inv, u0, u1, u2, s, gdotu, beta
    cdef double gu0, gu1, gu2, kgu, safe_kn, coef
    beta = 1.0 - alpha
    for i in range(n):
        for c in range(nc):
            q0 = q[i, c, 0]; q1 = q[i, c, 1]; q2 = q[i, c, 2]
            k0 = k[i, c, 0]; k1 = k[i, c, 1]; k2 = k[i, c, 2]
            g0 = g[i, c, 0]; g1 = g[i, c, 1]; g2 = g[i, c, 2]
            dot = q0 * k0 + q1 * k1 + q2 * k2
            if dot >= 0.0:
                gq[i, c, 0] = g0
                gq[i, c, 1] = g1
                gq[i, c, 2] = g2
            else:
                kn = sqrt(k0 * k0 + k1 * k1 + k2 * k2)
                denom = kn + eps
                inv = 1.0 / denom
                u0 = k0 * inv; u1 = k1 * inv; u2 = k2 * inv
                s = q0 * u0 + q1 * u1 + q2 * u2
                gdotu = g0 * u0 + g1 * u1 + g2 * u2
                gq[i, c, 0] = g0 - beta * gdotu * u0
                gq[i, c, 1] = g1 - beta * gdotu * u1
                gq[i, c, 2] = g2 - beta * gdotu * u2
                gu0 = -beta * (gdotu * q0 + s * g0)
                gu1 = -beta * (gdotu * q1 + s * g1)
                gu2 = -beta * (gdotu * q2 + s * g2)
                kgu = k0 * gu0 + k1 * gu1 + k2 * gu2
                safe_kn = kn if kn > 1e-30 else 1e-30
                coef = kgu / (safe_kn * denom * denom)
                gk[i, c, 0] = gu0 * inv - k0 * coef
                gk[i, c, 1] = gu1 * inv - k1 * coef
                gk[i, c, 2] = gu2 * inv - k2 * coef
    return gq_arr, gk_arr


def pairwise_sqdist(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    out_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, m
    cdef double acc, diff
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for m in range(d):
                diff = x[i, m] - x[j, m]
                acc += diff * diff
            out[i, j] = acc
            out[j, i] = acc
    return out_arr


def knn_select(double[:, ::1] dist, Py_ssize_t k, bint exclude_self):
    # Row-wise k smallest by (distance, column index); nearest first.
    cdef Py_ssize_t n = dist.shape[0]
    out_arr = np.empty((n, k), dtype=np.int64)
    cdef long long[:, ::1] out = out_arr
    best_d_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] best_d = best_d_arr
    cdef Py_ssize_t i, j, m, pos, filled
    cdef double dv
    for i in range(n):
        filled = 0
        for j in range(n):
            if exclude_self and j == i:
                continue
            dv = dist[i, j]
            if filled == k and dv >= best_d[k - 1]:
                continue
            # insertion point: after all entries with smaller-or-equal
            # distance (equal keeps the earlier, lower index first)
            pos = filled if filled < k else k - 1
            while pos > 0 and best_d[pos - 1] > dv:
                if pos < k:
                    best_d[pos] = best_d[pos - 1]
                    out[i, pos] = out[i, pos - 1]
                pos -= 1
            best_d[pos] = dv
            out[i, pos] = j
            if filled < k:
                filled += 1
    return out_arr
