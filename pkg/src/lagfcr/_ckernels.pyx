# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot sampler kernels (see _pykernels for docs)."""
import numpy as np

from libc.math cimport sqrt

BACKEND = "cython"


def lag_sse(const double[::1] r0, const double[::1] gy, const double[:, ::1] X,
            const long long[::1] y_site, const long long[::1] y_e, int lag_max):
    cdef Py_ssize_t n_obs = r0.shape[0]
    cdef Py_ssize_t o
    cdef int s
    cdef double acc, r
    out = np.zeros(lag_max + 1)
    cdef double[::1] sse = out
    for s in range(lag_max + 1):
        acc = 0.0
        for o in range(n_obs):
            r = r0[o] - gy[o] * X[y_site[o], y_e[o] - s]
            acc += r * r
        sse[s] = acc
    return out


def factor_update(const double[:, ::1] Fx, const double[:, ::1] Fy,
                  const long long[::1] x_site, const long long[::1] y_site,
                  double[::1] rx, double[::1] ry, double[::1] mu, double[:, ::1] alpha,
                  const double[::1] mu_prec, const double[:, ::1] alpha_prec,
                  double tau_x, double tau_y,
                  const double[::1] z_mu, const double[:, ::1] z_alpha):
    cdef Py_ssize_t K = alpha.shape[0]
    cdef Py_ssize_t n = alpha.shape[1]
    cdef Py_ssize_t nx = rx.shape[0]
    cdef Py_ssize_t ny = ry.shape[0]
    cdef Py_ssize_t k, o, i
    cdef double prec, lin, f, m, yp, yl
    prec_buf = np.empty(n)
    lin_buf = np.empty(n)
    cdef double[::1] pi = prec_buf
    cdef double[::1] li = lin_buf

    for k in range(K):
        m = mu[k]
        prec = 0.0
        lin = 0.0
        for o in range(nx):
            f = Fx[o, k]
            rx[o] += f * m
            prec += f * f
            lin += f * rx[o]
        prec *= tau_x
        lin *= tau_x
        yp = 0.0
        yl = 0.0
        for o in range(ny):
            f = Fy[o, k]
            ry[o] += f * m
            yp += f * f
            yl += f * ry[o]
        prec = mu_prec[k] + prec + tau_y * yp
        lin = lin + tau_y * yl
        m = lin / prec + z_mu[k] / sqrt(prec)
        mu[k] = m
        for o in range(nx):
            rx[o] -= Fx[o, k] * m
        for o in range(ny):
            ry[o] -= Fy[o, k] * m

    for k in range(K):
        for i in range(n):
            pi[i] = 0.0
            li[i] = 0.0
        for o in range(nx):
            f = Fx[o, k]
            i = x_site[o]
            rx[o] += f * alpha[k, i]
            pi[i] += tau_x * f * f
            li[i] += tau_x * f * rx[o]
        for o in range(ny):
            f = Fy[o, k]
            i = y_site[o]
            ry[o] += f * alpha[k, i]
            pi[i] += tau_y * f * f
            li[i] += tau_y * f * ry[o]
        for i in range(n):
            prec = alpha_prec[k, i] + pi[i]
            alpha[k, i] = li[i] / prec + z_alpha[k, i] / sqrt(prec)
        for o in range(nx):
            rx[o] -= Fx[o, k] * alpha[k, x_site[o]]
        for o in range(ny):
            ry[o] -= Fy[o, k] * alpha[k, y_site[o]]
