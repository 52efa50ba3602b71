# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. See ``_kernels_py`` for the reference versions."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, fabs, sqrt

cnp.import_array()


def softmax_xent(logits, targets):
    cdef double[:, ::1] x = np.ascontiguousarray(logits, dtype=np.float64)
    cdef long long[::1] t = np.ascontiguousarray(targets, dtype=np.int64)
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    loss_arr = np.empty(rows, dtype=np.float64)
    probs_arr = np.empty((rows, n), dtype=np.float64)
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] probs = probs_arr
    cdef double m, z
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        z = 0.0
        for j in range(n):
            probs[i, j] = exp(x[i, j] - m)
            z += probs[i, j]
        for j in range(n):
            probs[i, j] /= z
        loss[i] = log(z) - (x[i, t[i]] - m)
    return loss_arr, probs_arr


def sym_kl(a, b, double eps):
    cdef double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t rows = A.shape[0], n = A.shape[1], i, j
    value_arr = np.empty(rows, dtype=np.float64)
    ga_arr = np.empty((rows, n), dtype=np.float64)
    gb_arr = np.empty((rows, n), dtype=np.float64)
    cdef double[::1] value = value_arr
    cdef double[:, ::1] ga = ga_arr
    cdef double[:, ::1] gb = gb_arr
    cdef double sa, sb, p, q, ps, qs, lp, lq, acc, dot_a, dot_b
    cdef double scale = 1.0 + n * eps
    cdef double inv_n = 1.0 / n
    for i in range(rows):
        sa = 0.0
        sb = 0.0
        for j in range(n):
            sa += A[i, j]
            sb += B[i, j]
        acc = 0.0
        dot_a = 0.0
        dot_b = 0.0
        for j in range(n):
            p = A[i, j] / sa if sa > 0 else inv_n
            q = B[i, j] / sb if sb > 0 else inv_n
            ps = (p + eps) / scale
            qs = (q + eps) / scale
            lp = log(ps)
            lq = log(qs)
            acc += (ps - qs) * (lp - lq)
            ga[i, j] = 0.5 * ((lp - lq) + (ps - qs) / ps)
            gb[i, j] = 0.5 * ((lq - lp) + (qs - ps) / qs)
            dot_a += ga[i, j] * p
            dot_b += gb[i, j] * q
        value[i] = 0.5 * acc
        if sa <= 0:
            sa = 1.0
        if sb <= 0:
            sb = 1.0
        for j in range(n):
            ga[i, j] = (ga[i, j] - dot_a) / (scale * sa)
            gb[i, j] = (gb[i, j] - dot_b) / (scale * sb)
    return value_arr, ga_arr, gb_arr


def lasso_cd(Z, y, double lam, int max_iter=1000, double tol=1e-10):
    cdef double[::1, :] X = np.asfortranarray(Z, dtype=np.float64)
    resid_arr = np.array(y, dtype=np.float64, copy=True)
    cdef double[::1] resid = resid_arr
    cdef Py_ssize_t d = X.shape[0], k = X.shape[1], i, j
    w_arr = np.zeros(k, dtype=np.float64)
    cdef double[::1] w = w_arr
    col_arr = np.zeros(k, dtype=np.float64)
    cdef double[::1] col_sq = col_arr
    cdef double rho, old, new, delta, max_delta, mag
    cdef int it
    for j in range(k):
        for i in range(d):
            col_sq[j] += X[i, j] * X[i, j]
    for it in range(max_iter):
        max_delta = 0.0
        for j in range(k):
            if col_sq[j] == 0.0:
                continue
            old = w[j]
            rho = col_sq[j] * old
            for i in range(d):
                rho += X[i, j] * resid[i]
            mag = fabs(rho) - lam
            if mag > 0:
                new = (mag if rho > 0 else -mag) / col_sq[j]
            else:
                new = 0.0
            delta = new - old
            if delta != 0.0:
                for i in range(d):
                    resid[i] -= X[i, j] * delta
                w[j] = new
                if fabs(delta) > max_delta:
                    max_delta = fabs(delta)
        if max_delta < tol:
            break
    return w_arr


ctypedef fused real:
    float
    double


def _adam_flat(real[::1] p, real[::1] g, real[::1] m, real[::1] v, double lr, double b1, double b2,
               double eps, double wd, double c1, double c2):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double gi, mi, vi
    for i in range(n):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] = p[i] - lr * ((mi / c1) / (sqrt(vi / c2) + eps) + wd * p[i])


def adam_update(param, grad, m, v, double lr, double b1, double b2, double eps, double wd, int t):
    """In-place Adam step on contiguous arrays of one dtype."""
    _adam_flat(param.reshape(-1), np.ascontiguousarray(grad, dtype=param.dtype).reshape(-1),
               m.reshape(-1), v.reshape(-1), lr, b1, b2, eps, wd, 1.0 - b1 ** t, 1.0 - b2 ** t)
