# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Contract mirrors ``_pykernels``."""
import numpy as np

from libc.math cimport sqrt, fabs, NAN

cdef enum:
    MAXP = 4  # N + 1 for N <= 3

cdef int STATUS_OK = 0
cdef int STATUS_MAXITER = 1
cdef int STATUS_DEGENERATE = 2
cdef int STATUS_ILLCOND = 3
cdef double COND_LIMIT = 1e12


def kalman_track(double[::1] z, unsigned char[::1] has_z, double[::1] t_meas,
                 double[::1] t_target, x0, p0, double t0, double s_b,
                 double s_omega, double sigma2):
    cdef Py_ssize_t n = z.shape[0], k
    x_post_a = np.empty((n, 2))
    p_post_a = np.empty((n, 3))
    prior_a = np.full(n, np.nan)
    innov_a = np.full(n, np.nan)
    bpred_a = np.empty(n)
    vpred_a = np.empty(n)
    cdef double[:, ::1] x_post = x_post_a
    cdef double[:, ::1] p_post = p_post_a
    cdef double[::1] prior00 = prior_a
    cdef double[::1] innov = innov_a
    cdef double[::1] b_pred = bpred_a
    cdef double[::1] var_pred = vpred_a

    cdef double b = x0[0], w = x0[1]
    cdef double p00 = p0[0][0], p01 = p0[0][1], p11 = p0[1][1]
    cdef double t_last = t0, dt, q00, q01, q11, a00, a01, a11, s, k0, k1, nu
    with nogil:
        for k in range(n):
            if has_z[k]:
                dt = t_meas[k] - t_last
                b = b + w * dt
                q00 = s_b * dt + s_omega * dt * dt * dt / 3.0
                q01 = s_omega * dt * dt / 2.0
                q11 = s_omega * dt
                a00 = p00 + 2.0 * dt * p01 + dt * dt * p11 + q00
                a01 = p01 + dt * p11 + q01
                a11 = p11 + q11
                prior00[k] = a00
                s = a00 + sigma2
                k0 = a00 / s
                k1 = a01 / s
                nu = z[k] - b
                innov[k] = nu
                b = b + k0 * nu
                w = w + k1 * nu
                p00 = (1.0 - k0) * a00
                p01 = (1.0 - k0) * a01
                p11 = a11 - k1 * a01
                t_last = t_meas[k]
            x_post[k, 0] = b
            x_post[k, 1] = w
            p_post[k, 0] = p00
            p_post[k, 1] = p01
            p_post[k, 2] = p11
            dt = t_target[k] - t_last
            b_pred[k] = b + w * dt
            var_pred[k] = (p00 + 2.0 * dt * p01 + dt * dt * p11
                           + s_b * dt + s_omega * dt * dt * dt / 3.0)
    return x_post_a, p_post_a, prior_a, innov_a, bpred_a, vpred_a


cdef void _sym_eig_extremes(double[MAXP][MAXP] a_in, int n,
                            double* lo, double* hi) noexcept nogil:
    # cyclic Jacobi on a copy
    cdef double a[MAXP][MAXP]
    cdef int i, j, p, q, sweep
    cdef double off, theta, t, c, s, app, aqq, apq, akp, akq
    for i in range(n):
        for j in range(n):
            a[i][j] = a_in[i][j]
    for sweep in range(60):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += a[p][q] * a[p][q]
        if off == 0.0:
            break
        for p in range(n):
            for q in range(p + 1, n):
                apq = a[p][q]
                if apq == 0.0:
                    continue
                app = a[p][p]
                aqq = a[q][q]
                theta = (aqq - app) / (2.0 * apq)
                if theta >= 0:
                    t = 1.0 / (theta + sqrt(1.0 + theta * theta))
                else:
                    t = -1.0 / (-theta + sqrt(1.0 + theta * theta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = t * c
                for i in range(n):
                    akp = a[i][p]
                    akq = a[i][q]
                    a[i][p] = c * akp - s * akq
                    a[i][q] = s * akp + c * akq
                for i in range(n):
                    akp = a[p][i]
                    akq = a[q][i]
                    a[p][i] = c * akp - s * akq
                    a[q][i] = s * akp + c * akq
                a[p][q] = 0.0
                a[q][p] = 0.0
    lo[0] = a[0][0]
    hi[0] = a[0][0]
    for i in range(1, n):
        if a[i][i] < lo[0]:
            lo[0] = a[i][i]
        if a[i][i] > hi[0]:
            hi[0] = a[i][i]


cdef int _cholesky(double[MAXP][MAXP] a, int n, double[MAXP][MAXP] l) noexcept nogil:
    cdef int i, j, k
    cdef double s
    for i in range(n):
        for j in range(n):
            l[i][j] = 0.0
    for j in range(n):
        s = a[j][j]
        for k in range(j):
            s -= l[j][k] * l[j][k]
        if s <= 0.0:
            return -1
        l[j][j] = sqrt(s)
        for i in range(j + 1, n):
            s = a[i][j]
            for k in range(j):
                s -= l[i][k] * l[j][k]
            l[i][j] = s / l[j][j]
    return 0


cdef void _chol_solve(double[MAXP][MAXP] l, int n, double* b) noexcept nogil:
    cdef int i, k
    for i in range(n):
        for k in range(i):
            b[i] -= l[i][k] * b[k]
        b[i] /= l[i][i]
    for i in range(n - 1, -1, -1):
        for k in range(i + 1, n):
            b[i] -= l[k][i] * b[k]
        b[i] /= l[i][i]


cdef int _normal_eqs(const double[:, ::1] anchors, const double[::1] const_,
                     const double[::1] sign, const double[::1] w,
                     const double[::1] meas, double* theta, int n_dim,
                     double[MAXP][MAXP] f, double* rhs, double* rnorm) noexcept nogil:
    cdef Py_ssize_t k, n_rows = meas.shape[0]
    cdef int i, j, np_ = n_dim + 1
    cdef double d, r
    cdef double g[MAXP]
    cdef double diff[MAXP]
    for i in range(np_):
        rhs[i] = 0.0
        for j in range(np_):
            f[i][j] = 0.0
    rnorm[0] = 0.0
    for k in range(n_rows):
        d = 0.0
        for i in range(n_dim):
            diff[i] = anchors[k, i] - theta[i]
            d += diff[i] * diff[i]
        d = sqrt(d)
        if d == 0.0:
            return -1
        for i in range(n_dim):
            g[i] = -diff[i] / d
        g[n_dim] = sign[k]
        r = meas[k] - (d + const_[k] + sign[k] * theta[n_dim])
        rnorm[0] += r * r
        for i in range(np_):
            rhs[i] += g[i] * w[k] * r
            for j in range(np_):
                f[i][j] += g[i] * w[k] * g[j]
    rnorm[0] = sqrt(rnorm[0])
    return 0


cdef int _check_cond(double[MAXP][MAXP] f, int n) noexcept nogil:
    cdef double lo, hi
    _sym_eig_extremes(f, n, &lo, &hi)
    if lo <= 0.0 or hi > COND_LIMIT * lo:
        return -1
    return 0


cdef void _solve_one(const double[:, ::1] anchors, const double[::1] const_,
                     const double[::1] sign, const double[::1] w,
                     const double[::1] meas, double* theta, int n_dim,
                     int max_iter, double tol, double[:, ::1] cov,
                     long long* iters, double* resid, long long* status) noexcept nogil:
    cdef int np_ = n_dim + 1, it, i, j, k
    cdef double f[MAXP][MAXP]
    cdef double l[MAXP][MAXP]
    cdef double rhs[MAXP]
    cdef double e[MAXP]
    cdef double rnorm, step_sq
    iters[0] = 0
    status[0] = STATUS_MAXITER
    resid[0] = NAN
    for it in range(max_iter):
        if _normal_eqs(anchors, const_, sign, w, meas, theta, n_dim, f, rhs, &rnorm) != 0:
            status[0] = STATUS_DEGENERATE
            return
        if _check_cond(f, np_) != 0 or _cholesky(f, np_, l) != 0:
            status[0] = STATUS_ILLCOND
            return
        _chol_solve(l, np_, rhs)
        step_sq = 0.0
        for i in range(np_):
            theta[i] += rhs[i]
            step_sq += rhs[i] * rhs[i]
        iters[0] += 1
        if sqrt(step_sq) < tol:
            status[0] = STATUS_OK
            break

    if _normal_eqs(anchors, const_, sign, w, meas, theta, n_dim, f, rhs, &rnorm) != 0:
        status[0] = STATUS_DEGENERATE
        return
    resid[0] = rnorm
    if _check_cond(f, np_) != 0 or _cholesky(f, np_, l) != 0:
        status[0] = STATUS_ILLCOND
        return
    # covariance = F^-1, column by column from the factorization
    for j in range(np_):
        for i in range(np_):
            e[i] = 1.0 if i == j else 0.0
        _chol_solve(l, np_, e)
        for i in range(np_):
            cov[i, j] = e[i]


def gauss_newton_batch(anchors, offsets, sign, w, meas, theta0, int max_iter, double tol):
    cdef double[:, :, ::1] a_v = np.ascontiguousarray(anchors, dtype=np.float64)
    cdef double[:, ::1] c_v = np.ascontiguousarray(offsets, dtype=np.float64)
    cdef double[::1] s_v = np.ascontiguousarray(sign, dtype=np.float64)
    cdef double[:, ::1] w_v = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[:, ::1] m_v = np.ascontiguousarray(meas, dtype=np.float64)
    cdef Py_ssize_t n_batch = a_v.shape[0], t
    cdef int n_dim = a_v.shape[2], i
    if n_dim + 1 > MAXP:
        raise ValueError("at most 3 spatial dimensions supported")
    theta_a = np.array(theta0, dtype=np.float64, order="C", copy=True)
    cov_a = np.full((n_batch, n_dim + 1, n_dim + 1), np.nan)
    iters_a = np.zeros(n_batch, dtype=np.int64)
    resid_a = np.full(n_batch, np.nan)
    status_a = np.zeros(n_batch, dtype=np.int64)
    cdef double[:, ::1] th = theta_a
    cdef double[:, :, ::1] cv = cov_a
    cdef long long[::1] it_v = iters_a
    cdef double[::1] r_v = resid_a
    cdef long long[::1] st_v = status_a
    with nogil:
        for t in range(n_batch):
            _solve_one(a_v[t], c_v[t], s_v, w_v[t], m_v[t], &th[t, 0], n_dim,
                       max_iter, tol, cv[t], &it_v[t], &r_v[t], &st_v[t])
    return theta_a, cov_a, iters_a, resid_a, status_a
