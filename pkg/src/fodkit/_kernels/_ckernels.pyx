# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; same contracts as ``_pykernels``.

The NNLS kernel keeps a QR factorization of the passive columns and updates
it with Givens rotations when a column enters or leaves, so each active-set
change costs O(m^2) instead of a fresh factorization.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, hypot, sqrt, INFINITY
from scipy.linalg.cython_blas cimport dgemv

cnp.import_array()


cdef struct QR:
    int m
    int k
    double* Qt      # m x m, row-major; rows of Q^T
    double* R       # m x m, R[i * m + c]
    double* qtf     # Q^T f
    int* P          # passive column indices in factor order


cdef inline void _rot(double* x, double* y, int n, int stride, double c, double s) noexcept nogil:
    cdef int i
    cdef double a, b
    for i in range(n):
        a = x[i * stride]
        b = y[i * stride]
        x[i * stride] = c * a + s * b
        y[i * stride] = -s * a + c * b


cdef int _add_col(QR* f, const double[:, ::1] E, int j, double* v) noexcept nogil:
    """Append column j; returns 0 if it is numerically dependent."""
    cdef int m = f.m, k = f.k, i, l
    cdef double acc, r, c, s, norm = 0.0
    for i in range(m):
        acc = 0.0
        for l in range(m):
            acc += f.Qt[i * m + l] * E[l, j]
        v[i] = acc
        norm += E[i, j] * E[i, j]
    if k >= m:
        return 0
    i = m - 1
    while i > k:
        if v[i] != 0.0:
            r = hypot(v[i - 1], v[i])
            c = v[i - 1] / r
            s = v[i] / r
            v[i - 1] = r
            v[i] = 0.0
            _rot(&f.Qt[(i - 1) * m], &f.Qt[i * m], m, 1, c, s)
            _rot(&f.qtf[i - 1], &f.qtf[i], 1, 1, c, s)
        i -= 1
    if fabs(v[k]) <= 1e-12 * (sqrt(norm) + 1e-300):
        # undo is unnecessary: rotations only mixed rows >= k, which carry no R entries
        return 0
    for i in range(k + 1):
        f.R[i * m + k] = v[i]
    for i in range(k + 1, m):
        f.R[i * m + k] = 0.0
    f.P[k] = j
    f.k = k + 1
    return 1


cdef void _del_col(QR* f, int p) noexcept nogil:
    cdef int m = f.m, k = f.k, i, c
    cdef double a, b, r, cs, sn
    for c in range(p, k - 1):
        f.P[c] = f.P[c + 1]
        for i in range(m):
            f.R[i * m + c] = f.R[i * m + c + 1]
    k -= 1
    f.k = k
    for i in range(m):
        f.R[i * m + k] = 0.0
    for c in range(p, k):
        a = f.R[c * m + c]
        b = f.R[(c + 1) * m + c]
        if b == 0.0:
            continue
        r = hypot(a, b)
        cs = a / r
        sn = b / r
        _rot(&f.R[c * m + c], &f.R[(c + 1) * m + c], k - c, 1, cs, sn)
        f.R[(c + 1) * m + c] = 0.0
        _rot(&f.Qt[c * m], &f.Qt[(c + 1) * m], m, 1, cs, sn)
        _rot(&f.qtf[c], &f.qtf[c + 1], 1, 1, cs, sn)


cdef void _solve(QR* f, double* z) noexcept nogil:
    cdef int m = f.m, k = f.k, i, c
    cdef double acc
    i = k - 1
    while i >= 0:
        acc = f.qtf[i]
        for c in range(i + 1, k):
            acc -= f.R[i * m + c] * z[c]
        z[i] = acc / f.R[i * m + i]
        i -= 1


cdef void _gradient(QR* f, const double[:, ::1] E, double* r, double* w) noexcept nogil:
    """w = E^T r with r = Q[:, k:] (Q^T f)[k:], the current residual."""
    cdef int m = f.m, n = E.shape[1], i, l
    cdef double one = 1.0, zero = 0.0
    cdef int inc = 1
    cdef char trans = b'N'
    for l in range(m):
        r[l] = 0.0
    for i in range(f.k, m):
        for l in range(m):
            r[l] += f.Qt[i * m + l] * f.qtf[i]
    # E is C-ordered (m x n): as a Fortran array it is E^T with shape (n, m)
    dgemv(&trans, &n, &m, &one, <double*>&E[0, 0], &n, r, &inc, &zero, w, &inc)


def nnls(E, f, int max_iter=500, double tol=1e-12, init_passive=None):
    """Lawson-Hanson active-set NNLS: min ||E mu - f|| subject to mu >= 0.

    ``init_passive`` optionally warm-starts the passive set. Returns
    ``(mu, iterations, converged)``.
    """
    cdef double[:, ::1] Ev = np.ascontiguousarray(E, dtype=np.float64)
    cdef double[::1] fv = np.ascontiguousarray(f, dtype=np.float64)
    cdef int m = Ev.shape[0], n = Ev.shape[1]
    mu_arr = np.zeros(n)
    cdef double[::1] mu = mu_arr
    cdef double[::1] w = np.zeros(n)
    cdef double[::1] r = np.zeros(m)
    cdef double[::1] v = np.zeros(m)
    cdef double[::1] z = np.zeros(m + 1)
    cdef double[::1] Qt = np.eye(m).ravel()
    cdef double[::1] Rm = np.zeros(m * m)
    cdef double[::1] qtf = np.array(fv, copy=True)
    cdef int[::1] P = np.zeros(m + 1, dtype=np.int32)
    cdef char[::1] passive = np.zeros(n, dtype=np.int8)
    cdef char[::1] blocked = np.zeros(n, dtype=np.int8)
    cdef int[::1] init
    cdef int n_init = 0
    if init_passive is not None:
        init = np.ascontiguousarray(np.unique(init_passive), dtype=np.int32)
        n_init = init.shape[0]
    cdef QR fac
    fac.m = m
    fac.k = 0
    fac.Qt = &Qt[0]
    fac.R = &Rm[0]
    fac.qtf = &qtf[0]
    fac.P = &P[0]
    cdef int it = 0, t, j, c, k, jmin, all_pos
    cdef double best, alpha, ratio, cur
    cdef bint converged = True

    with nogil:
        # warm start: keep the initial columns whose LS coefficients stay positive
        for c in range(n_init):
            j = init[c]
            if 0 <= j < n and not passive[j]:
                if _add_col(&fac, Ev, j, &v[0]):
                    passive[j] = 1
        while fac.k > 0:
            it += 1
            _solve(&fac, &z[0])
            all_pos = 1
            c = fac.k - 1
            while c >= 0:
                if z[c] <= 0.0:
                    passive[fac.P[c]] = 0
                    _del_col(&fac, c)
                    all_pos = 0
                c -= 1
            if all_pos:
                for c in range(fac.k):
                    mu[fac.P[c]] = z[c]
                break

        _gradient(&fac, Ev, &r[0], &w[0])
        while True:
            t = -1
            best = tol
            if fac.k < m:
                for j in range(n):
                    if not passive[j] and not blocked[j] and w[j] > best:
                        best = w[j]
                        t = j
            if t < 0:
                break
            if not _add_col(&fac, Ev, t, &v[0]):
                blocked[t] = 1
                continue
            passive[t] = 1
            _solve(&fac, &z[0])
            if z[fac.k - 1] <= 0.0:
                # entering column cannot move off zero: roundoff guard
                passive[t] = 0
                _del_col(&fac, fac.k - 1)
                blocked[t] = 1
                continue
            while True:
                it += 1
                if it > max_iter:
                    converged = False
                    break
                k = fac.k
                all_pos = 1
                for c in range(k):
                    if z[c] <= 0.0:
                        all_pos = 0
                        break
                if all_pos:
                    for c in range(k):
                        mu[fac.P[c]] = z[c]
                    for j in range(n):
                        blocked[j] = 0
                    break
                alpha = INFINITY
                jmin = -1
                for c in range(k):
                    if z[c] <= 0.0:
                        j = fac.P[c]
                        ratio = mu[j] / (mu[j] - z[c])
                        if ratio < alpha:
                            alpha = ratio
                            jmin = c
                for c in range(k):
                    j = fac.P[c]
                    mu[j] = mu[j] + alpha * (z[c] - mu[j])
                c = k - 1
                while c >= 0:
                    j = fac.P[c]
                    cur = mu[j]
                    if c == jmin or cur <= 1e-300 or (z[c] <= 0.0 and cur <= fabs(z[c]) * 1e-15):
                        mu[j] = 0.0
                        passive[j] = 0
                        _del_col(&fac, c)
                    c -= 1
                _solve(&fac, &z[0])
            if not converged:
                break
            _gradient(&fac, Ev, &r[0], &w[0])
    return mu_arr, it, bool(converged)


def local_maxima(values, neighbor_table):
    """Indices of positive vertices not exceeded by any neighbor (lowest index wins ties)."""
    cdef double[::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef cnp.intp_t[:, ::1] nb = np.ascontiguousarray(neighbor_table, dtype=np.intp)
    cdef Py_ssize_t n = nb.shape[0], width = nb.shape[1], i, k, j
    out = np.empty(n, dtype=np.intp)
    cdef cnp.intp_t[::1] o = out
    cdef Py_ssize_t count = 0
    cdef bint ok
    with nogil:
        for i in range(n):
            if not v[i] > 0.0:
                continue
            ok = True
            for k in range(width):
                j = nb[i, k]
                if j < 0:
                    continue
                if v[j] > v[i] or (v[j] == v[i] and j < i):
                    ok = False
                    break
            if ok:
                o[count] = i
                count += 1
    return out[:count].copy()
