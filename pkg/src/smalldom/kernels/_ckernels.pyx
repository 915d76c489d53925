# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled IRLS kernel for (asymmetric) Huber regression.

Numerical lockstep contract: pykernels.irls_huber is the behavioural
reference; this module implements the same update order, scale estimator,
convergence rule and self-consistent fallback.  Differences are limited
to floating point summation order inside the weighted least squares
accumulation.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()

cdef double MAD_NORMAL = 0.6745
cdef double PIVOT_RTOL = 1e-12

cdef enum _Status:
    _CONVERGED = 0
    _MAX_ITER = 1
    _PERFECT_FIT = 2
    _DEGENERATE_SCALE = 3

CONVERGED = _CONVERGED
MAX_ITER = _MAX_ITER
PERFECT_FIT = _PERFECT_FIT
DEGENERATE_SCALE = _DEGENERATE_SCALE

cdef enum _Limits:
    BRACKET_STEPS = 64
    BISECT_STEPS = 80
    INNER_MAX_ITER = 200


cdef double _quickselect(double* a, Py_ssize_t n, Py_ssize_t k) noexcept nogil:
    """k-th (0-based) order statistic; destroys the buffer."""
    cdef Py_ssize_t lo = 0, hi = n - 1
    cdef Py_ssize_t i, j, mid
    cdef double pivot, tmp
    while lo < hi:
        mid = lo + (hi - lo) // 2
        # median-of-three pivot, moved to position lo
        if a[mid] < a[lo]:
            tmp = a[lo]; a[lo] = a[mid]; a[mid] = tmp
        if a[hi] < a[lo]:
            tmp = a[lo]; a[lo] = a[hi]; a[hi] = tmp
        if a[hi] < a[mid]:
            tmp = a[mid]; a[mid] = a[hi]; a[hi] = tmp
        pivot = a[mid]
        i = lo
        j = hi
        while i <= j:
            while a[i] < pivot:
                i += 1
            while a[j] > pivot:
                j -= 1
            if i <= j:
                tmp = a[i]; a[i] = a[j]; a[j] = tmp
                i += 1
                j -= 1
        if k <= j:
            hi = j
        elif k >= i:
            lo = i
        else:
            return a[k]
    return a[k]


cdef double _median_abs(double* buf, Py_ssize_t n) noexcept nogil:
    """Median of buf[0..n); buf is destroyed."""
    cdef Py_ssize_t k = n // 2
    cdef double hi_val, lo_val
    cdef Py_ssize_t i
    if n & 1:
        return _quickselect(buf, n, k)
    lo_val = _quickselect(buf, n, k - 1)
    # after selection, elements right of k-1 are >= lo_val
    hi_val = buf[k]
    for i in range(k + 1, n):
        if buf[i] < hi_val:
            hi_val = buf[i]
    return 0.5 * (lo_val + hi_val)


cdef int _cholesky(double* A, Py_ssize_t p) noexcept nogil:
    """In-place lower Cholesky of a symmetric p x p matrix (row major).

    Returns 0 on success, -1 when a pivot falls below the relative floor
    (the matrix is numerically singular).
    """
    cdef Py_ssize_t i, j, k
    cdef double s, d0
    for j in range(p):
        d0 = A[j * p + j]
        s = d0
        for k in range(j):
            s -= A[j * p + k] * A[j * p + k]
        if not s > PIVOT_RTOL * d0:
            return -1
        A[j * p + j] = sqrt(s)
        for i in range(j + 1, p):
            s = A[i * p + j]
            for k in range(j):
                s -= A[i * p + k] * A[j * p + k]
            A[i * p + j] = s / A[j * p + j]
    return 0


cdef void _chol_solve(double* L, double* x, Py_ssize_t p) noexcept nogil:
    """Solve L L' x = b in place (x holds b on entry)."""
    cdef Py_ssize_t i, k
    cdef double s
    for i in range(p):
        s = x[i]
        for k in range(i):
            s -= L[i * p + k] * x[k]
        x[i] = s / L[i * p + i]
    for i in range(p - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, p):
            s -= L[k * p + i] * x[k]
        x[i] = s / L[i * p + i]


cdef int _wls(double[:, ::1] Xs, double[::1] y, double* w, double* A,
              double* rhs, double* out, Py_ssize_t n, Py_ssize_t p) noexcept nogil:
    """Weighted least squares through the normal equations."""
    cdef Py_ssize_t i, j, k
    cdef double wi, xij
    for j in range(p):
        rhs[j] = 0.0
        for k in range(p):
            A[j * p + k] = 0.0
    for i in range(n):
        wi = w[i]
        if wi == 0.0:
            continue
        for j in range(p):
            xij = wi * Xs[i, j]
            rhs[j] += xij * y[i]
            for k in range(j, p):
                A[j * p + k] += xij * Xs[i, k]
    for j in range(p):
        for k in range(j):
            A[j * p + k] = A[k * p + j]
    if _cholesky(A, p) != 0:
        return -1
    for j in range(p):
        out[j] = rhs[j]
    _chol_solve(A, out, p)
    return 0


cdef void _fill_weights(double[::1] r_v, double[::1] w_v, double q, double b,
                        double scale, bint has_cw, double[::1] cw_v,
                        Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef double absr, hw, bscale = b * scale
    for i in range(n):
        absr = fabs(r_v[i])
        hw = 1.0 if absr <= bscale else bscale / absr
        hw *= 2.0 * (q if r_v[i] > 0.0 else 1.0 - q)
        if has_cw:
            hw *= cw_v[i]
        w_v[i] = hw


cdef double _residual_mad(double[:, ::1] Xs_v, double[::1] y_v, double[::1] bs_v,
                          double[::1] r_v, double[::1] buf_v,
                          Py_ssize_t n, Py_ssize_t p) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double tmp
    for i in range(n):
        tmp = y_v[i]
        for j in range(p):
            tmp -= Xs_v[i, j] * bs_v[j]
        r_v[i] = tmp
        buf_v[i] = fabs(tmp)
    return _median_abs(&buf_v[0], n) / MAD_NORMAL


cdef int _inner_irls(double[:, ::1] Xs_v, double[::1] y_v, double q, double b,
                     bint has_cw, double[::1] cw_v, double[::1] bs_v,
                     double[::1] bs_new_v, double[::1] r_v, double[::1] w_v,
                     double* A, double* rhs, double scale, double rel_tol,
                     Py_ssize_t n, Py_ssize_t p, int* used) noexcept nogil:
    """IRLS at a frozen scale.  1 converged, 0 max-iter, -1 singular."""
    cdef Py_ssize_t i, j
    cdef int it
    cdef double tmp, delta, ref
    for it in range(1, INNER_MAX_ITER + 1):
        for i in range(n):
            tmp = y_v[i]
            for j in range(p):
                tmp -= Xs_v[i, j] * bs_v[j]
            r_v[i] = tmp
        _fill_weights(r_v, w_v, q, b, scale, has_cw, cw_v, n)
        if _wls(Xs_v, y_v, &w_v[0], A, rhs, &bs_new_v[0], n, p) != 0:
            used[0] = it
            return -1
        delta = 0.0
        ref = 1.0
        for j in range(p):
            if fabs(bs_new_v[j] - bs_v[j]) > delta:
                delta = fabs(bs_new_v[j] - bs_v[j])
            if fabs(bs_new_v[j]) > ref:
                ref = fabs(bs_new_v[j])
            bs_v[j] = bs_new_v[j]
        if delta <= rel_tol * ref:
            used[0] = it
            return 1
    used[0] = INNER_MAX_ITER
    return 0


def irls_huber(X, y, double q, double b, case_weights=None, beta0=None,
               double rel_tol=1e-8, int max_iter=500):
    """Compiled twin of pykernels.irls_huber; same signature and semantics."""
    cdef cnp.ndarray[double, ndim=2, mode="c"] Xa = np.ascontiguousarray(X, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] ya = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = Xa.shape[0]
    cdef Py_ssize_t p = Xa.shape[1]
    if not (0.0 < q < 1.0):
        raise ValueError(f"q={q} outside (0, 1)")
    if b <= 0.0:
        raise ValueError(f"b={b} must be positive")

    cdef cnp.ndarray[double, ndim=1, mode="c"] cw_arr
    cdef bint has_cw = case_weights is not None
    if has_cw:
        cw_arr = np.ascontiguousarray(case_weights, dtype=np.float64)
        if (np.asarray(cw_arr) < 0).any():
            raise ValueError("case weights must be nonnegative")
    else:
        cw_arr = np.empty(0, dtype=np.float64)

    # column equilibration
    cdef cnp.ndarray[double, ndim=1, mode="c"] cs = np.max(np.abs(Xa), axis=0)
    cs[cs == 0.0] = 1.0
    cdef cnp.ndarray[double, ndim=2, mode="c"] Xs = Xa / cs

    cdef cnp.ndarray[double, ndim=1, mode="c"] bs
    if beta0 is not None:
        bs = np.asarray(beta0, dtype=np.float64) * cs
    else:
        bs = np.empty(p, dtype=np.float64)

    cdef cnp.ndarray[double, ndim=1, mode="c"] r = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] w = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] buf = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] A = np.empty(p * p, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] rhs = np.empty(p, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] bs_new = np.empty(p, dtype=np.float64)

    cdef double[:, ::1] Xs_v = Xs
    cdef double[::1] y_v = ya
    cdef double[::1] bs_v = bs
    cdef double[::1] bs_new_v = bs_new
    cdef double[::1] r_v = r
    cdef double[::1] w_v = w
    cdef double[::1] buf_v = buf
    cdef double[::1] A_v = A
    cdef double[::1] rhs_v = rhs
    cdef double[::1] cw_v = cw_arr

    cdef Py_ssize_t i, j
    cdef double ymax = 1.0, scale = 0.0, delta, ref, tmp
    cdef double mad_lo, mad_hi, lo, hi, mid, g_lo, g_hi, g_mid, mad
    cdef int it = 0, status = _MAX_ITER, rc = 0, total = 0, used = 0, step
    cdef int inner_rc = 0
    cdef bint perfect, bracketed

    for i in range(n):
        if fabs(y_v[i]) > ymax:
            ymax = fabs(y_v[i])
    cdef double perfect_tol = 1e-10 * ymax
    cdef double scale_floor = 1e-12 * ymax

    if beta0 is None:
        with nogil:
            if has_cw:
                for i in range(n):
                    w_v[i] = cw_v[i]
            else:
                for i in range(n):
                    w_v[i] = 1.0
            rc = _wls(Xs_v, y_v, &w_v[0], &A_v[0], &rhs_v[0], &bs_v[0], n, p)
        if rc != 0:
            raise np.linalg.LinAlgError("singular normal equations")

    # phase 1: concurrent scale update
    mad_lo = np.inf
    mad_hi = 0.0
    with nogil:
        while it < max_iter:
            it += 1
            for i in range(n):
                tmp = y_v[i]
                for j in range(p):
                    tmp -= Xs_v[i, j] * bs_v[j]
                r_v[i] = tmp
                buf_v[i] = fabs(tmp)
            scale = _median_abs(&buf_v[0], n) / MAD_NORMAL
            if scale <= scale_floor:
                perfect = True
                for i in range(n):
                    if fabs(r_v[i]) > perfect_tol:
                        perfect = False
                        break
                status = _PERFECT_FIT if perfect else _DEGENERATE_SCALE
                scale = 0.0
                break
            if scale < mad_lo:
                mad_lo = scale
            if scale > mad_hi:
                mad_hi = scale
            _fill_weights(r_v, w_v, q, b, scale, has_cw, cw_v, n)
            rc = _wls(Xs_v, y_v, &w_v[0], &A_v[0], &rhs_v[0], &bs_new_v[0], n, p)
            if rc != 0:
                break
            delta = 0.0
            ref = 1.0
            for j in range(p):
                if fabs(bs_new_v[j] - bs_v[j]) > delta:
                    delta = fabs(bs_new_v[j] - bs_v[j])
                if fabs(bs_new_v[j]) > ref:
                    ref = fabs(bs_new_v[j])
                bs_v[j] = bs_new_v[j]
            if delta <= rel_tol * ref:
                status = _CONVERGED
                scale = _residual_mad(Xs_v, y_v, bs_v, r_v, buf_v, n, p)
                break

    if rc != 0:
        raise np.linalg.LinAlgError("singular normal equations")
    if status != _MAX_ITER:
        return bs / cs, scale, it, status

    # phase 2: solve the scale fixed point g(s) = MAD(resid(beta(s))) - s
    total = it
    with nogil:
        lo = mad_lo
        hi = mad_hi
        inner_rc = _inner_irls(Xs_v, y_v, q, b, has_cw, cw_v, bs_v, bs_new_v,
                               r_v, w_v, &A_v[0], &rhs_v[0], lo, rel_tol, n, p, &used)
        total += used
        if inner_rc >= 0:
            g_lo = _residual_mad(Xs_v, y_v, bs_v, r_v, buf_v, n, p) - lo
            bracketed = False
            for step in range(BRACKET_STEPS):
                if g_lo > 0.0:
                    bracketed = True
                    break
                hi = lo  # g(lo) <= 0 makes lo a valid upper end
                lo *= 0.5
                if lo <= scale_floor:
                    perfect = True
                    for i in range(n):
                        if fabs(r_v[i]) > perfect_tol:
                            perfect = False
                            break
                    status = _PERFECT_FIT if perfect else _DEGENERATE_SCALE
                    scale = 0.0
                    break
                inner_rc = _inner_irls(Xs_v, y_v, q, b, has_cw, cw_v, bs_v,
                                       bs_new_v, r_v, w_v, &A_v[0], &rhs_v[0],
                                       lo, rel_tol, n, p, &used)
                total += used
                if inner_rc < 0:
                    break
                g_lo = _residual_mad(Xs_v, y_v, bs_v, r_v, buf_v, n, p) - lo
            if status == _MAX_ITER and inner_rc >= 0 and bracketed:
                inner_rc = _inner_irls(Xs_v, y_v, q, b, has_cw, cw_v, bs_v,
                                       bs_new_v, r_v, w_v, &A_v[0], &rhs_v[0],
                                       hi, rel_tol, n, p, &used)
                total += used
                if inner_rc >= 0:
                    g_hi = _residual_mad(Xs_v, y_v, bs_v, r_v, buf_v, n, p) - hi
                    bracketed = False
                    for step in range(BRACKET_STEPS):
                        if g_hi < 0.0:
                            bracketed = True
                            break
                        hi *= 2.0
                        inner_rc = _inner_irls(Xs_v, y_v, q, b, has_cw, cw_v,
                                               bs_v, bs_new_v, r_v, w_v,
                                               &A_v[0], &rhs_v[0], hi, rel_tol,
                                               n, p, &used)
                        total += used
                        if inner_rc < 0:
                            break
                        g_hi = _residual_mad(Xs_v, y_v, bs_v, r_v, buf_v, n, p) - hi
                    if inner_rc >= 0 and bracketed:
                        for step in range(BISECT_STEPS):
                            mid = 0.5 * (lo + hi)
                            if mid <= lo or mid >= hi:  # float resolution
                                break
                            inner_rc = _inner_irls(Xs_v, y_v, q, b, has_cw,
                                                   cw_v, bs_v, bs_new_v, r_v,
                                                   w_v, &A_v[0], &rhs_v[0],
                                                   mid, rel_tol, n, p, &used)
                            total += used
                            if inner_rc < 0:
                                break
                            g_mid = _residual_mad(Xs_v, y_v, bs_v, r_v, buf_v, n, p) - mid
                            if g_mid > 0.0:
                                lo = mid
                            else:
                                hi = mid
                        if inner_rc >= 0:
                            inner_rc = _inner_irls(Xs_v, y_v, q, b, has_cw,
                                                   cw_v, bs_v, bs_new_v, r_v,
                                                   w_v, &A_v[0], &rhs_v[0],
                                                   hi, rel_tol, n, p, &used)
                            total += used
                            if inner_rc >= 0:
                                scale = _residual_mad(Xs_v, y_v, bs_v, r_v,
                                                      buf_v, n, p)
                                status = _CONVERGED if inner_rc == 1 else _MAX_ITER

    if inner_rc < 0:
        raise np.linalg.LinAlgError("singular normal equations")
    return bs / cs, scale, total, status
