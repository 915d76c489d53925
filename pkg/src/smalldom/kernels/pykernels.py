"""Reference IRLS kernel for (asymmetric) Huber regression.

This is the behavioural reference: the compiled kernel in _ckernels.pyx
must stay in numerical lockstep with this module (same update order, same
scale estimator, same convergence rule).  Keep the two in sync.

The solved problem is the q-th M-quantile of y given X under a Huber
influence function psi_b, estimated by iteratively reweighted least
squares.  Plain Huber M-regression is the q = 0.5 case.  Each iteration:

* residuals r = y - X beta
* scale s = median(|r|) / 0.6745 (MAD about zero)
* weights w_i = 2 (q 1{r_i > 0} + (1-q) 1{r_i <= 0}) min(1, b s / |r_i|),
  multiplied by the case weights when given
* beta <- weighted least squares solution

Convergence: max_j |delta beta_j| <= rel_tol * max(1, max_j |beta_j|) in
the column-equilibrated parametrization.

The concurrent scale update can cycle at extreme q on strongly
heteroscedastic data (the fit position and the MAD feed back on each
other).  When the plain iteration exhausts max_iter, the kernel switches
to a self-consistent solve: for fixed s the weighted problem is convex
and the inner IRLS converges monotonically, so the scale fixed point
g(s) = MAD(residuals(beta(s))) - s = 0 is located by bisection.  The
solution satisfies the same estimating equation with s equal to the MAD
of its own residuals; only the route to it differs.
"""

from __future__ import annotations

import numpy as np

#: MAD consistency factor for the normal distribution
MAD_NORMAL = 0.6745

#: status codes shared by both backends
CONVERGED = 0
MAX_ITER = 1
PERFECT_FIT = 2
DEGENERATE_SCALE = 3

#: self-consistent phase limits, shared by both backends
BRACKET_STEPS = 64
BISECT_STEPS = 80
INNER_MAX_ITER = 200


#: relative pivot floor of the normal-equations Cholesky
PIVOT_RTOL = 1e-12


def _chol_solve(A, rhs):
    """Solve the SPD system A x = rhs by Cholesky with a relative pivot
    guard; plain LU happily factors numerically singular systems."""
    p = len(rhs)
    L = np.zeros_like(A)
    for j in range(p):
        d0 = A[j, j]
        s = d0 - L[j, :j] @ L[j, :j]
        if not s > PIVOT_RTOL * d0:
            raise np.linalg.LinAlgError("singular normal equations")
        L[j, j] = np.sqrt(s)
        if j + 1 < p:
            L[j + 1:, j] = (A[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    z = np.linalg.solve(L, rhs)
    return np.linalg.solve(L.T, z)


def _wls_solve(Xs, y, w):
    """Weighted least squares via the normal equations."""
    A = (Xs * w[:, None]).T @ Xs
    rhs = Xs.T @ (w * y)
    return _chol_solve(A, rhs)


def _weights(r, q, b, scale, cw):
    abs_r = np.abs(r)
    bscale = b * scale
    with np.errstate(divide="ignore"):
        w = np.where(abs_r <= bscale, 1.0, bscale / abs_r)
    w *= 2.0 * np.where(r > 0.0, q, 1.0 - q)
    if cw is not None:
        w = w * cw
    return w


def _fixed_scale_irls(Xs, y, q, b, cw, bs, scale, rel_tol):
    """Inner IRLS at a frozen scale; convex, monotone.

    Returns (bs, iterations, converged).
    """
    for it in range(1, INNER_MAX_ITER + 1):
        r = y - Xs @ bs
        w = _weights(r, q, b, scale, cw)
        bs_new = _wls_solve(Xs, y, w)
        delta = float(np.max(np.abs(bs_new - bs)))
        ref = max(1.0, float(np.max(np.abs(bs_new))))
        bs = bs_new
        if delta <= rel_tol * ref:
            return bs, it, True
    return bs, INNER_MAX_ITER, False


def irls_huber(X, y, q, b, case_weights=None, beta0=None, rel_tol=1e-8, max_iter=500):
    """Fit the q-th Huber M-quantile of y on X.

    Parameters
    ----------
    X : (n, p) float array
    y : (n,) float array
    q : quantile-like level in (0, 1); 0.5 gives Huber M-regression
    b : Huber tuning constant (> 0)
    case_weights : optional (n,) nonnegative multipliers (survey weights)
    beta0 : optional starting coefficients; defaults to the (case-weighted)
        least squares solution
    rel_tol, max_iter : convergence control

    Returns
    -------
    beta : (p,) coefficients
    scale : final MAD-about-zero scale of the residuals
    iterations : IRLS iterations performed (inner iterations included)
    status : CONVERGED, MAX_ITER, PERFECT_FIT or DEGENERATE_SCALE

    Raises
    ------
    numpy.linalg.LinAlgError
        If the weighted normal equations are singular.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n, p = X.shape
    if not (0.0 < q < 1.0):
        raise ValueError(f"q={q} outside (0, 1)")
    if b <= 0.0:
        raise ValueError(f"b={b} must be positive")

    # column equilibration keeps the normal equations well conditioned
    cs = np.max(np.abs(X), axis=0)
    cs[cs == 0.0] = 1.0
    Xs = X / cs

    cw = None
    if case_weights is not None:
        cw = np.ascontiguousarray(case_weights, dtype=np.float64)
        if (cw < 0).any():
            raise ValueError("case weights must be nonnegative")

    if beta0 is not None:
        bs = np.asarray(beta0, dtype=np.float64) * cs
    else:
        bs = _wls_solve(Xs, y, cw if cw is not None else np.ones(n))

    ymax = max(1.0, float(np.max(np.abs(y))) if n else 1.0)
    perfect_tol = 1e-10 * ymax
    scale_floor = 1e-12 * ymax

    # phase 1: concurrent scale update
    scale = 0.0
    mad_lo = np.inf
    mad_hi = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        r = y - Xs @ bs
        abs_r = np.abs(r)
        scale = float(np.median(abs_r)) / MAD_NORMAL
        if scale <= scale_floor:
            if float(abs_r.max()) <= perfect_tol:
                return bs / cs, 0.0, it, PERFECT_FIT
            return bs / cs, 0.0, it, DEGENERATE_SCALE
        mad_lo = min(mad_lo, scale)
        mad_hi = max(mad_hi, scale)
        w = _weights(r, q, b, scale, cw)
        bs_new = _wls_solve(Xs, y, w)
        delta = float(np.max(np.abs(bs_new - bs)))
        ref = max(1.0, float(np.max(np.abs(bs_new))))
        bs = bs_new
        if delta <= rel_tol * ref:
            r = y - Xs @ bs
            scale = float(np.median(np.abs(r))) / MAD_NORMAL
            return bs / cs, scale, it, CONVERGED

    # phase 2: the concurrent update cycled; solve the scale fixed point
    # g(s) = MAD(residuals(beta(s))) - s by bisection over the cycle range
    total = it

    def g_value(s, bs):
        bs, used, _ = _fixed_scale_irls(Xs, y, q, b, cw, bs, s, rel_tol)
        mad = float(np.median(np.abs(y - Xs @ bs))) / MAD_NORMAL
        return mad - s, bs, used

    lo, hi = mad_lo, mad_hi
    g_lo, bs, used = g_value(lo, bs)
    total += used
    for _ in range(BRACKET_STEPS):
        if g_lo > 0.0:
            break
        hi = lo  # g(lo) <= 0 makes lo a valid upper end
        lo *= 0.5
        if lo <= scale_floor:
            r = y - Xs @ bs
            if float(np.max(np.abs(r))) <= perfect_tol:
                return bs / cs, 0.0, total, PERFECT_FIT
            return bs / cs, 0.0, total, DEGENERATE_SCALE
        g_lo, bs, used = g_value(lo, bs)
        total += used
    else:
        return bs / cs, lo, total, MAX_ITER
    g_hi, bs, used = g_value(hi, bs)
    total += used
    for _ in range(BRACKET_STEPS):
        if g_hi < 0.0:
            break
        hi *= 2.0
        g_hi, bs, used = g_value(hi, bs)
        total += used
    else:
        return bs / cs, hi, total, MAX_ITER

    for _ in range(BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:  # interval at float resolution
            break
        g_mid, bs, used = g_value(mid, bs)
        total += used
        if g_mid > 0.0:
            lo = mid
        else:
            hi = mid

    bs, used, inner_ok = _fixed_scale_irls(Xs, y, q, b, cw, bs, hi, rel_tol)
    total += used
    scale = float(np.median(np.abs(y - Xs @ bs))) / MAD_NORMAL
    return bs / cs, scale, total, CONVERGED if inner_ok else MAX_ITER
