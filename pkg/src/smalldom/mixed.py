"""Two-level linear mixed models for domain estimation.

The working model is y_ij = x_ij' beta + u_i + e_ij with a random domain
intercept u_i ~ N(0, sigma_u^2) and three level-1 variance structures:

* ``homo``  : var(e_ij) = sigma_e^2
* ``by_sc`` : var(e_ij) = sigma_sc^2, one free variance per size class
              (sc = 1 is the reference scale)
* ``wp2``   : var(e_ij) = wp_ij^4 sigma_eps^2 (noise sd proportional to
              the squared number of working persons)

Estimation maximizes the (restricted) likelihood with the overall scale
profiled out analytically; what remains is a search over the variance
ratios, one dimensional for ``homo``/``wp2``.  Predictions for domain
totals add observed y for sampled units and predicted values for the
rest by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .errors import DomainError, FitError
from .frame import Population, Sample

FORMULA_FULL = "full"
FORMULA_REDUCED = "reduced"
VARIANCE_HOMO = "homo"
VARIANCE_BY_SC = "by_sc"
VARIANCE_WP2 = "wp2"
OBSERVED_PLUS_PREDICTED = "observed_plus_predicted"
ALL_PREDICTED = "all_predicted"

_SC_LEVELS = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class ModelSpec:
    """Fixed-effects formula, level-1 variance structure, prediction mode."""

    formula: str = FORMULA_FULL
    variance: str = VARIANCE_HOMO
    prediction: str = OBSERVED_PLUS_PREDICTED

    def __post_init__(self):
        if self.formula not in (FORMULA_FULL, FORMULA_REDUCED):
            raise ValueError(f"unknown formula {self.formula!r}")
        if self.variance not in (VARIANCE_HOMO, VARIANCE_BY_SC, VARIANCE_WP2):
            raise ValueError(f"unknown variance structure {self.variance!r}")
        if self.prediction not in (OBSERVED_PLUS_PREDICTED, ALL_PREDICTED):
            raise ValueError(f"unknown prediction mode {self.prediction!r}")


def design_matrix(tax1, sc, wp, formula: str):
    """Fixed-effects design matrix.

    ``full``    : 1, tax1, sc dummies (sc=1 reference), wp, tax1*wp
    ``reduced`` : 1, tax1, sc dummies
    """
    tax1 = np.asarray(tax1, dtype=np.float64)
    sc = np.asarray(sc)
    wp = np.asarray(wp, dtype=np.float64)
    n = len(tax1)
    cols = [np.ones(n), tax1]
    names = ["const", "tax1"]
    for level in _SC_LEVELS[1:]:
        cols.append((sc == level).astype(np.float64))
        names.append(f"sc{level}")
    if formula == FORMULA_FULL:
        cols.append(wp)
        names.append("wp")
        cols.append(tax1 * wp)
        names.append("tax1_wp")
    elif formula != FORMULA_REDUCED:
        raise ValueError(f"unknown formula {formula!r}")
    return np.column_stack(cols), names


@dataclass
class MixedFit:
    """Fitted two-level model."""

    beta: np.ndarray
    beta_names: list[str]
    sigma2_u: float
    level1: dict
    u_hat: dict
    logL: float
    aic: float
    bic: float
    n_params: int
    boundary: bool
    converged: bool
    criterion: str
    formula: str
    variance: str
    n_obs: int
    sample: Sample | None = field(default=None, repr=False)


class InformationCriteria(NamedTuple):
    aic: float
    bic: float
    log_likelihood: float


def information_criteria(fit: MixedFit) -> InformationCriteria:
    """AIC = -2 logL + 2k, BIC = -2 logL + k ln(n), k = all free parameters."""
    return InformationCriteria(fit.aic, fit.bic, fit.logL)


def gamma_weighted(sigma2_u: float, sigma2_e: float, delta: float) -> float:
    """Shrinkage gamma = sigma_u^2 / (sigma_u^2 + sigma_e^2 delta)."""
    if sigma2_u < 0 or sigma2_e <= 0 or delta <= 0:
        raise ValueError("need sigma2_u >= 0, sigma2_e > 0, delta > 0")
    return sigma2_u / (sigma2_u + sigma2_e * delta)


# ---------------------------------------------------------------------
# profiled (restricted) likelihood machinery
# ---------------------------------------------------------------------

class _LMMData:
    """Domain-sorted views plus reduceat boundaries."""

    def __init__(self, X, y, dom_codes):
        dom_codes = np.asarray(dom_codes, dtype=np.int64)
        order = np.argsort(dom_codes, kind="stable")
        self.X = np.ascontiguousarray(X[order])
        self.y = np.ascontiguousarray(y[order])
        self.dom = dom_codes[order]
        self.starts = np.flatnonzero(np.r_[True, self.dom[1:] != self.dom[:-1]])
        self.dom_ids = self.dom[self.starts]
        self.n, self.p = self.X.shape
        self.n_domains = len(self.starts)
        # column equilibration; resulting shifts of log|X'M^-1 X| are
        # undone when the REML criterion is reported
        cs = np.max(np.abs(self.X), axis=0)
        cs[cs == 0.0] = 1.0
        self.col_scale = cs
        self.Xs = self.X / cs
        self.logdet_shift = 2.0 * float(np.log(cs).sum())


class _Pieces(NamedTuple):
    XtMiX: np.ndarray
    XtMiy: np.ndarray
    ytMiy: float
    logdetM: float
    s0: np.ndarray
    sx: np.ndarray
    sy: np.ndarray


def _pieces(data: _LMMData, lam, tau: float) -> _Pieces:
    """Cross products through M^-1 where M = tau Z Z' + diag(lam).

    Uses the rank-one (Sherman-Morrison) structure of each domain block:
    M_d^-1 = D^-1 - f_d (D^-1 1)(1' D^-1) with f_d = tau / (1 + tau s0_d).
    """
    a = 1.0 / lam
    X, y = data.Xs, data.y
    aX = X * a[:, None]
    ay = y * a
    sx = np.add.reduceat(aX, data.starts, axis=0)
    sy = np.add.reduceat(ay, data.starts)
    s0 = np.add.reduceat(a, data.starts)
    f = tau / (1.0 + tau * s0)
    XtMiX = X.T @ aX - (sx * f[:, None]).T @ sx
    XtMiy = X.T @ ay - sx.T @ (f * sy)
    ytMiy = float(y @ ay - f @ (sy * sy))
    logdetM = float(np.log(lam).sum() + np.log1p(tau * s0).sum())
    return _Pieces(XtMiX, XtMiy, ytMiy, logdetM, s0, sx, sy)


def _neg2loglik(data: _LMMData, lam, tau: float, criterion: str):
    """-2 logL (profiled over the overall scale phi) and the GLS pieces."""
    pc = _pieces(data, lam, tau)
    try:
        beta = np.linalg.solve(pc.XtMiX, pc.XtMiy)
    except np.linalg.LinAlgError:
        raise FitError("rank-deficient design in mixed model fit")
    rss = pc.ytMiy - float(pc.XtMiy @ beta)
    rss = max(rss, 1e-300)
    n, p = data.n, data.p
    if criterion == "ml":
        phi = rss / n
        nll2 = n * (np.log(2.0 * np.pi * phi) + 1.0) + pc.logdetM
    else:
        phi = rss / (n - p)
        sign, logdet_xx = np.linalg.slogdet(pc.XtMiX)
        if sign <= 0:
            raise FitError("rank-deficient design in mixed model fit")
        nll2 = (
            (n - p) * (np.log(2.0 * np.pi * phi) + 1.0)
            + pc.logdetM
            + logdet_xx
            + data.logdet_shift
        )
    return float(nll2), beta, phi, pc


def _fit_ratio_1d(data: _LMMData, lam, criterion: str):
    """Profile over tau for a fixed level-1 pattern lam (homo / wp2)."""

    def nll(tau):
        return _neg2loglik(data, lam, tau, criterion)[0]

    taus = np.concatenate(([0.0], np.logspace(-9, 9, 25)))
    vals = [nll(t) for t in taus]
    i_best = int(np.argmin(vals))
    if i_best == 0:
        # boundary candidate; polish against the smallest interior scan point
        lo, hi = -26.0, np.log(taus[1])
    else:
        lo = np.log(taus[max(i_best - 1, 1)] * 0.5)
        hi = np.log(taus[min(i_best + 1, len(taus) - 1)] * 2.0)
    res = minimize_scalar(lambda t: nll(np.exp(t)), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-10})
    tau_hat, val = float(np.exp(res.x)), float(res.fun)
    if vals[0] <= val:
        tau_hat, val = 0.0, float(vals[0])
    return tau_hat, val, True


def _fit_by_sc(data: _LMMData, sc_sorted, criterion: str, start=None):
    """Profile over tau and the per-size-class variance ratios."""
    sc_sorted = np.asarray(sc_sorted)
    levels = [lvl for lvl in _SC_LEVELS[1:] if (sc_sorted == lvl).any()]
    masks = [(sc_sorted == lvl) for lvl in levels]

    def lam_of(loglam):
        lam = np.ones(data.n)
        for m, ll in zip(masks, loglam):
            lam[m] = np.exp(ll)
        return lam

    def nll_theta(theta):
        tau = np.exp(theta[0])
        return _neg2loglik(data, lam_of(theta[1:]), tau, criterion)[0]

    def nll_theta0(loglam):
        return _neg2loglik(data, lam_of(loglam), 0.0, criterion)[0]

    if start is not None:
        start = np.asarray(start, dtype=np.float64)
        tau0 = max(float(start[0]), 1e-10)
        loglam0 = np.log(np.maximum(start[1:1 + len(levels)], 1e-10))
    else:
        # moment start: level-1 ratios from OLS residual spread by size class
        beta_ols, *_ = np.linalg.lstsq(data.Xs, data.y, rcond=None)
        r = data.y - data.Xs @ beta_ols
        base = float(np.var(r[sc_sorted == 1])) if (sc_sorted == 1).any() else float(np.var(r))
        base = max(base, 1e-12)
        loglam0 = np.array([
            np.log(max(float(np.var(r[m])), 1e-12) / base) for m in masks
        ])
        tau0, _, _ = _fit_ratio_1d(data, lam_of(loglam0), criterion)
        tau0 = max(tau0, 1e-8)

    theta0 = np.concatenate(([np.log(tau0)], loglam0))
    bounds = [(-26.0, 20.0)] + [(-20.0, 20.0)] * len(levels)
    res = minimize(nll_theta, theta0, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": 200, "ftol": 1e-14, "gtol": 1e-10})
    best_theta, best_val = res.x, float(res.fun)
    polish = minimize(nll_theta, best_theta, method="Nelder-Mead",
                      options={"maxiter": 400, "xatol": 1e-10, "fatol": 1e-12})
    if polish.fun < best_val:
        best_theta, best_val = polish.x, float(polish.fun)

    # tau = 0 boundary branch
    res0 = minimize(nll_theta0, best_theta[1:], method="L-BFGS-B",
                    bounds=bounds[1:], options={"maxiter": 200, "ftol": 1e-14})
    if float(res0.fun) < best_val:
        tau_hat = 0.0
        lam_hat = lam_of(res0.x)
        best_val = float(res0.fun)
    else:
        tau_hat = float(np.exp(best_theta[0]))
        lam_hat = lam_of(best_theta[1:])
    lam_levels = {1: 1.0}
    for lvl, m in zip(levels, masks):
        lam_levels[lvl] = float(lam_hat[m][0]) if m.any() else 1.0
    return tau_hat, lam_hat, lam_levels, best_val, bool(np.isfinite(best_val))


def fit_lmm_xy(X, y, dom_codes, domain_labels, variance: str, criterion: str = "ml",
               sc=None, wp=None, beta_names=None, start=None):
    """Matrix-level mixed model fit; see ``fit_lmm`` for the frame wrapper."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if criterion not in ("ml", "reml"):
        raise ValueError(f"criterion must be 'ml' or 'reml', got {criterion!r}")
    n, p = X.shape
    if np.linalg.matrix_rank(X) < p:
        raise FitError("rank-deficient fixed-effects design")
    if len(np.unique(dom_codes)) < 2:
        raise FitError("mixed model needs at least 2 domains")
    data = _LMMData(X, y, dom_codes)
    order = np.argsort(np.asarray(dom_codes, dtype=np.int64), kind="stable")

    if variance == VARIANCE_HOMO:
        lam = np.ones(n)
        tau, nll2, converged = _fit_ratio_1d(data, lam, criterion)
        lam_levels = None
    elif variance == VARIANCE_WP2:
        if wp is None:
            raise FitError("wp2 variance structure needs the wp column")
        lam = (np.asarray(wp, dtype=np.float64) ** 4)[order]
        tau, nll2, converged = _fit_ratio_1d(data, lam, criterion)
        lam_levels = None
    elif variance == VARIANCE_BY_SC:
        if sc is None:
            raise FitError("by_sc variance structure needs the sc column")
        sc_sorted = np.asarray(sc)[order]
        tau, lam, lam_levels, nll2, converged = _fit_by_sc(data, sc_sorted, criterion, start)
    else:
        raise ValueError(f"unknown variance structure {variance!r}")

    nll2, beta_s, phi, pc = _neg2loglik(data, lam, tau, criterion)
    beta = beta_s / data.col_scale
    sigma2_u = phi * tau
    var_y = float(np.var(y))
    boundary = sigma2_u < 1e-8 * max(var_y, 1e-300)

    # BLUP of the domain intercepts: u_d = tau s_r(d) / (1 + tau s0_d)
    sr = pc.sy - pc.sx @ beta_s
    u_vals = tau * sr / (1.0 + tau * pc.s0)
    u_hat = {domain_labels[int(c)]: float(u) for c, u in zip(data.dom_ids, u_vals)}

    if variance == VARIANCE_BY_SC:
        level1 = {"sigma2_sc": {lvl: phi * ratio for lvl, ratio in sorted(lam_levels.items())}}
        n_var_params = 1 + len(lam_levels)  # sigma_u^2 plus one variance per level
    elif variance == VARIANCE_WP2:
        level1 = {"sigma2_eps": phi}
        n_var_params = 2
    else:
        level1 = {"sigma2_e": phi}
        n_var_params = 2
    n_params = p + n_var_params
    logL = -0.5 * nll2
    aic = nll2 + 2.0 * n_params
    bic = nll2 + n_params * np.log(n)
    if beta_names is None:
        beta_names = [f"x{j}" for j in range(p)]
    return MixedFit(
        beta=beta, beta_names=list(beta_names), sigma2_u=float(sigma2_u),
        level1=level1, u_hat=u_hat, logL=float(logL), aic=float(aic),
        bic=float(bic), n_params=int(n_params), boundary=bool(boundary),
        converged=bool(converged), criterion=criterion, formula="custom",
        variance=variance, n_obs=n,
    )


def fit_lmm(sample: Sample, spec: ModelSpec, criterion: str = "ml", start=None) -> MixedFit:
    """Fit the two-level model on a sample.

    Parameters
    ----------
    sample : Sample
    spec : ModelSpec
        Fixed-effects formula and level-1 variance structure.
    criterion : 'ml' or 'reml'
        'ml' is the default so that fits with different fixed parts stay
        comparable through their information criteria.
    start : optional
        Starting values (tau, lam_2..lam_5) for the by_sc search.

    Returns
    -------
    MixedFit
    """
    X, names = design_matrix(sample.tax1, sample.sc, sample.wp, spec.formula)
    fit = fit_lmm_xy(
        X, sample.tto, sample.dom_codes, sample.domains, spec.variance,
        criterion=criterion, sc=sample.sc, wp=sample.wp, beta_names=names,
        start=start,
    )
    fit.formula = spec.formula
    fit.sample = sample
    return fit


# ---------------------------------------------------------------------
# domain total predictions
# ---------------------------------------------------------------------

def _sampled_rows_in(pop: Population, sample: Sample) -> np.ndarray:
    """Rows of ``pop`` that are sampled units (matched by identity or id)."""
    if sample.parent is pop:
        return sample.row_idx
    return np.array([pop.row_of_id(str(u)) for u in sample.ids.tolist()], dtype=np.int64)


def eblup_total(fit: MixedFit, pop: Population, spec: ModelSpec, ind: str) -> float:
    """EBLUP of the domain total of tto.

    In the default prediction mode the observed y of sampled units is kept
    and only unsampled units are predicted by x' beta + u_d; under
    ``all_predicted`` every population unit is predicted.
    """
    rows = pop.domain_rows(ind)
    X_dom, _ = design_matrix(pop.tax1[rows], pop.sc[rows], pop.wp[rows], fit.formula)
    if X_dom.shape[1] != len(fit.beta):
        raise FitError("fit and population design matrices disagree")
    u_d = fit.u_hat.get(ind, 0.0)
    synth = X_dom @ fit.beta + u_d
    if spec.prediction == ALL_PREDICTED:
        return float(synth.sum())
    if fit.sample is None:
        raise FitError("observed_plus_predicted prediction needs the fitted sample")
    sampled = _sampled_rows_in(pop, fit.sample)
    mask = np.zeros(len(pop), dtype=bool)
    mask[sampled] = True
    in_sample = mask[rows]
    obs = float(pop.tto[rows[in_sample]].sum())
    return obs + float(synth[~in_sample].sum())


class _PseudoFit(NamedTuple):
    beta_w: np.ndarray
    gamma: dict
    ybar_w: dict
    xbar_w: dict


def _pseudo_eblup_fit(sample: Sample, formula: str, sigma2_u: float,
                      sigma2_e: float) -> _PseudoFit:
    """Survey-weighted fixed effects and per-domain shrinkage factors."""
    X, _ = design_matrix(sample.tax1, sample.sc, sample.wp, formula)
    y = sample.tto
    w = sample.d
    if (w <= 0).any():
        raise FitError("survey weights must be positive")
    p = X.shape[1]
    A = np.zeros((p, p))
    c = np.zeros(p)
    gamma, ybar_w, xbar_w = {}, {}, {}
    for i_dom, dom in enumerate(sample.domains):
        rows = np.flatnonzero(sample.dom_codes == i_dom)
        if len(rows) == 0:
            continue
        wd = w[rows]
        wt = wd / wd.sum()
        delta = float(wt @ wt)
        g = gamma_weighted(sigma2_u, sigma2_e, delta) if sigma2_u > 0 else 0.0
        xb = wt @ X[rows]
        yb = float(wt @ y[rows])
        Xd = X[rows]
        wX = Xd * wd[:, None]
        A += wX.T @ (Xd - g * xb[None, :])
        c += wX.T @ (y[rows] - g * yb)
        gamma[dom] = g
        ybar_w[dom] = yb
        xbar_w[dom] = xb
    try:
        beta_w = np.linalg.solve(A, c)
    except np.linalg.LinAlgError:
        raise FitError("singular survey-weighted estimating equation")
    return _PseudoFit(beta_w, gamma, ybar_w, xbar_w)


def pseudo_eblup_total(sample: Sample, pop: Population, spec: ModelSpec,
                       variance_source: MixedFit, ind: str) -> float:
    """Survey-weighted (pseudo) EBLUP of the domain total.

    The domain mean is gamma_w ybar_w + (Xbar - gamma_w xbar_w)' beta_w,
    scaled by the domain population size; beta_w solves the survey-weighted
    estimating equation and the variance components are plugged in from an
    unweighted fit (``variance_source``).
    """
    if "sigma2_e" not in variance_source.level1:
        raise FitError("pseudo EBLUP needs a homoscedastic variance source")
    sigma2_e = float(variance_source.level1["sigma2_e"])
    sigma2_u = float(variance_source.sigma2_u)
    key = ("pseudo_eblup", spec.formula, round(sigma2_u, 15), round(sigma2_e, 15))
    pf = sample._cache.get(key)
    if pf is None:
        pf = _pseudo_eblup_fit(sample, spec.formula, sigma2_u, sigma2_e)
        sample._cache[key] = pf
    if ind not in pf.gamma:
        raise DomainError(f"domain {ind!r} has no sampled units")
    rows = pop.domain_rows(ind)
    X_dom, _ = design_matrix(pop.tax1[rows], pop.sc[rows], pop.wp[rows], spec.formula)
    x_tot = X_dom.sum(axis=0)
    N_d = float(len(rows))
    g = pf.gamma[ind]
    return float(N_d * g * pf.ybar_w[ind] + (x_tot - N_d * g * pf.xbar_w[ind]) @ pf.beta_w)
