"""M-quantile small-domain estimators.

A grid of Huber M-quantile fits locates each sampled unit's q-coefficient
(the level q at which the fitted M-quantile plane passes through the
unit).  Domain averages of these coefficients drive the estimators:

* naive:     observed y plus x' beta(q-bar_d) for unsampled units
* CD:        naive plus an (N_d - n_d)/n_d scaled raw-residual total
* WR:        naive plus the same term with residuals passed through a
             second, wider Huber function (bias-variance compromise)
* weighted:  survey-weighted variants of naive and CD

The asymmetric Huber criterion weights positive residuals by 2q and
non-positive ones by 2(1-q); q = 0.5 reproduces plain M-regression.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConvergenceError, DegenerateScaleError, DomainError, FitError
from .frame import Population, Sample
from .mixed import ModelSpec, _sampled_rows_in, design_matrix
from .robust import HuberConfig, huber_psi

#: default q grid: 0.001, 0.01 .. 0.99 by 0.01, 0.999
DEFAULT_GRID = tuple([0.001] + [round(0.01 * k, 2) for k in range(1, 100)] + [0.999])


def robust_scale(residuals, domain: str | None = None) -> float:
    """Median-centered MAD / 0.6745; 0.0 with a warning when degenerate."""
    r = np.asarray(residuals, dtype=np.float64)
    if r.size == 0:
        raise ValueError("robust_scale needs at least one residual")
    med = float(np.median(r))
    s = float(np.median(np.abs(r - med))) / kernels.MAD_NORMAL
    if s <= 0.0:
        where = f" in domain {domain}" if domain is not None else ""
        warnings.warn(f"degenerate robust scale{where}", stacklevel=2)
        return 0.0
    return s


@dataclass(frozen=True)
class BiasAdjustConfig:
    """Tuning of the second Huber function used by the WR estimator."""

    b_phi: float = 1.0

    def __post_init__(self):
        if not self.b_phi > 0:
            raise ValueError(f"b_phi must be positive, got {self.b_phi}")


@dataclass
class MQFitGrid:
    """M-quantile coefficients over a q grid, plus refit machinery."""

    grid: np.ndarray
    beta: np.ndarray  # (G, p)
    scale: np.ndarray  # (G,)
    beta_names: list[str]
    b: float
    formula: str
    weighted: bool
    X: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    weights: np.ndarray | None = field(default=None, repr=False)
    _coef_cache: dict = field(default_factory=dict, repr=False)

    def fitted_grid(self) -> np.ndarray:
        """Fitted values of every grid fit, (n, G)."""
        return self.X @ self.beta.T

    def coef_at(self, q: float, interpolate: bool = False) -> np.ndarray:
        """Coefficients at an off-grid q.

        By default refits the M-quantile at q exactly (warm-started from
        the nearest grid point); ``interpolate=True`` instead blends the
        bracketing grid coefficients linearly, trading exactness for
        speed in long simulations.
        """
        if not (0.0 < q < 1.0):
            raise ValueError(f"q={q} outside (0, 1)")
        key = (round(float(q), 12), bool(interpolate))
        hit = self._coef_cache.get(key)
        if hit is not None:
            return hit
        j = int(np.argmin(np.abs(self.grid - q)))
        if abs(float(self.grid[j]) - q) <= 1e-12:
            beta = self.beta[j]
        elif interpolate:
            if q <= self.grid[0]:
                beta = self.beta[0]
            elif q >= self.grid[-1]:
                beta = self.beta[-1]
            else:
                hi = int(np.searchsorted(self.grid, q))
                lo = hi - 1
                t = (q - self.grid[lo]) / (self.grid[hi] - self.grid[lo])
                beta = (1.0 - t) * self.beta[lo] + t * self.beta[hi]
        else:
            beta = _fit_single_q(self.X, self.y, q, self.b, self.weights,
                                 beta0=self.beta[j])[0]
        self._coef_cache[key] = beta
        return beta


def _fit_single_q(X, y, q, b, weights, beta0=None):
    beta, scale, iters, status = kernels.irls_huber(
        X, y, float(q), b, case_weights=weights, beta0=beta0,
    )
    if status == kernels.DEGENERATE_SCALE:
        raise DegenerateScaleError(
            f"robust scale collapsed to zero in the M-quantile fit at q={q}"
        )
    if status == kernels.MAX_ITER:
        raise ConvergenceError(f"M-quantile fit did not converge at q={q}")
    return beta, scale


def fit_mq_grid(sample: Sample, spec: ModelSpec, grid=None,
                cfg: HuberConfig = HuberConfig(), weights=None) -> MQFitGrid:
    """Fit the M-quantile plane at every grid point.

    Parameters
    ----------
    sample : Sample
    spec : ModelSpec
        Only the fixed part is used; no domain terms enter the design.
    grid : increasing sequence in (0, 1), optional
    cfg : HuberConfig
    weights : optional survey weights; when given the fits are
        survey-weighted and the grid is marked ``weighted``.

    Returns
    -------
    MQFitGrid
    """
    if grid is None:
        grid = DEFAULT_GRID
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or len(grid) < 2:
        raise ValueError("grid must have at least 2 points")
    if (np.diff(grid) <= 0).any():
        raise ValueError("grid must be strictly increasing")
    if grid[0] <= 0.0 or grid[-1] >= 1.0:
        raise ValueError("grid must lie strictly inside (0, 1)")
    X, names = design_matrix(sample.tax1, sample.sc, sample.wp, spec.formula)
    y = sample.tto
    w = None
    if weights is not None:
        w = np.ascontiguousarray(weights, dtype=np.float64)
        if len(w) != len(y):
            raise ValueError("weights length mismatch")

    G, p = len(grid), X.shape[1]
    betas = np.empty((G, p))
    scales = np.empty(G)
    done = np.zeros(G, dtype=bool)
    # fit middle-out so each start is the nearest already-fitted neighbour
    order = np.argsort(np.abs(grid - 0.5), kind="stable")
    for j in order:
        beta0 = None
        if done.any():
            fitted = np.flatnonzero(done)
            beta0 = betas[fitted[np.argmin(np.abs(grid[fitted] - grid[j]))]]
        betas[j], scales[j] = _fit_single_q(X, y, grid[j], cfg.b, w, beta0=beta0)
        done[j] = True
    return MQFitGrid(
        grid=grid, beta=betas, scale=scales, beta_names=names, b=cfg.b,
        formula=spec.formula, weighted=weights is not None, X=X, y=y, weights=w,
    )


@dataclass
class QCoefficients:
    """Per-unit q scores and their domain means."""

    q: np.ndarray
    clipped: np.ndarray
    nonmonotone: np.ndarray
    qbar: dict
    qtilde: dict


def unit_q_coefficients(sample: Sample, fit: MQFitGrid) -> QCoefficients:
    """Locate each sampled unit's q-coefficient on the fitted grid.

    The coefficient is found by linear interpolation inside the first
    grid interval where the fitted value crosses the unit's y; units
    outside the fitted range are clipped to the grid ends and flagged,
    units with several crossings take the smallest and are flagged.
    """
    F = fit.fitted_grid()
    y = fit.y
    n, G = F.shape
    D = F - y[:, None]
    sign = np.sign(D)
    crossing = sign[:, :-1] * sign[:, 1:] <= 0.0
    n_cross = crossing.sum(axis=1)
    has = n_cross > 0
    first = np.argmax(crossing, axis=1)

    grid = fit.grid
    rows = np.arange(n)
    g = first
    f0 = F[rows, g]
    f1 = F[rows, np.minimum(g + 1, G - 1)]
    denom = f1 - f0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(denom) > 0, (y - f0) / denom, 0.0)
    t = np.clip(t, 0.0, 1.0)
    q_interp = grid[g] + t * (grid[np.minimum(g + 1, G - 1)] - grid[g])
    # no crossing: y below every fitted value -> q_min, above -> q_max
    below = D[:, 0] > 0
    q = np.where(has, q_interp, np.where(below, grid[0], grid[-1]))
    clipped = ~has
    nonmonotone = n_cross > 1

    qbar, qtilde = {}, {}
    w = sample.d
    for i_dom, dom in enumerate(sample.domains):
        rows_d = np.flatnonzero(sample.dom_codes == i_dom)
        if len(rows_d) == 0:
            continue
        qbar[dom] = float(np.mean(q[rows_d]))
        qtilde[dom] = float(np.sum(w[rows_d] * q[rows_d]) / np.sum(w[rows_d]))
    return QCoefficients(q=q, clipped=clipped, nonmonotone=nonmonotone,
                         qbar=qbar, qtilde=qtilde)


def _domain_q(qc: QCoefficients, ind: str, use_qtilde: bool) -> float:
    table = qc.qtilde if use_qtilde else qc.qbar
    if ind not in table:
        raise DomainError(f"domain {ind!r} has no sampled units")
    return table[ind]


def _domain_pieces(sample: Sample, pop: Population, fit: MQFitGrid, ind: str):
    """Sample rows, population design-matrix sums and sizes for a domain."""
    rows_pop = pop.domain_rows(ind)
    rows_sam = sample.domain_rows(ind)
    if len(rows_sam) == 0:
        raise DomainError(f"domain {ind!r} has no sampled units")
    X_dom, _ = design_matrix(pop.tax1[rows_pop], pop.sc[rows_pop],
                             pop.wp[rows_pop], fit.formula)
    if X_dom.shape[1] != fit.X.shape[1]:
        raise FitError("fit and population design matrices disagree")
    return rows_pop, rows_sam, X_dom


def mq_naive_total(sample: Sample, pop: Population, fit: MQFitGrid,
                   qc: QCoefficients, ind: str, weighted: bool = False,
                   use_qtilde: bool = False, interpolate: bool = False) -> float:
    """Observed y plus x' beta(q-bar_d) over the unsampled rest.

    ``weighted=True`` requires a weighted grid and uses its
    survey-weighted coefficients (the estimator form is unchanged).
    """
    if weighted and not fit.weighted:
        raise FitError("weighted estimator needs a weighted grid fit")
    q_d = _domain_q(qc, ind, use_qtilde)
    beta = fit.coef_at(q_d, interpolate=interpolate)
    rows_pop, rows_sam, X_dom = _domain_pieces(sample, pop, fit, ind)
    obs = float(sample.tto[rows_sam].sum())
    x_pop = X_dom.sum(axis=0)
    x_sam = fit.X[rows_sam].sum(axis=0)
    return obs + float((x_pop - x_sam) @ beta)


def mq_cd_total(sample: Sample, pop: Population, fit: MQFitGrid,
                qc: QCoefficients, ind: str, weighted: bool = False,
                use_qtilde: bool = False, interpolate: bool = False) -> float:
    """Bias-corrected M-quantile estimator.

    Unweighted: naive plus (N_d - n_d)/n_d times the domain's raw
    residual total.  Weighted: survey-weighted y total plus the
    calibration gap (population x total minus weighted sample x total)
    priced at beta_w(q-bar_d); design-consistent by construction.
    """
    if weighted and not fit.weighted:
        raise FitError("weighted estimator needs a weighted grid fit")
    q_d = _domain_q(qc, ind, use_qtilde)
    beta = fit.coef_at(q_d, interpolate=interpolate)
    rows_pop, rows_sam, X_dom = _domain_pieces(sample, pop, fit, ind)
    x_pop = X_dom.sum(axis=0)
    if weighted:
        w_d = sample.d[rows_sam]
        obs_w = float(w_d @ sample.tto[rows_sam])
        x_sam_w = (fit.X[rows_sam] * w_d[:, None]).sum(axis=0)
        return obs_w + float((x_pop - x_sam_w) @ beta)
    N_d, n_d = len(rows_pop), len(rows_sam)
    obs = float(sample.tto[rows_sam].sum())
    x_sam = fit.X[rows_sam].sum(axis=0)
    resid = sample.tto[rows_sam] - fit.X[rows_sam] @ beta
    return (obs + float((x_pop - x_sam) @ beta)
            + (N_d - n_d) / n_d * float(resid.sum()))


def mq_wr_total(sample: Sample, pop: Population, fit: MQFitGrid,
                qc: QCoefficients, ind: str,
                cfg: BiasAdjustConfig = BiasAdjustConfig(),
                use_qtilde: bool = False, interpolate: bool = False) -> float:
    """Robust bias-adjusted estimator.

    The CD residual total is replaced by omega_d phi((y - x'beta)/omega_d)
    summed over the domain sample, where phi is a second Huber function
    with constant ``cfg.b_phi`` and omega_d is the domain's robust
    residual scale (all-sample fallback when degenerate).
    """
    q_d = _domain_q(qc, ind, use_qtilde)
    beta = fit.coef_at(q_d, interpolate=interpolate)
    rows_pop, rows_sam, X_dom = _domain_pieces(sample, pop, fit, ind)
    N_d, n_d = len(rows_pop), len(rows_sam)
    obs = float(sample.tto[rows_sam].sum())
    x_pop = X_dom.sum(axis=0)
    x_sam = fit.X[rows_sam].sum(axis=0)
    naive = obs + float((x_pop - x_sam) @ beta)

    resid_d = sample.tto[rows_sam] - fit.X[rows_sam] @ beta
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        omega = robust_scale(resid_d, domain=ind)
        if omega <= 0.0:
            resid_all = fit.y - fit.X @ beta
            omega = robust_scale(resid_all)
    if omega <= 0.0:
        return naive
    adj = omega * float(np.sum(huber_psi(resid_d / omega, cfg.b_phi)))
    return naive + (N_d - n_d) / n_d * adj
