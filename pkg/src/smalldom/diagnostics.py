"""Working-model diagnostics and leverage-based population reduction.

The working model is ordinary least squares on the fixed part only; no
random effect enters.  Cook's distance drives the reduction: the single
most influential unit is removed, the model refitted, and the process
repeated until the stopping rule (a removal count or a distance
threshold) is met.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtri

from .errors import DesignError, FitError
from .frame import Population
from .mixed import ModelSpec, design_matrix

#: leverages at or above 1 - this are treated as exactly 1 (saturated)
LEVERAGE_TOL = 1e-12


@dataclass
class OlsFit:
    """Least-squares fit of the fixed working model.

    Attributes
    ----------
    beta, beta_names : coefficients of the fixed design
    fitted, residuals : per-unit fitted values and raw residuals
    leverage : hat-matrix diagonal h_ii, sums to p
    s2 : residual variance rss/(n - p); 0.0 for a saturated fit
    p, n : parameter and unit counts
    """

    beta: np.ndarray
    beta_names: list[str]
    fitted: np.ndarray
    residuals: np.ndarray
    leverage: np.ndarray
    s2: float
    p: int
    n: int
    formula: str = "full"
    ids: np.ndarray | None = field(default=None, repr=False)


def ols_fit(data, spec: ModelSpec) -> OlsFit:
    """OLS on the fixed part of the model, for a population or a sample.

    Raises FitError on a rank-deficient design.
    """
    X, names = design_matrix(data.tax1, data.sc, data.wp, spec.formula)
    y = data.tto
    n, p = X.shape
    if n < p:
        raise FitError(f"{n} units cannot identify {p} parameters")
    # column equilibration keeps the rank test honest for wide wp ranges
    cs = np.abs(X).max(axis=0)
    cs[cs == 0.0] = 1.0
    Q, R = np.linalg.qr(X / cs)
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise FitError("rank-deficient working-model design")
    beta = solve_triangular(R, Q.T @ y) / cs
    fitted = X @ beta
    resid = y - fitted
    leverage = np.einsum("ij,ij->i", Q, Q)
    s2 = float(resid @ resid / (n - p)) if n > p else 0.0
    return OlsFit(beta=beta, beta_names=names, fitted=fitted, residuals=resid,
                  leverage=leverage, s2=s2, p=p, n=n, formula=spec.formula,
                  ids=np.asarray(data.ids))


def cooks_distance(fit: OlsFit) -> np.ndarray:
    """Cook's distance r_i^2 h_ii / (p s^2 (1 - h_ii)^2) per unit.

    Units with leverage 1 get inf (the distance is undefined there);
    zero-residual units with leverage below 1 get 0 even when the fit
    is otherwise perfect.
    """
    if fit.p >= fit.n:
        raise FitError("Cook's distance needs more units than parameters")
    h = fit.leverage
    r = fit.residuals
    saturated = h >= 1.0 - LEVERAGE_TOL
    with np.errstate(divide="ignore", invalid="ignore"):
        d = (r * r * h) / (fit.p * fit.s2 * (1.0 - h) ** 2)
    d = np.where((r == 0.0) & ~saturated, 0.0, d)
    d[saturated] = np.inf
    return d


@dataclass(frozen=True)
class ReductionRule:
    """Stopping rule for reduce_population: exactly one of the two fields."""

    top_k: int | None = None
    threshold: float | None = None

    def __post_init__(self):
        if (self.top_k is None) == (self.threshold is None):
            raise ValueError("set exactly one of top_k and threshold")
        if self.top_k is not None and self.top_k < 0:
            raise ValueError(f"top_k must be >= 0, got {self.top_k}")
        if self.threshold is not None and not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")


def reduce_population(pop: Population, spec: ModelSpec,
                      rule: ReductionRule) -> tuple[Population, list[str]]:
    """Iteratively remove the highest-Cook's-distance unit.

    Refits after every removal; stops after ``rule.top_k`` removals or
    once the maximum distance is at or below ``rule.threshold``.  Ties
    resolve to the lowest row index, so the result is deterministic.
    Raises DesignError if a removal would empty a design stratum.
    """
    keep = np.ones(len(pop), dtype=bool)
    removed: list[str] = []
    stratum_left = dict(pop.strata)

    while True:
        if rule.top_k is not None and len(removed) >= rule.top_k:
            break
        current = _subset(pop, keep)
        fit = ols_fit(current, spec)
        d = cooks_distance(fit)
        worst = int(np.argmax(d))
        if rule.threshold is not None and d[worst] <= rule.threshold:
            break
        key = (current.ind[worst], int(current.sc[worst]))
        if stratum_left[key] <= 1:
            raise DesignError(
                f"removing unit {current.ids[worst]!r} would empty stratum {key!r}"
            )
        stratum_left[key] -= 1
        removed.append(str(current.ids[worst]))
        keep[np.flatnonzero(keep)[worst]] = False
    return _subset(pop, keep), removed


def _subset(pop: Population, keep: np.ndarray) -> Population:
    if keep.all():
        return pop
    return Population(pop.ids[keep], pop.ind[keep], pop.sc[keep],
                      pop.wp[keep], pop.tax1[keep], pop.tto[keep])


def qq_data(residuals) -> tuple[np.ndarray, np.ndarray]:
    """Normal-probability pairs: (theoretical quantile, ordered residual).

    Theoretical quantiles are the standard normal inverse at plotting
    positions (i - 0.5)/n.
    """
    r = np.sort(np.asarray(residuals, dtype=np.float64))
    n = len(r)
    if n == 0:
        raise ValueError("qq_data needs at least one residual")
    theor = ndtri((np.arange(1, n + 1) - 0.5) / n)
    return theor, r
