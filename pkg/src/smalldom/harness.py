"""Synthetic populations and the design-based Monte Carlo harness.

The generator builds a skewed business-survey-like frame: log-normal
tax1 by size class, a domain random effect, multiplicative skewed noise
whose scale grows with a power of wp, and a planted-outlier fraction
whose noise is inflated by a known factor.  The harness repeatedly
draws stratified samples (seed mixed with the replicate index, so
replicates are reproducible one by one), runs a configured set of
estimators over all domains, and reports percent relative bias and
relative root mean squared error per (estimator, domain), plus the
tuning-constant sensitivity sweep and a bootstrap MSE estimator.

Estimator failures inside a replicate record a sentinel and are
excluded from that estimator's moments; the exclusion count is
reported.  Variance-boundary fits are kept (their prediction is purely
synthetic) but tallied separately.
"""

from __future__ import annotations

import math
import multiprocessing
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .design import DesignSpec, build_design, draw_sample
from .direct import AuxSpec
from .errors import (CalibrationError, ConvergenceError, DataError,
                     DegenerateScaleError, DomainError, FitError)
from .frame import SC_BANDS, Population, Sample
from .mixed import (VARIANCE_BY_SC, VARIANCE_HOMO, VARIANCE_WP2, ModelSpec,
                    design_matrix, fit_lmm_xy, gamma_weighted)
from .mquantile import fit_mq_grid, robust_scale, unit_q_coefficients
from .robust import DEFAULT_B_PSI, HuberConfig, fit_mreg_xy, fit_reblup_xy, huber_psi

# ---------------------------------------------------------------------------
# population generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PopGenConfig:
    """Synthetic population settings.

    The outcome is tto = beta0 + beta1 tax1 + beta2 sc + beta3 wp
    + beta4 tax1 wp + u_dom + e, with u_dom normal and e a centered,
    unit-variance log-normal scaled by sigma_eps wp**noise_wp_power.
    A fraction ``contamination`` of units (optionally restricted to
    ``contaminate_sc``) has its noise multiplied by
    ``contamination_scale``.
    """

    n_units: int = 63958
    n_domains: int = 20
    sc_shares: tuple = (0.45, 0.30, 0.15, 0.07, 0.03)
    domain_size_ratio: float = 76.0
    tax1_log_loc: float = 3.4
    tax1_sc_step: float = 1.1
    tax1_log_sd: float = 1.0
    beta: tuple = (5.0, 1.02, 2.0, 3.0, 0.001)
    sigma_u: float = 4.0
    sigma_eps: float = 0.7
    noise_wp_power: float = 2.0
    noise_log_sd: float = 1.0
    contamination: float = 0.03
    contamination_scale: float = 25.0
    contaminate_sc: tuple | None = None
    seed: int = 20260817

    def __post_init__(self):
        if self.n_units < 1 or self.n_domains < 2:
            raise ValueError("need n_units >= 1 and n_domains >= 2")
        if len(self.sc_shares) != len(SC_BANDS):
            raise ValueError(f"sc_shares needs {len(SC_BANDS)} entries")
        if min(self.sc_shares) <= 0:
            raise ValueError("sc_shares must be positive")
        if not 0.0 <= self.contamination < 1.0:
            raise ValueError(f"contamination must be in [0, 1), got {self.contamination}")
        if self.contamination_scale < 1.0:
            raise ValueError(f"contamination_scale must be >= 1, got {self.contamination_scale}")
        if self.domain_size_ratio < 1.0:
            raise ValueError("domain_size_ratio must be >= 1")
        if len(self.beta) != 5:
            raise ValueError("beta needs 5 coefficients")
        if self.sigma_u < 0 or self.sigma_eps <= 0 or self.noise_log_sd <= 0:
            raise ValueError("sigma_u >= 0, sigma_eps > 0 and noise_log_sd > 0 required")
        if self.contaminate_sc is not None:
            bad = set(self.contaminate_sc) - set(SC_BANDS)
            if bad:
                raise ValueError(f"unknown size classes in contaminate_sc: {sorted(bad)}")


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to ``weights``."""
    quota = weights / weights.sum() * total
    out = np.floor(quota).astype(np.int64)
    short = total - int(out.sum())
    if short > 0:
        order = np.argsort(-(quota - out), kind="stable")
        out[order[:short]] += 1
    return out


def _domain_labels(n_domains: int) -> list[str]:
    width = max(2, len(str(n_domains)))
    return [f"I{i + 1:0{width}d}" for i in range(n_domains)]


def generate_population(cfg: PopGenConfig) -> Population:
    """Build the synthetic frame; deterministic given ``cfg.seed``.

    Draw order is fixed: domain effects, wp, tax1, noise,
    contamination marks.
    """
    D = cfg.n_domains
    ratio = cfg.domain_size_ratio
    raw = ratio ** (np.arange(D) / max(D - 1, 1))
    dom_sizes = _largest_remainder(raw, cfg.n_units)
    shares = np.asarray(cfg.sc_shares, dtype=np.float64)
    counts = np.empty((D, len(shares)), dtype=np.int64)
    for i in range(D):
        c = _largest_remainder(shares, int(dom_sizes[i]))
        # every stratum must be drawable: bump empty cells from the largest
        for j in np.flatnonzero(c == 0):
            k = int(np.argmax(c))
            if c[k] <= 1:
                raise DataError(
                    f"infeasible cell counts: domain size {dom_sizes[i]} cannot "
                    f"cover {len(shares)} size classes"
                )
            c[k] -= 1
            c[j] += 1
        counts[i] = c

    labels = _domain_labels(D)
    dom_idx = np.repeat(np.arange(D), dom_sizes)
    sc = np.concatenate([np.repeat(np.arange(1, len(shares) + 1), counts[i])
                         for i in range(D)])
    n = cfg.n_units
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))

    u = cfg.sigma_u * rng.standard_normal(D)
    lo = np.array([SC_BANDS[s][0] for s in sorted(SC_BANDS)])
    hi = np.array([SC_BANDS[s][1] for s in sorted(SC_BANDS)])
    wp = rng.integers(lo[sc - 1], hi[sc - 1] + 1)
    loc = cfg.tax1_log_loc + cfg.tax1_sc_step * (sc - 1)
    tax1 = np.exp(loc + cfg.tax1_log_sd * rng.standard_normal(n))
    tau = cfg.noise_log_sd
    m = math.exp(0.5 * tau * tau)
    s = math.sqrt((math.exp(tau * tau) - 1.0) * math.exp(tau * tau))
    eps = (np.exp(tau * rng.standard_normal(n)) - m) / s
    contam = rng.random(n) < cfg.contamination
    if cfg.contaminate_sc is not None:
        contam &= np.isin(sc, np.asarray(cfg.contaminate_sc))

    e = cfg.sigma_eps * wp.astype(np.float64) ** cfg.noise_wp_power * eps
    e[contam] *= cfg.contamination_scale
    b0, b1, b2, b3, b4 = cfg.beta
    tto = b0 + b1 * tax1 + b2 * sc + b3 * wp + b4 * tax1 * wp + u[dom_idx] + e

    width = len(str(n))
    ids = [f"u{i + 1:0{width}d}" for i in range(n)]
    ind = [labels[j] for j in dom_idx]
    return Population(ids, ind, sc, wp, tax1, tto)


def truth_totals(pop: Population) -> dict:
    """True domain totals of tto."""
    t = np.bincount(pop.dom_codes, weights=pop.tto, minlength=len(pop.domains))
    return {dom: float(t[i]) for i, dom in enumerate(pop.domains)}


# ---------------------------------------------------------------------------
# Monte Carlo summaries
# ---------------------------------------------------------------------------


def relative_bias(estimates, truth: float) -> float:
    """Percent relative bias: (100/(K truth)) sum(estimates) - 100."""
    est = np.asarray(estimates, dtype=np.float64)
    if truth == 0.0:
        raise ValueError("relative bias is undefined for zero truth")
    if len(est) == 0:
        raise ValueError("need at least one estimate")
    return float(100.0 / (len(est) * truth) * est.sum() - 100.0)


def relative_rrmse(estimates, truth: float) -> float:
    """Percent relative root mean squared error about the truth."""
    est = np.asarray(estimates, dtype=np.float64)
    if truth == 0.0:
        raise ValueError("relative rrmse is undefined for zero truth")
    if len(est) == 0:
        raise ValueError("need at least one estimate")
    return float(100.0 / abs(truth) * math.sqrt(np.mean((est - truth) ** 2)))


# ---------------------------------------------------------------------------
# estimator tokens
# ---------------------------------------------------------------------------

#: the default simulate battery (the non-robust pair in two variance
#: flavours, the survey-weighted mixed estimator, then the robust family)
DEFAULT_ESTIMATORS = (
    "ht", "greg", "eblup:homo", "eblup:by_sc", "peblup", "msyn",
    "mq", "mqcd", "mqwr:1", "mqwr:2", "mqwr:3", "mqw", "mqcdw",
)

_EBLUP_VARIANCES = {"homo": VARIANCE_HOMO, "by_sc": VARIANCE_BY_SC, "wp2": VARIANCE_WP2}


class EstimatorSpec(NamedTuple):
    label: str
    kind: str
    variance: str = VARIANCE_HOMO
    b_phi: float = 1.0


def parse_estimator(token: str) -> EstimatorSpec:
    """Parse an estimator token such as ``greg``, ``eblup:by_sc`` or ``mqwr:2``."""
    t = token.strip()
    base, _, arg = t.partition(":")
    base = base.lower()
    if base in ("ht", "greg", "peblup", "msyn", "reblup",
                "mq", "mqw", "mqcd", "mqcdw"):
        if arg:
            raise ValueError(f"estimator {base!r} takes no argument, got {token!r}")
        return EstimatorSpec(label=t, kind=base)
    if base == "eblup":
        variance = arg or "homo"
        if variance not in _EBLUP_VARIANCES:
            raise ValueError(
                f"unknown eblup variance {arg!r}; expected one of "
                f"{sorted(_EBLUP_VARIANCES)}")
        return EstimatorSpec(label=t, kind="eblup", variance=_EBLUP_VARIANCES[variance])
    if base == "mqwr":
        try:
            b_phi = float(arg) if arg else 1.0
        except ValueError:
            raise ValueError(f"invalid mqwr tuning constant in {token!r}") from None
        if not b_phi > 0:
            raise ValueError(f"mqwr tuning constant must be positive, got {token!r}")
        return EstimatorSpec(label=t, kind="mqwr", b_phi=b_phi)
    raise ValueError(f"unknown estimator {token!r}")


def _parse_all(estimators) -> list[EstimatorSpec]:
    specs = [e if isinstance(e, EstimatorSpec) else parse_estimator(e)
             for e in estimators]
    if not specs:
        raise ValueError("estimator set is empty")
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate estimator labels in {labels}")
    return specs


# ---------------------------------------------------------------------------
# the per-replicate engine
# ---------------------------------------------------------------------------


class _SimContext:
    """Immutable, replicate-independent pieces shared by all workers."""

    def __init__(self, pop: Population, design: DesignSpec, specs, seed: int,
                 b_psi: float, interpolate: bool, aux: AuxSpec):
        self.pop = pop
        self.design = design
        self.specs = list(specs)
        self.seed = seed
        self.b_psi = b_psi
        self.interpolate = interpolate
        self.aux = aux
        self.model = ModelSpec()
        self.domains = pop.domains
        D = len(pop.domains)
        self.n_dom = D
        self.N_d = np.bincount(pop.dom_codes, minlength=D).astype(np.float64)
        X_pop, _ = design_matrix(pop.tax1, pop.sc, pop.wp, self.model.formula)
        p = X_pop.shape[1]
        self.xpop_sum = np.empty((D, p))
        for j in range(p):
            self.xpop_sum[:, j] = np.bincount(pop.dom_codes, weights=X_pop[:, j],
                                              minlength=D)
        # calibration cells (domain x size-class group)
        G = len(aux.groups)
        self.n_groups = G
        gp = aux.group_codes(pop.sc)
        cell = pop.dom_codes * G + gp
        self.cell_n_pop = np.bincount(cell, minlength=D * G)
        self.cell_x_pop = np.bincount(cell, weights=pop.tax1, minlength=D * G)


class _Engine:
    """Lazy per-sample evaluation of every estimator kind.

    Model fits, M-quantile grids and per-domain coefficient fits are
    computed once per replicate and shared across the estimators that
    need them.
    """

    def __init__(self, ctx: _SimContext, sample: Sample):
        self.ctx = ctx
        self.s = sample
        self._cache: dict = {}

    def _memo(self, key, build):
        hit = self._cache.get(key)
        if hit is None:
            hit = build()
            self._cache[key] = hit
        return hit

    # -- shared pieces -------------------------------------------------
    def xs(self) -> np.ndarray:
        return self._memo("xs", lambda: design_matrix(
            self.s.tax1, self.s.sc, self.s.wp, self.ctx.model.formula)[0])

    def dom_sums(self):
        def build():
            s, D = self.s, self.ctx.n_dom
            X = self.xs()
            obs_y = np.bincount(s.dom_codes, weights=s.tto, minlength=D)
            n_sam = np.bincount(s.dom_codes, minlength=D).astype(np.float64)
            xsam = np.empty((D, X.shape[1]))
            xsam_w = np.empty((D, X.shape[1]))
            for j in range(X.shape[1]):
                xsam[:, j] = np.bincount(s.dom_codes, weights=X[:, j], minlength=D)
                xsam_w[:, j] = np.bincount(s.dom_codes, weights=s.d * X[:, j],
                                           minlength=D)
            return obs_y, n_sam, xsam, xsam_w
        return self._memo("dom_sums", build)

    def lmm(self, variance: str):
        return self._memo(("lmm", variance), lambda: fit_lmm_xy(
            self.xs(), self.s.tto, self.s.dom_codes, self.ctx.domains,
            variance=variance, criterion="ml", sc=self.s.sc, wp=self.s.wp))

    def grid(self, weighted: bool):
        def build():
            w = self.s.d if weighted else None
            return fit_mq_grid(self.s, self.ctx.model,
                               cfg=HuberConfig(self.ctx.b_psi), weights=w)
        return self._memo(("grid", weighted), build)

    def qc(self, weighted: bool):
        return self._memo(("qc", weighted),
                          lambda: unit_q_coefficients(self.s, self.grid(weighted)))

    def mq_dom(self, weighted: bool, i_dom: int):
        """Per-domain naive estimate, residual pieces and robust scale."""
        def build():
            grid, qc = self.grid(weighted), self.qc(weighted)
            dom = self.ctx.domains[i_dom]
            if dom not in qc.qbar:
                raise DomainError(f"domain {dom!r} has no sampled units")
            beta = grid.coef_at(qc.qbar[dom], interpolate=self.ctx.interpolate)
            obs_y, n_sam, xsam, _ = self.dom_sums()
            gap = self.ctx.xpop_sum[i_dom] - xsam[i_dom]
            naive = float(obs_y[i_dom]) + float(gap @ beta)
            rows = np.flatnonzero(self.s.dom_codes == i_dom)
            resid = self.s.tto[rows] - self.xs()[rows] @ beta
            f = (self.ctx.N_d[i_dom] - n_sam[i_dom]) / n_sam[i_dom]
            return {"beta": beta, "naive": naive, "resid": resid, "f": f}
        return self._memo(("mq_dom", weighted, i_dom), build)

    def _omega(self, i_dom: int) -> float:
        def build():
            piece = self.mq_dom(False, i_dom)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                omega = robust_scale(piece["resid"], domain=self.ctx.domains[i_dom])
                if omega <= 0.0:
                    grid = self.grid(False)
                    omega = robust_scale(grid.y - grid.X @ piece["beta"])
            return omega
        return self._memo(("omega", i_dom), build)

    # -- estimator kinds -----------------------------------------------
    def eval_ht(self, spec=None) -> np.ndarray:
        return self._memo("ht", lambda: np.bincount(
            self.s.dom_codes, weights=self.s.d * self.s.tto,
            minlength=self.ctx.n_dom))

    def eval_greg(self, spec) -> np.ndarray:
        ctx, s = self.ctx, self.s
        G, D = ctx.n_groups, ctx.n_dom
        cs = s.dom_codes * G + ctx.aux.group_codes(s.sc)
        dt = s.d * s.tax1
        size = D * G
        n_sam = np.bincount(cs, minlength=size)
        t_hat = np.bincount(cs, weights=dt, minlength=size)
        denom = np.bincount(cs, weights=dt * s.tax1, minlength=size)
        num = np.bincount(cs, weights=dt * s.tto, minlength=size)
        gap = ctx.cell_x_pop - t_hat
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = np.where(denom > 0.0, num / np.where(denom > 0, denom, 1.0) * gap, 0.0)
        # a cell is bad if it cannot be calibrated
        bad = (ctx.cell_n_pop > 0) & (
            (n_sam == 0)
            | ((denom <= 0.0) & (np.abs(gap) > 1e-8 * np.maximum(np.abs(ctx.cell_x_pop), 1.0)))
        )
        est = self.eval_ht(spec) + corr.reshape(D, G).sum(axis=1)
        est[bad.reshape(D, G).any(axis=1)] = np.nan
        return est

    def _mixed_predict(self, beta, u_by_dom) -> np.ndarray:
        obs_y, n_sam, xsam, _ = self.dom_sums()
        gap = self.ctx.xpop_sum - xsam
        u = np.array([u_by_dom.get(dom, 0.0) for dom in self.ctx.domains])
        return obs_y + gap @ beta + (self.ctx.N_d - n_sam) * u

    def eval_eblup(self, spec):
        fit = self.lmm(spec.variance)
        return self._mixed_predict(fit.beta, fit.u_hat), fit.boundary

    def eval_peblup(self, spec):
        fit = self.lmm(VARIANCE_HOMO)
        s2u, s2e = fit.sigma2_u, fit.level1["sigma2_e"]
        s, ctx = self.s, self.ctx
        D = ctx.n_dom
        X = self.xs()
        p = X.shape[1]
        obs_y, n_sam, xsam, xsam_w = self.dom_sums()
        sw = np.bincount(s.dom_codes, weights=s.d, minlength=D)
        sampled = n_sam > 0
        sy_w = np.bincount(s.dom_codes, weights=s.d * s.tto, minlength=D)
        delta = np.bincount(s.dom_codes, weights=s.d * s.d, minlength=D)
        with np.errstate(divide="ignore", invalid="ignore"):
            ybar = np.where(sampled, sy_w / sw, 0.0)
            xbar = np.where(sampled[:, None], xsam_w / sw[:, None], 0.0)
            delta = np.where(sampled, delta / (sw * sw), 0.0)
        gam = np.array([gamma_weighted(s2u, s2e, float(delta[i])) if sampled[i] else 0.0
                        for i in range(D)])
        A = (X * s.d[:, None]).T @ X
        c = X.T @ (s.d * s.tto)
        for i in np.flatnonzero(sampled):
            A -= gam[i] * sw[i] * np.outer(xbar[i], xbar[i])
            c -= gam[i] * sw[i] * xbar[i] * ybar[i]
        try:
            beta_w = np.linalg.solve(A, c)
        except np.linalg.LinAlgError:
            raise FitError("singular survey-weighted normal equations") from None
        est = ctx.N_d * gam * ybar + (ctx.xpop_sum - ctx.N_d[:, None] * gam[:, None] * xbar) @ beta_w
        est[~sampled] = np.nan
        return est, fit.boundary

    def eval_msyn(self, spec) -> np.ndarray:
        fit = self._memo("mreg", lambda: fit_mreg_xy(
            self.xs(), self.s.tto, b=self.ctx.b_psi))
        obs_y, n_sam, xsam, _ = self.dom_sums()
        return obs_y + (self.ctx.xpop_sum - xsam) @ fit.beta

    def eval_reblup(self, spec):
        fit = self._memo("reblup", lambda: fit_reblup_xy(
            self.xs(), self.s.tto, self.s.dom_codes, self.ctx.domains,
            b=self.ctx.b_psi))
        return self._mixed_predict(fit.beta_psi, fit.u_hat_psi), fit.boundary

    def _eval_mq_family(self, spec) -> np.ndarray:
        ctx = self.ctx
        weighted = spec.kind in ("mqw", "mqcdw")
        est = np.full(ctx.n_dom, np.nan)
        obs_y, n_sam, xsam, xsam_w = self.dom_sums()
        for i in range(ctx.n_dom):
            try:
                piece = self.mq_dom(weighted, i)
            except DomainError:
                continue
            if spec.kind in ("mq", "mqw"):
                est[i] = piece["naive"]
            elif spec.kind == "mqcd":
                est[i] = piece["naive"] + piece["f"] * float(piece["resid"].sum())
            elif spec.kind == "mqcdw":
                ht_i = float(self.eval_ht()[i])
                est[i] = ht_i + float((ctx.xpop_sum[i] - xsam_w[i]) @ piece["beta"])
            else:  # mqwr
                omega = self._omega(i)
                if omega <= 0.0:
                    est[i] = piece["naive"]
                else:
                    adj = omega * float(np.sum(huber_psi(piece["resid"] / omega,
                                                         spec.b_phi)))
                    est[i] = piece["naive"] + piece["f"] * adj
        return est

    def evaluate(self, spec: EstimatorSpec):
        """Estimates for every domain plus a boundary flag."""
        boundary = False
        if spec.kind == "ht":
            est = self.eval_ht(spec)
        elif spec.kind == "greg":
            est = self.eval_greg(spec)
        elif spec.kind == "eblup":
            est, boundary = self.eval_eblup(spec)
        elif spec.kind == "peblup":
            est, boundary = self.eval_peblup(spec)
        elif spec.kind == "msyn":
            est = self.eval_msyn(spec)
        elif spec.kind == "reblup":
            est, boundary = self.eval_reblup(spec)
        else:
            est = self._eval_mq_family(spec)
        return np.asarray(est, dtype=np.float64), boundary


_RECOVERABLE = (ConvergenceError, DegenerateScaleError, FitError,
                CalibrationError, DomainError, np.linalg.LinAlgError)


def _evaluate_all(ctx: _SimContext, sample: Sample):
    """(E, D) estimates with NaN sentinels, plus per-estimator boundary flags."""
    engine = _Engine(ctx, sample)
    E, D = len(ctx.specs), ctx.n_dom
    est = np.full((E, D), np.nan)
    boundary = np.zeros(E, dtype=bool)
    for e, spec in enumerate(ctx.specs):
        try:
            est[e], boundary[e] = engine.evaluate(spec)
        except _RECOVERABLE:
            pass
    return est, boundary


_CTX: _SimContext | None = None


def _init_worker(ctx):
    global _CTX
    _CTX = ctx


def _sim_worker(k: int):
    ctx = _CTX
    sample = draw_sample(ctx.design, ctx.pop, np.random.SeedSequence((ctx.seed, k)))
    est, boundary = _evaluate_all(ctx, sample)
    return k, est, boundary


# ---------------------------------------------------------------------------
# simulation report
# ---------------------------------------------------------------------------


@dataclass
class SimulationReport:
    """Per (estimator, domain) Monte Carlo summaries plus raw estimates."""

    estimators: tuple
    domains: tuple
    truth: np.ndarray
    rb: np.ndarray
    rrmse: np.ndarray
    failures: np.ndarray
    boundary: np.ndarray
    K: int
    seed: int
    estimates: np.ndarray = field(repr=False, default=None)

    def _row(self, estimator: str) -> int:
        try:
            return self.estimators.index(estimator)
        except ValueError:
            raise KeyError(f"estimator {estimator!r} not in report") from None

    def invalid(self, estimator: str) -> bool:
        """True when every replicate failed for the estimator."""
        return bool(np.isnan(self.rb[self._row(estimator)]).all())

    def summary(self, estimator: str) -> dict:
        e = self._row(estimator)
        rb, rrmse = self.rb[e], self.rrmse[e]
        return {
            "median_rb": float(np.median(rb)),
            "mean_rb": float(np.mean(rb)),
            "mean_abs_rb": float(np.mean(np.abs(rb))),
            "median_rrmse": float(np.median(rrmse)),
            "mean_rrmse": float(np.mean(rrmse)),
        }

    def to_csv(self, path) -> None:
        from ._util import atomic_write_text, fmt
        lines = ["estimator,domain,truth,rb_pct,rrmse_pct,failures"]
        for e, label in enumerate(self.estimators):
            for i, dom in enumerate(self.domains):
                lines.append(
                    f"{label},{dom},{fmt(self.truth[i])},{fmt(self.rb[e, i])},"
                    f"{fmt(self.rrmse[e, i])},{int(self.failures[e, i])}")
            worst = int(self.failures[e].max())
            s = self.summary(label)
            lines.append(f"{label},median,,{fmt(s['median_rb'])},"
                         f"{fmt(s['median_rrmse'])},{worst}")
            lines.append(f"{label},mean,,{fmt(s['mean_rb'])},"
                         f"{fmt(s['mean_rrmse'])},{worst}")
            lines.append(f"{label},mean_abs,,{fmt(s['mean_abs_rb'])},"
                         f"{fmt(s['mean_rrmse'])},{worst}")
        atomic_write_text(path, "\n".join(lines) + "\n")


def _run_replicates(ctx: _SimContext, K: int, threads: int):
    """Estimates (K, E, D) and boundary flags (K, E), merged by replicate."""
    E, D = len(ctx.specs), ctx.n_dom
    estimates = np.empty((K, E, D))
    boundary = np.zeros((K, E), dtype=bool)
    if threads > 1:
        with multiprocessing.Pool(threads, initializer=_init_worker,
                                  initargs=(ctx,)) as pool:
            for k, est, bnd in pool.imap_unordered(_sim_worker, range(K)):
                estimates[k] = est
                boundary[k] = bnd
    else:
        _init_worker(ctx)
        for k in range(K):
            _, est, bnd = _sim_worker(k)
            estimates[k] = est
            boundary[k] = bnd
    return estimates, boundary


def run_simulation(pop: Population, design: DesignSpec, estimators=DEFAULT_ESTIMATORS,
                   K: int = 500, seed: int = 1, threads: int = 1,
                   b_psi: float = DEFAULT_B_PSI, interpolate: bool = False,
                   aux: AuxSpec = AuxSpec()) -> SimulationReport:
    """Design-based Monte Carlo over K replicate samples.

    Each replicate draws a fresh stratified sample with the seed mixed
    with the replicate index, evaluates every estimator over all
    domains, and the report aggregates percent relative bias and rrmse.
    Failed (estimator, replicate) pairs are excluded from the moments
    and counted in ``failures``; an estimator whose replicates all fail
    has NaN rows.
    """
    specs = _parse_all(estimators)
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    ctx = _SimContext(pop, design, specs, seed, b_psi, interpolate, aux)
    truth = np.bincount(pop.dom_codes, weights=pop.tto, minlength=ctx.n_dom)
    if (truth == 0.0).any():
        bad = ctx.domains[int(np.flatnonzero(truth == 0.0)[0])]
        raise DataError(f"domain {bad!r} has zero true total; rb is undefined")

    estimates, boundary = _run_replicates(ctx, K, threads)

    E, D = len(specs), ctx.n_dom
    rb = np.full((E, D), np.nan)
    rrmse = np.full((E, D), np.nan)
    failures = np.zeros((E, D), dtype=np.int64)
    for e in range(E):
        for i in range(D):
            vals = estimates[:, e, i]
            ok = np.isfinite(vals)
            failures[e, i] = K - int(ok.sum())
            if ok.any():
                rb[e, i] = relative_bias(vals[ok], float(truth[i]))
                rrmse[e, i] = relative_rrmse(vals[ok], float(truth[i]))
    return SimulationReport(
        estimators=tuple(s.label for s in specs), domains=ctx.domains,
        truth=truth, rb=rb, rrmse=rrmse, failures=failures,
        boundary=boundary.sum(axis=0), K=K, seed=seed, estimates=estimates,
    )


# ---------------------------------------------------------------------------
# tuning-constant sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    """Robust-adjustment sensitivity: rrmse by (b_phi, domain).

    ``mqcd_rrmse`` is the limit reference computed on the same
    replicates; ``max_min`` is the per-domain spread over the grid.
    """

    b_grid: tuple
    domains: tuple
    rrmse: np.ndarray
    mqcd_rrmse: np.ndarray
    K: int
    seed: int

    @property
    def max_min(self) -> np.ndarray:
        return self.rrmse.max(axis=0) - self.rrmse.min(axis=0)

    def mean_rrmse(self) -> np.ndarray:
        """Mean rrmse across domains, one value per grid point."""
        return self.rrmse.mean(axis=1)

    def to_csv(self, path) -> None:
        from ._util import atomic_write_text, fmt
        header = "b_phi," + ",".join(self.domains) + ",mean"
        lines = [header]
        for g, b in enumerate(self.b_grid):
            row = self.rrmse[g]
            lines.append(fmt(b) + "," + ",".join(fmt(v) for v in row)
                         + "," + fmt(row.mean()))
        lines.append("mqcd," + ",".join(fmt(v) for v in self.mqcd_rrmse)
                     + "," + fmt(self.mqcd_rrmse.mean()))
        mm = self.max_min
        lines.append("max-min," + ",".join(fmt(v) for v in mm) + "," + fmt(mm.mean()))
        atomic_write_text(path, "\n".join(lines) + "\n")


DEFAULT_SWEEP_GRID = tuple(0.25 * k for k in range(1, 13))


def sweep_bphi(pop: Population, design: DesignSpec, K: int = 500,
               grid=DEFAULT_SWEEP_GRID, seed: int = 1, threads: int = 1,
               b_psi: float = DEFAULT_B_PSI) -> SweepResult:
    """rrmse of the robust bias-adjusted estimator over a b_phi grid.

    All grid values share the same K replicate samples (common random
    numbers), so column differences are attributable to b_phi alone.
    """
    grid = tuple(float(b) for b in grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    if any(b <= 0 for b in grid):
        raise ValueError("sweep grid values must be positive")
    if len(set(grid)) != len(grid):
        raise ValueError("sweep grid has duplicate values")
    tokens = ["mqcd"] + [f"mqwr:{b!r}" for b in grid]
    report = run_simulation(pop, design, tokens, K=K, seed=seed,
                            threads=threads, b_psi=b_psi)
    rrmse = np.vstack([report.rrmse[report._row(f"mqwr:{b!r}")] for b in grid])
    return SweepResult(b_grid=grid, domains=report.domains, rrmse=rrmse,
                       mqcd_rrmse=report.rrmse[report._row("mqcd")],
                       K=K, seed=seed)


# ---------------------------------------------------------------------------
# bootstrap MSE
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapConfig:
    """Bootstrap MSE settings: B populations, L samples from each."""

    B: int = 50
    L: int = 10
    seed: int = 1
    pool: str = "unconditional"
    b_psi: float = DEFAULT_B_PSI

    def __post_init__(self):
        if self.B < 1 or self.L < 1:
            raise ValueError(f"need B >= 1 and L >= 1, got B={self.B}, L={self.L}")
        if self.pool not in ("unconditional", "domain"):
            raise ValueError(f"pool must be 'unconditional' or 'domain', got {self.pool!r}")


@dataclass
class BootstrapResult:
    """Per-domain bootstrap mse/rmse for one estimator."""

    estimator: str
    domains: tuple
    mse: np.ndarray
    original: np.ndarray
    B: int
    L: int
    seed: int

    @property
    def rmse(self) -> np.ndarray:
        return np.sqrt(self.mse)

    @property
    def rel_rmse_pct(self) -> np.ndarray:
        """rmse as a percentage of the original-sample estimate."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return 100.0 * self.rmse / np.abs(self.original)

    def to_csv(self, path) -> None:
        from ._util import atomic_write_text, fmt
        lines = ["estimator,domain,estimate,mse,rmse,rel_rmse_pct"]
        rel = self.rel_rmse_pct
        for i, dom in enumerate(self.domains):
            lines.append(f"{self.estimator},{dom},{fmt(self.original[i])},"
                         f"{fmt(self.mse[i])},{fmt(self.rmse[i])},{fmt(rel[i])}")
        atomic_write_text(path, "\n".join(lines) + "\n")


def bootstrap_mse(sample: Sample, pop_frame: Population, estimator: str = "mqwr:1",
                  cfg: BootstrapConfig = BootstrapConfig(),
                  threads: int = 1) -> BootstrapResult:
    """Bootstrap MSE of an estimator of the domain totals.

    Fits the M-quantile model on the sample, rebuilds B synthetic
    populations over the frame by adding resampled centered residuals
    to every unit's prediction, draws L samples from each under the
    original design, and averages the squared estimator error against
    each bootstrap population's own true totals.
    """
    spec = parse_estimator(estimator) if isinstance(estimator, str) else estimator
    model = ModelSpec()
    design = build_design(pop_frame, sample.n_h)
    ctx = _SimContext(pop_frame, design, [spec], cfg.seed, cfg.b_psi,
                      False, AuxSpec())

    # model fit on the observed sample, at each domain's own order
    engine = _Engine(ctx, sample)
    weighted = spec.kind in ("mqw", "mqcdw")
    grid = engine.grid(weighted)
    qc = engine.qc(weighted)
    D = ctx.n_dom
    original, _ = engine.evaluate(spec)

    X_pop, _ = design_matrix(pop_frame.tax1, pop_frame.sc, pop_frame.wp, model.formula)
    synth = np.empty(len(pop_frame))
    pred_s = np.empty(len(sample))
    for i, dom in enumerate(ctx.domains):
        if dom not in qc.qbar:
            raise DomainError(f"domain {dom!r} has no sampled units")
        beta = grid.coef_at(qc.qbar[dom])
        rows_p = pop_frame.domain_rows(dom)
        synth[rows_p] = X_pop[rows_p] @ beta
        rows_s = np.flatnonzero(sample.dom_codes == i)
        pred_s[rows_s] = grid.X[rows_s] @ beta
    resid = sample.tto - pred_s
    if cfg.pool == "unconditional":
        pool_all = resid - resid.mean()
    else:
        pool_by_dom = {}
        for i, dom in enumerate(ctx.domains):
            rows_s = np.flatnonzero(sample.dom_codes == i)
            pool_by_dom[i] = resid[rows_s] - resid[rows_s].mean()

    pools = pool_all if cfg.pool == "unconditional" else pool_by_dom
    bctx = _BootCtx(ctx=ctx, spec=spec, cfg=cfg, synth=synth, pools=pools)
    sq = np.empty((cfg.B, D))
    count = np.empty((cfg.B, D), dtype=np.int64)
    if threads > 1:
        with multiprocessing.Pool(threads, initializer=_init_boot_worker,
                                  initargs=(bctx,)) as workers:
            for b, sq_b, count_b in workers.imap_unordered(_boot_worker,
                                                           range(cfg.B)):
                sq[b] = sq_b
                count[b] = count_b
    else:
        _init_boot_worker(bctx)
        for b in range(cfg.B):
            _, sq_b, count_b = _boot_worker(b)
            sq[b] = sq_b
            count[b] = count_b
    sq_tot = sq.sum(axis=0)
    count_tot = count.sum(axis=0)
    if (count_tot == 0).any():
        raise FitError("every bootstrap replicate failed for some domain")
    return BootstrapResult(estimator=spec.label, domains=ctx.domains,
                           mse=sq_tot / count_tot, original=original,
                           B=cfg.B, L=cfg.L, seed=cfg.seed)


class _BootCtx(NamedTuple):
    ctx: _SimContext
    spec: EstimatorSpec
    cfg: BootstrapConfig
    synth: np.ndarray
    pools: object  # one pooled array, or a per-domain dict


_BOOT: _BootCtx | None = None


def _init_boot_worker(bctx):
    global _BOOT
    _BOOT = bctx


def _boot_worker(b: int):
    """Squared errors and success counts for one bootstrap population."""
    bctx = _BOOT
    ctx, cfg = bctx.ctx, bctx.cfg
    pop_frame = ctx.pop
    D = ctx.n_dom
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, b)))
    if cfg.pool == "unconditional":
        pool_all = bctx.pools
        e_star = pool_all[rng.integers(0, len(pool_all), size=len(pop_frame))]
    else:
        e_star = np.empty(len(pop_frame))
        for i in range(D):
            rows_p = pop_frame.domain_rows(ctx.domains[i])
            pool_d = bctx.pools[i]
            e_star[rows_p] = pool_d[rng.integers(0, len(pool_d), size=len(rows_p))]
    y_star = bctx.synth + e_star
    pop_b = pop_frame.with_tto(y_star)
    truth_b = np.bincount(pop_b.dom_codes, weights=y_star, minlength=D)
    sq = np.zeros(D)
    count = np.zeros(D, dtype=np.int64)
    for ell in range(cfg.L):
        s_star = draw_sample(ctx.design, pop_b,
                             np.random.SeedSequence((cfg.seed, b, ell)))
        try:
            est, _ = _Engine(ctx, s_star).evaluate(bctx.spec)
        except _RECOVERABLE:
            continue
        ok = np.isfinite(est)
        sq[ok] += (est[ok] - truth_b[ok]) ** 2
        count[ok] += 1
    return b, sq, count
