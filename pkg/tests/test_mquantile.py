"""M-quantile grid fits, unit q-scores and the derived domain estimators."""

import warnings

import numpy as np
import pytest

from smalldom import kernels
from smalldom.design import DesignSpec, StratumDesign, draw_sample
from smalldom.errors import DomainError, FitError
from smalldom.frame import Population, Sample, domain_total
from smalldom.mixed import ModelSpec, design_matrix
from smalldom.mquantile import (
    DEFAULT_GRID,
    BiasAdjustConfig,
    MQFitGrid,
    fit_mq_grid,
    mq_cd_total,
    mq_naive_total,
    mq_wr_total,
    robust_scale,
    unit_q_coefficients,
)
from smalldom.robust import fit_mreg_xy, huber_psi

SPEC = ModelSpec("reduced")


@pytest.fixture(scope="module")
def mq_fit(small_sample):
    return fit_mq_grid(small_sample, SPEC)


@pytest.fixture(scope="module")
def mq_qc(small_sample, mq_fit):
    return unit_q_coefficients(small_sample, mq_fit)


@pytest.fixture(scope="module")
def mq_fit_w(small_sample):
    return fit_mq_grid(small_sample, SPEC, weights=small_sample.d)


@pytest.fixture(scope="module")
def mq_qc_w(small_sample, mq_fit_w):
    return unit_q_coefficients(small_sample, mq_fit_w)


def _noiseless_instance(seed=5, extra_domain=False):
    """Population with every size class and an exact linear tto."""
    rng = np.random.default_rng(seed)
    doms = ("A", "B", "C") if extra_domain else ("A", "B")
    sc = np.tile(np.repeat(np.arange(1, 6), 5), len(doms))
    wp_lo = {1: 1, 2: 2, 3: 5, 4: 10, 5: 20}
    wp = np.array([wp_lo[c] for c in sc], dtype=np.int64)
    n = 25 * len(doms)
    tax1 = rng.lognormal(3.0, 1.0, n).round(2)
    ind = np.repeat(doms, 25)
    pop = Population(ids=np.arange(1, n + 1, dtype=np.int64), ind=ind, sc=sc,
                     wp=wp, tax1=tax1, tto=3.0 + 2.0 * tax1)
    # domain C, when present, is deliberately left out of the design
    spec = DesignSpec(tuple(StratumDesign(ind=d, sc=c, N_h=5, n_h=3)
                            for d in ("A", "B") for c in range(1, 6)))
    return pop, draw_sample(spec, pop, 9)


class TestGridFit:
    def test_default_grid(self):
        grid = np.asarray(DEFAULT_GRID)
        assert len(grid) == 101
        assert grid[0] == 0.001 and grid[-1] == 0.999
        assert (np.diff(grid) > 0).all()

    def test_q_half_matches_m_regression(self, small_sample, mq_fit):
        X, _ = design_matrix(small_sample.tax1, small_sample.sc,
                             small_sample.wp, "reduced")
        mreg = fit_mreg_xy(X, small_sample.tto)
        j = int(np.argmin(np.abs(mq_fit.grid - 0.5)))
        np.testing.assert_allclose(mq_fit.beta[j], mreg.beta, rtol=1e-10)

    @pytest.mark.parametrize("q", [0.3, 0.7])
    def test_warm_start_matches_cold_fit(self, mq_fit, q):
        j = int(np.argmin(np.abs(mq_fit.grid - q)))
        cold, _, _, status = kernels.irls_huber(mq_fit.X, mq_fit.y,
                                                float(mq_fit.grid[j]), mq_fit.b)
        assert status == kernels.CONVERGED
        np.testing.assert_allclose(mq_fit.beta[j], cold, rtol=1e-4)

    def test_intercept_only_huge_b_is_mean(self):
        X = np.ones((3, 1))
        y = np.array([1.0, 2.0, 3.0])
        beta, _, _, _ = kernels.irls_huber(X, y, 0.5, 1e6)
        assert beta[0] == pytest.approx(2.0, abs=1e-9)

    def test_intercept_only_monotone_in_q(self):
        X = np.ones((3, 1))
        y = np.array([1.0, 2.0, 3.0])
        betas = [kernels.irls_huber(X, y, q, 1.345)[0][0]
                 for q in (0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95)]
        assert (np.diff(betas) >= -1e-12).all()
        # symmetric sample: beta(q) + beta(1-q) = 2 * centre
        assert betas[1] + betas[-2] == pytest.approx(4.0, abs=1e-6)

    @pytest.mark.parametrize("grid, msg", [
        ([0.5], "at least 2"),
        ([0.2, 0.2, 0.4], "increasing"),
        ([0.4, 0.2], "increasing"),
        ([0.0, 0.5], "inside"),
        ([0.5, 1.0], "inside"),
    ])
    def test_grid_validation(self, small_sample, grid, msg):
        with pytest.raises(ValueError, match=msg):
            fit_mq_grid(small_sample, SPEC, grid=grid)

    def test_weights_length_mismatch(self, small_sample):
        with pytest.raises(ValueError, match="length"):
            fit_mq_grid(small_sample, SPEC, weights=np.ones(3))

    def test_weighted_flag_recorded(self, mq_fit, mq_fit_w):
        assert not mq_fit.weighted
        assert mq_fit_w.weighted
        assert mq_fit.formula == "reduced"


class TestCoefAt:
    def test_exact_grid_point_returns_grid_row(self, mq_fit):
        np.testing.assert_array_equal(mq_fit.coef_at(0.25), mq_fit.beta[25])

    def test_interpolate_midpoint_is_blend(self, mq_fit):
        mid = 0.5 * (mq_fit.grid[40] + mq_fit.grid[41])
        blend = 0.5 * (mq_fit.beta[40] + mq_fit.beta[41])
        np.testing.assert_allclose(mq_fit.coef_at(float(mid), interpolate=True),
                                   blend, atol=1e-12)

    def test_refit_off_grid_matches_cold(self, mq_fit):
        q = 0.437
        cold, _, _, _ = kernels.irls_huber(mq_fit.X, mq_fit.y, q, mq_fit.b)
        np.testing.assert_allclose(mq_fit.coef_at(q), cold, rtol=1e-4)

    def test_cache_hit_returns_same_array(self, mq_fit):
        assert mq_fit.coef_at(0.437) is mq_fit.coef_at(0.437)

    @pytest.mark.parametrize("q", [0.0, 1.0, -0.2, 1.7])
    def test_q_outside_unit_interval(self, mq_fit, q):
        with pytest.raises(ValueError, match="outside"):
            mq_fit.coef_at(q)


class TestQCoefficients:
    def test_scores_match_bisection(self, mq_fit, mq_qc):
        ok = np.flatnonzero(~mq_qc.clipped & ~mq_qc.nonmonotone)
        pick = np.random.default_rng(3).choice(ok, 8, replace=False)
        for i in pick:
            xi, yv = mq_fit.X[i], mq_fit.y[i]

            def f(q):
                j = int(np.argmin(np.abs(mq_fit.grid - q)))
                beta, _, _, _ = kernels.irls_huber(mq_fit.X, mq_fit.y, q,
                                                   mq_fit.b, beta0=mq_fit.beta[j])
                return float(xi @ beta) - yv

            lo, hi = 0.001, 0.999
            flo = f(lo)
            assert flo * f(hi) <= 0
            for _ in range(25):
                mid = 0.5 * (lo + hi)
                if flo * f(mid) <= 0:
                    hi = mid
                else:
                    lo = mid
                    flo = f(lo)
            assert abs(0.5 * (lo + hi) - mq_qc.q[i]) < 0.01

    def test_flags_and_hand_values(self):
        # fitted values per unit across the grid: [0, 1, 0.5]
        pop = Population(ids=np.array([1, 2, 3], dtype=np.int64),
                         ind=np.array(["A", "A", "A"]),
                         sc=np.ones(3, dtype=np.int64), wp=np.ones(3, dtype=np.int64),
                         tax1=np.ones(3), tto=np.array([0.75, 2.0, -1.0]))
        sam = Sample(parent=pop, row_idx=np.arange(3, dtype=np.int64),
                     pi=np.array([1.0, 0.5, 0.25]), n_h={("A", 1): 3})
        fg = MQFitGrid(grid=np.array([0.1, 0.5, 0.9]),
                       beta=np.array([[0.0], [1.0], [0.5]]), scale=np.ones(3),
                       beta_names=["const"], b=1.345, formula="reduced",
                       weighted=False, X=np.ones((3, 1)), y=pop.tto)
        qc = unit_q_coefficients(sam, fg)
        # unit 1 crosses twice, first at t = 0.75 into [0.1, 0.5]
        np.testing.assert_allclose(qc.q, [0.4, 0.9, 0.1], atol=1e-12)
        assert qc.clipped.tolist() == [False, True, True]
        assert qc.nonmonotone.tolist() == [True, False, False]
        assert qc.qbar["A"] == pytest.approx(1.4 / 3)
        # d = 1, 2, 4
        assert qc.qtilde["A"] == pytest.approx((0.4 + 1.8 + 0.4) / 7)

    def test_census_qtilde_equals_qbar(self):
        pop, _ = _noiseless_instance()
        census = DesignSpec(tuple(StratumDesign(ind=d, sc=c, N_h=5, n_h=5)
                                  for d in ("A", "B") for c in range(1, 6)))
        sam = draw_sample(census, pop, 1)
        fit = fit_mq_grid(sam, SPEC, grid=np.linspace(0.1, 0.9, 9))
        qc = unit_q_coefficients(sam, fit)
        for d in ("A", "B"):
            assert qc.qtilde[d] == pytest.approx(qc.qbar[d], rel=1e-12)

    def test_flag_counts_are_small(self, mq_qc):
        n = len(mq_qc.q)
        assert 0 < mq_qc.clipped.sum() < 0.2 * n
        assert mq_qc.nonmonotone.sum() < 0.25 * n
        assert ((mq_qc.q >= 0.001) & (mq_qc.q <= 0.999)).all()


class TestRobustScale:
    def test_known_value(self):
        assert robust_scale([-1.0, 0.0, 1.0]) == pytest.approx(
            1.0 / kernels.MAD_NORMAL, rel=1e-12)

    def test_scale_equivariance(self):
        r = np.array([-1.0, 0.0, 1.0])
        assert robust_scale(37.0 * r) == pytest.approx(
            37.0 * robust_scale(r), rel=1e-12)

    def test_degenerate_warns_and_returns_zero(self):
        with pytest.warns(UserWarning, match="degenerate robust scale in domain I03"):
            assert robust_scale([5.0, 5.0, 5.0], domain="I03") == 0.0

    def test_empty_raises(self):
        with pytest.raises(ValueError, match="at least one"):
            robust_scale([])


class TestEstimators:
    def test_naive_assembly(self, small_pop, small_sample, mq_fit, mq_qc):
        for use_qtilde in (False, True):
            dom = small_sample.domains[2]
            q_d = (mq_qc.qtilde if use_qtilde else mq_qc.qbar)[dom]
            beta = mq_fit.coef_at(q_d)
            rows_s = small_sample.domain_rows(dom)
            rows_p = small_pop.domain_rows(dom)
            Xp, _ = design_matrix(small_pop.tax1[rows_p], small_pop.sc[rows_p],
                                  small_pop.wp[rows_p], "reduced")
            hand = (small_sample.tto[rows_s].sum()
                    + (Xp.sum(0) - mq_fit.X[rows_s].sum(0)) @ beta)
            got = mq_naive_total(small_sample, small_pop, mq_fit, mq_qc, dom,
                                 use_qtilde=use_qtilde)
            assert got == pytest.approx(float(hand), rel=1e-12)

    def test_cd_assembly(self, small_pop, small_sample, mq_fit, mq_qc):
        dom = small_sample.domains[2]
        beta = mq_fit.coef_at(mq_qc.qbar[dom])
        rows_s = small_sample.domain_rows(dom)
        rows_p = small_pop.domain_rows(dom)
        naive = mq_naive_total(small_sample, small_pop, mq_fit, mq_qc, dom)
        resid = small_sample.tto[rows_s] - mq_fit.X[rows_s] @ beta
        hand = naive + (len(rows_p) - len(rows_s)) / len(rows_s) * resid.sum()
        got = mq_cd_total(small_sample, small_pop, mq_fit, mq_qc, dom)
        assert got == pytest.approx(float(hand), rel=1e-12)

    def test_wr_assembly(self, small_pop, small_sample, mq_fit, mq_qc):
        dom = small_sample.domains[2]
        beta = mq_fit.coef_at(mq_qc.qbar[dom])
        rows_s = small_sample.domain_rows(dom)
        rows_p = small_pop.domain_rows(dom)
        naive = mq_naive_total(small_sample, small_pop, mq_fit, mq_qc, dom)
        resid = small_sample.tto[rows_s] - mq_fit.X[rows_s] @ beta
        omega = robust_scale(resid)
        adj = omega * huber_psi(resid / omega, 1.0).sum()
        hand = naive + (len(rows_p) - len(rows_s)) / len(rows_s) * adj
        got = mq_wr_total(small_sample, small_pop, mq_fit, mq_qc, dom)
        assert got == pytest.approx(float(hand), rel=1e-12)

    def test_weighted_cd_assembly(self, small_pop, small_sample, mq_fit_w, mq_qc_w):
        dom = small_sample.domains[2]
        beta = mq_fit_w.coef_at(mq_qc_w.qbar[dom])
        rows_s = small_sample.domain_rows(dom)
        rows_p = small_pop.domain_rows(dom)
        Xp, _ = design_matrix(small_pop.tax1[rows_p], small_pop.sc[rows_p],
                              small_pop.wp[rows_p], "reduced")
        w = small_sample.d[rows_s]
        hand = (w @ small_sample.tto[rows_s]
                + (Xp.sum(0) - (mq_fit_w.X[rows_s] * w[:, None]).sum(0)) @ beta)
        got = mq_cd_total(small_sample, small_pop, mq_fit_w, mq_qc_w, dom,
                          weighted=True)
        assert got == pytest.approx(float(hand), rel=1e-12)

    def test_wr_limits(self, small_pop, small_sample, mq_fit, mq_qc):
        dom = small_sample.domains[0]
        naive = mq_naive_total(small_sample, small_pop, mq_fit, mq_qc, dom)
        cd = mq_cd_total(small_sample, small_pop, mq_fit, mq_qc, dom)
        wide = mq_wr_total(small_sample, small_pop, mq_fit, mq_qc, dom,
                           BiasAdjustConfig(b_phi=1e9))
        narrow = mq_wr_total(small_sample, small_pop, mq_fit, mq_qc, dom,
                             BiasAdjustConfig(b_phi=1e-9))
        assert wide == pytest.approx(cd, rel=1e-9)
        assert narrow == pytest.approx(naive, rel=1e-9)

    def test_interpolate_close_to_refit(self, small_pop, small_sample, mq_fit, mq_qc):
        for dom in small_sample.domains:
            exact = mq_naive_total(small_sample, small_pop, mq_fit, mq_qc, dom)
            approx = mq_naive_total(small_sample, small_pop, mq_fit, mq_qc, dom,
                                    interpolate=True)
            assert approx == pytest.approx(exact, rel=1e-3)

    def test_census_totals_exact(self, small_pop):
        strata = [StratumDesign(ind=i, sc=c, N_h=N, n_h=N)
                  for (i, c), N in small_pop.strata.items()]
        census = draw_sample(DesignSpec(tuple(strata)), small_pop, 1)
        grid = np.round(np.linspace(0.1, 0.9, 9), 2)
        fit = fit_mq_grid(census, SPEC, grid=grid)
        fit_w = fit_mq_grid(census, SPEC, grid=grid, weights=census.d)
        qc = unit_q_coefficients(census, fit)
        qc_w = unit_q_coefficients(census, fit_w)
        for dom in small_pop.domains:
            truth = domain_total(small_pop, "tto", dom)
            for est in (mq_naive_total(census, small_pop, fit, qc, dom),
                        mq_cd_total(census, small_pop, fit, qc, dom),
                        mq_cd_total(census, small_pop, fit_w, qc_w, dom, weighted=True),
                        mq_wr_total(census, small_pop, fit, qc, dom)):
                assert est == pytest.approx(truth, rel=1e-10)

    def test_noiseless_fit_is_exact(self):
        pop, sam = _noiseless_instance()
        fit = fit_mq_grid(sam, SPEC)
        qc = unit_q_coefficients(sam, fit)
        assert fit.scale.max() == 0.0
        for dom in ("A", "B"):
            truth = domain_total(pop, "tto", dom)
            assert mq_naive_total(sam, pop, fit, qc, dom) == pytest.approx(truth, rel=1e-9)
            assert mq_cd_total(sam, pop, fit, qc, dom) == pytest.approx(truth, rel=1e-9)
            # degenerate domain scale falls back to the all-sample scale,
            # also degenerate: the adjustment drops and naive is returned
            assert mq_wr_total(sam, pop, fit, qc, dom) == pytest.approx(truth, rel=1e-9)

    def test_weighted_needs_weighted_grid(self, small_pop, small_sample, mq_fit, mq_qc):
        dom = small_sample.domains[0]
        with pytest.raises(FitError, match="weighted grid"):
            mq_naive_total(small_sample, small_pop, mq_fit, mq_qc, dom, weighted=True)
        with pytest.raises(FitError, match="weighted grid"):
            mq_cd_total(small_sample, small_pop, mq_fit, mq_qc, dom, weighted=True)

    def test_unsampled_domain_raises(self):
        pop, sam = _noiseless_instance(extra_domain=True)
        fit = fit_mq_grid(sam, SPEC, grid=np.linspace(0.2, 0.8, 7))
        qc = unit_q_coefficients(sam, fit)
        for fn in (mq_naive_total, mq_cd_total, mq_wr_total):
            with pytest.raises(DomainError, match="no sampled units"):
                fn(sam, pop, fit, qc, "C")
