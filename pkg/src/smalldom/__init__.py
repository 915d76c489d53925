"""Small-domain estimation for skewed business-survey data.

Robust and non-robust estimators of domain totals (direct, calibrated,
mixed-model, M-regression and M-quantile families), influence
diagnostics, and a design-based Monte Carlo harness with a bootstrap
MSE estimator.  The numeric core is a compiled IRLS kernel with a pure
numpy fallback; :func:`backend` reports which one is active.
"""

from .design import (DesignSpec, StratumDesign, build_design,
                     default_allocation, draw_sample, load_allocation,
                     save_allocation)
from .diagnostics import (OlsFit, ReductionRule, cooks_distance, ols_fit,
                          qq_data, reduce_population)
from .direct import (DEFAULT_GROUPS, AuxSpec, calibrated_weights, cell_map,
                     greg_total, ht_total)
from .errors import (CalibrationError, ConvergenceError, DataError,
                     DegenerateScaleError, DesignError, DomainError, FitError,
                     SmallDomError, UsageError)
from .frame import (Population, Sample, Unit, domain_total, load_population,
                    load_sample, save_population, save_sample,
                    size_class_for_wp)
from .harness import (DEFAULT_ESTIMATORS, DEFAULT_SWEEP_GRID, BootstrapConfig,
                      BootstrapResult, EstimatorSpec, PopGenConfig,
                      SimulationReport, SweepResult, bootstrap_mse,
                      generate_population, parse_estimator, relative_bias,
                      relative_rrmse, run_simulation, sweep_bphi,
                      truth_totals)
from .kernels import backend
from .mixed import (ALL_PREDICTED, FORMULA_FULL, FORMULA_REDUCED,
                    OBSERVED_PLUS_PREDICTED, VARIANCE_BY_SC, VARIANCE_HOMO,
                    VARIANCE_WP2, MixedFit, ModelSpec, design_matrix,
                    eblup_total, fit_lmm, fit_lmm_xy, gamma_weighted,
                    information_criteria, pseudo_eblup_total)
from .mquantile import (DEFAULT_GRID, BiasAdjustConfig, MQFitGrid,
                        QCoefficients, fit_mq_grid, mq_cd_total,
                        mq_naive_total, mq_wr_total, robust_scale,
                        unit_q_coefficients)
from .robust import (DEFAULT_B_PSI, HuberConfig, RobustFit, RobustMixedFit,
                     fit_mreg, fit_mreg_xy, fit_reblup, fit_reblup_xy,
                     huber_psi, psi_correction_constant, reblup_total,
                     robust_synthetic_total)

__version__ = "0.1.0"

__all__ = [
    "ALL_PREDICTED", "AuxSpec", "BiasAdjustConfig", "BootstrapConfig",
    "BootstrapResult", "CalibrationError", "ConvergenceError", "DataError",
    "DEFAULT_B_PSI", "DEFAULT_ESTIMATORS", "DEFAULT_GRID", "DEFAULT_GROUPS",
    "DEFAULT_SWEEP_GRID", "DegenerateScaleError", "DesignError", "DesignSpec",
    "DomainError", "EstimatorSpec", "FitError", "FORMULA_FULL",
    "FORMULA_REDUCED", "HuberConfig", "MixedFit", "ModelSpec", "MQFitGrid",
    "OBSERVED_PLUS_PREDICTED", "OlsFit", "PopGenConfig", "Population",
    "QCoefficients", "ReductionRule", "RobustFit", "RobustMixedFit", "Sample",
    "SimulationReport", "SmallDomError", "StratumDesign", "SweepResult",
    "Unit", "UsageError", "VARIANCE_BY_SC", "VARIANCE_HOMO", "VARIANCE_WP2",
    "backend", "bootstrap_mse", "build_design", "calibrated_weights",
    "cell_map", "cooks_distance", "default_allocation", "design_matrix",
    "domain_total", "draw_sample", "eblup_total", "fit_lmm", "fit_lmm_xy",
    "fit_mq_grid", "fit_mreg", "fit_mreg_xy", "fit_reblup", "fit_reblup_xy",
    "gamma_weighted", "generate_population", "greg_total", "ht_total",
    "huber_psi", "information_criteria", "load_allocation", "load_population",
    "load_sample", "mq_cd_total", "mq_naive_total", "mq_wr_total",
    "ols_fit", "parse_estimator", "pseudo_eblup_total",
    "psi_correction_constant", "qq_data", "reblup_total", "reduce_population",
    "relative_bias", "relative_rrmse", "robust_scale",
    "robust_synthetic_total", "run_simulation", "save_allocation",
    "save_population", "save_sample", "size_class_for_wp", "sweep_bphi",
    "truth_totals", "unit_q_coefficients",
]
