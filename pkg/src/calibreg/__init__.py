"""Probabilistic calibration of regression models: recalibration, conformal prediction and regularized training."""

from .calibration import CalibrationMap, MapKind, RecalibratedDistribution, fit_calibration_map, map_apply, map_inverse, recalibrate
from .conformal import ConformalCalibrator, ScoreKind, conformal_threshold, conformalized_quantile, conformity_scores, fit_conformal
from .distributions import GaussianMixture, QuantileGrid, cdf, crps_grid, crps_mixture, nll, pit, quantile, sharpness_std
from .metrics import EvaluationReport, ReliabilityCurve, consistency_band, evaluate, pce, reliability_curve
from .stats import cd_ranking, cohens_d, friedman_test, holm_correct, letter_values, p_value_upper, simulate_null_pce, wilcoxon_signed_rank

__version__ = "0.1.0"

__all__ = [
    "CalibrationMap",
    "ConformalCalibrator",
    "EvaluationReport",
    "GaussianMixture",
    "MapKind",
    "QuantileGrid",
    "RecalibratedDistribution",
    "ReliabilityCurve",
    "ScoreKind",
    "cd_ranking",
    "cdf",
    "cohens_d",
    "conformal_threshold",
    "conformalized_quantile",
    "conformity_scores",
    "consistency_band",
    "crps_grid",
    "crps_mixture",
    "evaluate",
    "fit_calibration_map",
    "fit_conformal",
    "friedman_test",
    "holm_correct",
    "letter_values",
    "map_apply",
    "map_inverse",
    "nll",
    "p_value_upper",
    "pce",
    "pit",
    "quantile",
    "recalibrate",
    "reliability_curve",
    "sharpness_std",
    "simulate_null_pce",
    "wilcoxon_signed_rank",
]
