"""SVI smile calibration from bid-ask quotes with bias-corrected data augmentation."""

from smilecal.anchor import AnchorResult, compute_anchor, nu_from_rho, rho_condition_report
from smilecal.augmentation import AugmentedQuote, augment_quote, beta_cell_weights, solve_beta_a
from smilecal.calibration import (
    CalibrationConfig,
    CalibrationReport,
    ErrorMetrics,
    Method,
    calibrate_smile,
    error_metrics,
    init_guess,
    objective,
)
from smilecal.market_data import MarketPoint, OptionType, Quote, prepare_points, read_quotes_csv, repair_bid
from smilecal.pricing import BlackInputs, black_price_fwd, greeks, implied_vol, iv2_derivs, iv_sensitivity
from smilecal.svi import REFERENCE_PARAMS, SviParams, butterfly_g, svi_total_variance, validate_svi
from smilecal.synthetic import USE_CASES, UseCaseSpec, generate_scenario, roundoff_uniformity_check, run_experiment

__all__ = [
    "AnchorResult", "AugmentedQuote", "BlackInputs", "CalibrationConfig", "CalibrationReport",
    "ErrorMetrics", "REFERENCE_PARAMS", "MarketPoint", "Method", "OptionType", "Quote", "SviParams",
    "USE_CASES", "UseCaseSpec", "augment_quote", "beta_cell_weights", "black_price_fwd", "butterfly_g",
    "calibrate_smile", "compute_anchor", "error_metrics", "generate_scenario", "greeks", "implied_vol",
    "init_guess", "iv2_derivs", "iv_sensitivity", "nu_from_rho", "objective", "prepare_points",
    "read_quotes_csv", "repair_bid", "rho_condition_report", "roundoff_uniformity_check",
    "run_experiment", "solve_beta_a", "svi_total_variance", "validate_svi",
]
