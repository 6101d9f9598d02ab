"""Calibrated weights for marginal structural models with longitudinal ordinal treatment."""

import json as _json

from ._core import (
    Dataset,
    DataError,
    NumericalError,
    Weights,
    __version__,
    calibration_objective,
    load_long,
    parse_long,
    parse_weights,
    solve_calibration,
)
from . import _core

__all__ = [
    "Dataset",
    "DataError",
    "NumericalError",
    "Weights",
    "__version__",
    "bootstrap",
    "calibrate",
    "calibration_objective",
    "diagnose",
    "fit_msm",
    "fit_weights",
    "generate_cohort",
    "load_long",
    "parse_long",
    "parse_weights",
    "run_study",
    "scenario_config",
    "solve_calibration",
]


def _config(config):
    return _json.dumps(config or {})


def generate_cohort(n=500, T=10, scenario=1, covariates="correct", seed=1, replicate=0, noise_sd=20.0):
    """Simulated cohort; ``scenario`` 1 has no dropout, 2 has covariate-dependent dropout."""
    return _core._generate_cohort(n, T, str(scenario), covariates, seed, replicate, noise_sd)


def run_study(n=500, T=10, scenario=1, covariates="correct", seed=1, replicates=100, noise_sd=20.0, jobs=1,
              estimators=("mle", "cmle")):
    """Replication study; returns the summary, failures and per-replicate multiplier norms."""
    return _json.loads(
        _core._run_study(n, T, str(scenario), covariates, seed, replicates, noise_sd, jobs, list(estimators)))


def scenario_config(n=500, T=10, scenario=1, covariates="correct"):
    """Pipeline configuration used for simulated cohorts, as a dict."""
    return _json.loads(_core._scenario_config(n, T, str(scenario), covariates))


def fit_weights(data, config):
    """Fit the weight models and return the initial weights."""
    return _core._fit_weights(data, _config(config))


def calibrate(data, config, weights):
    """Calibrate ``weights``; returns (calibrated weights, solution dict)."""
    w, solution = _core._calibrate(data, _config(config), weights)
    return w, _json.loads(solution)


def diagnose(data, config, weights):
    """Restriction residuals of ``weights`` under the configured restrictions."""
    return _json.loads(_core._diagnose(data, _config(config), weights))


def fit_msm(data, config=None, weights=None):
    """Weighted least squares fit of the marginal structural model."""
    return _json.loads(_core._fit_msm(data, _config(config), weights))


def bootstrap(data, config, method="cmle", replicates=200, seed=1, jobs=1, max_failure_rate=0.2):
    """Point estimate with subject-level bootstrap standard errors of the full pipeline."""
    return _json.loads(_core._bootstrap(data, _config(config), method, replicates, seed, jobs, max_failure_rate))
