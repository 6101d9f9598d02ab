import json
import math
import os

import numpy as np
import pytest

import msmcal

DATA_DIR = os.environ.get("MSMCAL_DATA_DIR", os.path.join(os.path.dirname(__file__), "..", "..", "data"))

TOY_CONFIG = {
    "numerator0": "1 + a0@1 + a1@1",
    "numerator1": "1 + a0@1 + a1@1",
    "denominator0": "1 + a0@1 + a1@1 + x1@1 + x2@1 + x3@1 + x4@1",
    "denominator1": "1 + a0@1 + a1@1 + x1@1 + x2@1 + x3@1 + x4@1",
    "probe0": "1 + x1@1 + x2@1 + x3@1 + x4@1",
    "probe1": "1 + x1@1 + x2@1 + x3@1 + x4@1",
    "censoring": "visit + a0@1 + a1@1 + x1@1 + x2@1 + x3@1 + x4@1",
}


@pytest.fixture(scope="module")
def toy():
    return msmcal.load_long(os.path.join(DATA_DIR, "toy50.csv"))


def test_dataset_shape(toy):
    assert toy.subjects == 50
    assert toy.last_visit == 10
    assert toy.treatment_kind == "ordinal3"
    r = toy.column("r")
    assert r.shape == (50, 11)
    assert np.all(r[:, 0] == 1)
    assert set(toy.covariates) >= {"x1", "x2", "x3", "x4"}


def test_toy_pipeline_balances_restrictions(toy):
    w0 = msmcal.fit_weights(toy, TOY_CONFIG)
    assert np.all(w0.flatten() > 0)
    before = msmcal.diagnose(toy, TOY_CONFIG, w0)
    assert before["max_abs_residual"] > 1e-3 * before["residual_scale"]

    w1, solution = msmcal.calibrate(toy, TOY_CONFIG, w0)
    assert solution["converged"]
    after = msmcal.diagnose(toy, TOY_CONFIG, w1)
    assert after["max_abs_residual"] <= 1e-8 * after["residual_scale"]

    estimate = msmcal.fit_msm(toy, TOY_CONFIG, w1)
    assert list(estimate["coefficients"]) == ["(Intercept)", "cum_a01", "cum_a1"]


def test_weights_csv_round_trip(toy):
    w = msmcal.fit_weights(toy, TOY_CONFIG)
    back = msmcal.parse_weights(w.to_csv())
    assert np.array_equal(back.flatten(), w.flatten())


def test_closed_form_calibration():
    w0 = np.array([0.7, 1.3, 2.1, 0.4, 1.0, 0.9])
    K = np.array([[1.0], [0.0], [1.0], [1.0], [0.0], [1.0]])
    sol = msmcal.solve_calibration(w0, K, np.array([3.5]))
    assert sol["converged"]
    assert abs(sol["lambda"][0] - math.log(3.5 / 4.1)) <= 1e-10


def test_objective_derivatives():
    rng = np.random.default_rng(3)
    K = rng.normal(size=(8, 3))
    w0 = rng.uniform(0.5, 2.0, size=8)
    l = rng.normal(size=3)
    lam = 0.3 * rng.normal(size=3)
    value, grad, hess = msmcal.calibration_objective(w0, K, l, lam)
    assert value == pytest.approx(np.sum(w0 * np.exp(K @ lam)) - l @ lam, rel=1e-14)
    assert np.allclose(grad, K.T @ (w0 * np.exp(K @ lam)) - l, atol=1e-12)
    assert np.allclose(hess, K.T @ np.diag(w0 * np.exp(K @ lam)) @ K, atol=1e-12)


def test_simulation_is_seeded():
    a = msmcal.generate_cohort(n=40, T=3, scenario=2, seed=5, replicate=2)
    b = msmcal.generate_cohort(n=40, T=3, scenario=2, seed=5, replicate=2)
    assert a.to_csv() == b.to_csv()
    study = msmcal.run_study(n=200, T=3, seed=1, replicates=4, jobs=2)
    assert [row["estimator"] for row in study["summary"]] == ["mle", "mle", "cmle", "cmle"]
    assert len(study["lambda_inf"]) == 4


def test_bootstrap_is_deterministic():
    data = msmcal.generate_cohort(n=150, T=3, seed=4)
    config = msmcal.scenario_config(n=150, T=3)
    a = msmcal.bootstrap(data, config, replicates=20, seed=11)
    b = msmcal.bootstrap(data, config, replicates=20, seed=11, jobs=2)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert all(se > 0 for se in a["bootstrap_se"].values())


def test_errors_map_to_exceptions(toy):
    with pytest.raises(msmcal.DataError):
        msmcal.parse_long("id,visit,r,y,a0,a1\n1,0,1,1,0,1\n")
    with pytest.raises(ValueError):
        msmcal.fit_weights(toy, {"numerator0": "1", "denominator0": "1 + nosuch@1"})
    full = dict(TOY_CONFIG, probe0=TOY_CONFIG["denominator0"], probe1=TOY_CONFIG["denominator1"])
    w0 = msmcal.fit_weights(toy, full)
    with pytest.raises(msmcal.NumericalError):
        msmcal.calibrate(toy, full, w0)
