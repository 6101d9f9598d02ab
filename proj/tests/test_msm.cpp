#include "doctest.h"
#include "oracles.hpp"
#include "support.hpp"

#include <Eigen/LU>

#include <cmath>
#include <random>

#include "msmcal/error.hpp"
#include "msmcal/msm.hpp"
#include "msmcal/pipeline.hpp"
#include "msmcal/simulate.hpp"

using namespace msmcal;

namespace {

LongitudinalDataset with_outcome(const LongitudinalDataset& d, const Eigen::MatrixXd& y) {
  std::map<std::string, Eigen::MatrixXd> cols;
  for (const auto& c : d.file_columns()) cols[c] = d.column(c);
  cols["y"] = y;
  return LongitudinalDataset(d.treatment_kind(), d.ids(), d.covariates(), cols);
}

}  // namespace

using oracles::iid_sample;
using oracles::sample_mean;

TEST_CASE("unit weights with one coefficient per visit give visit means") {
  const auto d = testing::cohort(6, 40, 3, true);
  MsmSpec spec{"visit + cum_a1", "y", {"cum_a1"}, {1, 3}};
  spec.formula = "visit";
  spec.treatment_terms.clear();
  CHECK_THROWS_WITH_AS(fit_msm(d, spec, unit_weights(d, {1, 3})), doctest::Contains("no treatment terms"), DataError);

  // Saturated in visit via a treatment-free formula fitted through the WLS primitive.
  const auto X = build_design(d, {"visit", "y", std::nullopt}, {1, 3});
  const auto b = weighted_least_squares(X, X.response, Eigen::VectorXd::Ones(X.size()));
  for (int j = 1; j <= 3; ++j) {
    double s = 0;
    int c = 0;
    for (Index i = 0; i < d.subjects(); ++i)
      if (d.observed(i, j)) {
        s += d.value("y", i, j);
        ++c;
      }
    CHECK(b(j - 1) == doctest::Approx(s / c).epsilon(1e-12));
  }
}

TEST_CASE("weighted least squares matches the normal equations") {
  DesignMatrix X;
  X.X.resize(6, 2);
  X.X << 1, 0.5, 1, 1.5, 1, -0.3, 1, 2.2, 1, 0.9, 1, -1.1;
  X.names = {"(Intercept)", "x"};
  Eigen::VectorXd y(6), w(6);
  y << 1.2, 3.1, 0.4, 4.8, 2.0, -0.7;
  w << 1, 2, 1, 1, 2, 1;
  const auto b = weighted_least_squares(X, y, w);
  const Eigen::MatrixXd A = X.X.transpose() * w.asDiagonal() * X.X;
  const Eigen::VectorXd expect = A.inverse() * (X.X.transpose() * w.asDiagonal() * y);
  CHECK((b - expect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(weighted_least_squares(X, y, Eigen::VectorXd::Zero(6)), NumericalError);
  X.X.col(1) = 2 * X.X.col(0);
  CHECK_THROWS_AS(weighted_least_squares(X, y, w), NumericalError);
}

TEST_CASE("MSM fit properties on simulated data") {
  ScenarioConfig sc;
  sc.n = 400;
  sc.seed = 77;
  sc.censoring = CensoringScenario::covariate_dependent;
  const auto d = generate_cohort(sc, 0);
  const auto cfg = scenario_pipeline(sc);
  const auto fitted = fit_initial_weights(d, cfg);
  const auto cal = calibrate_weights(d, cfg, fitted);
  MsmSpec spec = cfg.msm;
  spec.range = {1, 10};

  for (const auto* w : {&fitted.initial, &cal.calibrated}) {
    const auto e = fit_msm(d, spec, *w);
    CHECK(e.treatment_terms == std::vector<std::string>{"cum_a01", "cum_a1"});
    const auto X = build_design(d, {spec.formula, "y", std::nullopt}, spec.range);
    const Eigen::VectorXd wv = w->flatten(X.rows);
    const Eigen::VectorXd resid = X.response - X.X * e.coefficients;
    const Eigen::VectorXd orth = X.X.transpose() * wv.cwiseProduct(resid);
    CHECK(orth.cwiseAbs().maxCoeff() <= 1e-8);

    WeightMatrix scaled = *w;
    scaled.values *= 7.5;
    const auto e2 = fit_msm(d, spec, scaled);
    CHECK((e2.coefficients - e.coefficients).cwiseAbs().maxCoeff() <= 1e-10);
  }
  const auto csv = format_estimate_csv(fit_msm(d, spec, cal.calibrated));
  CHECK(csv.rfind("coefficient,estimate,se\n(Intercept),", 0) == 0);
}

TEST_CASE("treatment terms must vanish without treatment") {
  const auto d = testing::cohort(2, 30, 2, false);
  MsmSpec spec{"1 + cum_a01 + x1", "y", {"x1"}, {1, 2}};
  CHECK_THROWS_WITH_AS(fit_msm(d, spec, unit_weights(d, {1, 2})),
                       doctest::Contains("does not vanish at zero treatment history"), DataError);
  spec.treatment_terms = {"cum_a01"};
  CHECK_NOTHROW(fit_msm(d, spec, unit_weights(d, {1, 2})));
}

TEST_CASE("generating weights recover the true effects") {
  ScenarioConfig sc;
  sc.n = 2500;
  sc.seed = 5;
  const auto d = generate_cohort(sc, 0);
  const auto cfg = scenario_pipeline(sc);
  const auto num = fit_treatment_model(d, cfg.numerator, {1, 10});
  MsmSpec spec = cfg.msm;
  spec.range = {1, 10};
  const auto e = fit_msm(d, spec, true_weights(d, sc, num));
  // Monte Carlo SD at n = 2500 is about 0.3 for both coefficients.
  CHECK(std::abs(e.coefficient("cum_a01") - kTrueGamma1) < 1.0);
  CHECK(std::abs(e.coefficient("cum_a1") - kTrueGamma2) < 1.0);
}

TEST_CASE("bootstrap") {
  SUBCASE("noise-free outcome gives zero standard errors") {
    const auto base = testing::cohort(3, 60, 3, false);
    Eigen::MatrixXd y = 5.0 + 10.0 * base.column("cum_a01").array() + 20.0 * base.column("cum_a1").array();
    const auto d = with_outcome(base, y);
    MsmSpec spec{"1 + cum_a01 + cum_a1", "y", {}, {1, 3}};
    const auto res = bootstrap(d, [&](const LongitudinalDataset& s) {
      return fit_msm(s, spec, unit_weights(s, {1, 3}));
    }, {50, 9, 1, 0.2});
    CHECK(res.used == 50);
    CHECK(res.se.cwiseAbs().maxCoeff() < 1e-8);
  }
  SUBCASE("mean of an iid sample matches the analytic standard error") {
    const auto d = iid_sample(200, 12);
    const Eigen::VectorXd y = d.column("y").col(1);
    const double s = std::sqrt((y.array() - y.mean()).square().sum() / (y.size() - 1.0));
    const auto res = bootstrap(d, sample_mean, {2000, 2024, 1, 0.2});
    CHECK(std::abs(res.se(0) / (s / std::sqrt(200.0)) - 1.0) <= 0.10);
  }
  SUBCASE("fixed seed gives identical results for any number of jobs") {
    const auto d = iid_sample(50, 3);
    const auto a = bootstrap(d, sample_mean, {300, 7, 1, 0.2});
    const auto b = bootstrap(d, sample_mean, {300, 7, 1, 0.2});
    const auto c = bootstrap(d, sample_mean, {300, 7, 4, 0.2});
    CHECK(a.se(0) == b.se(0));
    CHECK(a.se(0) == c.se(0));
    CHECK(a.estimates == c.estimates);
    const auto other = bootstrap(d, sample_mean, {300, 8, 1, 0.2});
    CHECK(other.se(0) != a.se(0));
  }
  SUBCASE("failed replicates are excluded and counted") {
    const auto d = iid_sample(30, 4);
    int calls = 0;
    const auto flaky = [&](const LongitudinalDataset& s) {
      if (s.column("y").col(1).mean() > 3.2) throw NumericalError("did not converge");
      return sample_mean(s);
    };
    (void)calls;
    try {
      const auto res = bootstrap(d, flaky, {200, 1, 1, 1.0});
      CHECK(res.failed > 0);
      CHECK(res.used + res.failed == 200);
      CHECK(res.failures.front().find("did not converge") != std::string::npos);
    } catch (const NumericalError&) {
      FAIL("failure rate limit of 1.0 should not abort");
    }
    CHECK_THROWS_WITH_AS(bootstrap(d, flaky, {200, 1, 1, 0.0}), doctest::Contains("bootstrap failure rate"),
                         NumericalError);
  }
  SUBCASE("resamples are deterministic per replicate") {
    CHECK(bootstrap_sample(10, 5, 3) == bootstrap_sample(10, 5, 3));
    CHECK(bootstrap_sample(10, 5, 3) != bootstrap_sample(10, 5, 4));
    for (auto i : bootstrap_sample(10, 5, 3)) CHECK((i >= 0 && i < 10));
  }
}
