#include "doctest.h"
#include "oracles.hpp"
#include "support.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <random>

#include "msmcal/calibrate.hpp"
#include "msmcal/pipeline.hpp"
#include "msmcal/simulate.hpp"

using namespace msmcal;

namespace {

// Scenario 1 cohort with fitted initial weights and the ordinal + per-visit normalization system.
struct Instance {
  LongitudinalDataset data;
  PipelineConfig config;
  WeightingResult fitted;
  RestrictionSystem system;
};

Instance scenario_instance(std::uint64_t seed, Index n, CensoringScenario censoring) {
  ScenarioConfig sc;
  sc.n = n;
  sc.seed = seed;
  sc.censoring = censoring;
  auto data = generate_cohort(sc, 0);
  auto config = scenario_pipeline(sc);
  auto fitted = fit_initial_weights(data, config);
  auto system = build_restrictions(data, config, fitted);
  return {std::move(data), std::move(config), std::move(fitted), std::move(system)};
}

}  // namespace

using oracles::dense_system;

TEST_CASE("objective at simple points") {
  std::mt19937_64 gen(1);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd K(5, 2);
  for (auto& v : K.reshaped()) v = nd(gen);
  const Eigen::VectorXd w0 = Eigen::VectorXd::LinSpaced(5, 0.5, 2.5);
  const Eigen::Vector2d l(0.3, -0.2);
  const auto t = objective_grad_hess(w0, K, l, Eigen::Vector2d::Zero());
  CHECK(t.value == doctest::Approx(w0.sum()));
  CHECK((t.gradient - (K.transpose() * w0 - l)).cwiseAbs().maxCoeff() < 1e-14);

  const auto one = objective_grad_hess(Eigen::Vector2d(1, 1), Eigen::MatrixXd::Ones(2, 1), Eigen::VectorXd::Constant(1, 2),
                                       Eigen::VectorXd::Constant(1, std::log(2.0)));
  CHECK(one.value == doctest::Approx(4 - 2 * std::log(2.0)).epsilon(1e-14));
  CHECK(one.gradient(0) == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("gradient and Hessian match finite differences") {
  std::mt19937_64 gen(2);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd K(7, 3);
  for (auto& v : K.reshaped()) v = nd(gen);
  Eigen::VectorXd w0(7), l(3);
  for (auto& v : w0) v = 0.5 + std::abs(nd(gen));
  for (auto& v : l) v = nd(gen);
  const double h = 1e-6;
  for (int rep = 0; rep < 10; ++rep) {
    Eigen::VectorXd lam(3);
    for (auto& v : lam) v = 0.5 * nd(gen);
    const auto t = objective_grad_hess(w0, K, l, lam);
    CHECK(t.hessian == t.hessian.transpose());
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(t.hessian);
    CHECK(eig.eigenvalues().minCoeff() >= -1e-12 * eig.eigenvalues().cwiseAbs().maxCoeff());
    for (Index q = 0; q < 3; ++q) {
      Eigen::VectorXd p = lam, m = lam;
      p(q) += h;
      m(q) -= h;
      const auto tp = objective_grad_hess(w0, K, l, p), tm = objective_grad_hess(w0, K, l, m);
      const double fd = (tp.value - tm.value) / (2 * h);
      CHECK(std::abs(fd - t.gradient(q)) <= 1e-6 * std::max(1.0, std::abs(t.gradient(q))));
      const Eigen::VectorXd fdh = (tp.gradient - tm.gradient) / (2 * h);
      CHECK((fdh - t.hessian.col(q)).cwiseAbs().maxCoeff() <= 1e-4 * std::max(1.0, t.hessian.col(q).cwiseAbs().maxCoeff()));
    }
  }
}

TEST_CASE("exponent guard") {
  const Eigen::MatrixXd K = Eigen::MatrixXd::Ones(2, 1);
  CHECK_THROWS_AS(objective_grad_hess(Eigen::Vector2d(1, 1), K, Eigen::VectorXd::Ones(1),
                                      Eigen::VectorXd::Constant(1, 701.0)),
                  StepTooLarge);
}

TEST_CASE("already satisfied restrictions return zero") {
  Eigen::MatrixXd K(4, 2);
  K << 1, 0.5, 1, -0.5, 1, 1, 1, -1;
  const Eigen::VectorXd w0 = Eigen::VectorXd::Ones(4);
  const auto s = dense_system(K, K.transpose() * w0);
  const auto sol = solve(w0, s);
  CHECK(sol.converged);
  CHECK(sol.iterations == 0);
  CHECK(sol.lambda.isZero());
}

TEST_CASE("single indicator column has a closed-form multiplier") {
  Eigen::VectorXd w0(6);
  w0 << 0.7, 1.3, 2.1, 0.4, 1.0, 0.9;
  Eigen::MatrixXd K(6, 1);
  K << 1, 0, 1, 1, 0, 1;
  const double l = 3.5;
  const auto sol = solve(w0, dense_system(K, Eigen::VectorXd::Constant(1, l)));
  REQUIRE(sol.converged);
  const double expect = std::log(l / (0.7 + 2.1 + 0.4 + 0.9));
  CHECK(std::abs(sol.lambda(0) - expect) <= 1e-10);
}

TEST_CASE("infeasible restrictions are flagged") {
  const Eigen::MatrixXd K = Eigen::MatrixXd::Ones(3, 1);
  const auto sol = solve(Eigen::Vector3d(1, 2, 3), dense_system(K, Eigen::VectorXd::Constant(1, -1.0)));
  CHECK(sol.infeasible);
  CHECK_FALSE(sol.converged);
}

TEST_CASE("apply") {
  Eigen::MatrixXd f = Eigen::MatrixXd::Ones(2, 2);
  f(0, 1) = 1.5;
  f(1, 1) = 0.25;
  const auto d = testing::cohort(1, 2, 1, false);
  const auto w0 = weights_from_factors(d, {1, 1}, WeightKind::joint, f);
  RestrictionSystem s;
  s.rows = w0.rows();
  s.K.resize(2, 2);
  s.K << 1, -1, 0, 1;
  s.l = Eigen::Vector2d::Zero();
  s.labels = {"u", "v"};
  s.families.assign(2, RestrictionFamily::treatment);
  const auto same = apply(w0, s, Eigen::Vector2d::Zero());
  CHECK(same.values(0, 1) == w0.values(0, 1));
  CHECK(same.values(1, 1) == w0.values(1, 1));
  CHECK(same.kind == WeightKind::calibrated);
  const auto w = apply(w0, s, Eigen::Vector2d(std::log(2.0), std::log(3.0)));
  CHECK(w.values(0, 1) / w0.values(0, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(w.values(1, 1) / w0.values(1, 1) == doctest::Approx(3.0).epsilon(1e-14));
}

TEST_CASE("imbalance report") {
  const auto d = testing::parse(
      "id,visit,r,y,a0,a1,x1\n"
      "1,0,1,0,0,0,1\n1,1,1,0,1,0,0\n2,0,1,0,0,0,2\n2,1,1,0,1,0,0\n3,0,1,0,0,0,0\n3,1,1,0,0,0,0\n"
      "4,0,1,0,0,0,1\n4,1,1,0,0,0,0\n5,0,1,0,0,0,3\n5,1,1,0,1,0,0\n6,0,1,0,0,0,0\n6,1,1,0,0,0,0\n",
      TreatmentKind::binary);
  const auto w0 = unit_weights(d, {1, 1});
  LogisticFit f;
  f.names = {"(Intercept)"};
  f.coefficients = Eigen::VectorXd::Zero(1);
  FittedTreatmentModel num{TreatmentKind::binary, {"1", ""}, {1, 1}, f, {}, {}};
  const auto s = treatment_restrictions(d, w0.rows(), num, {"x1@1", ""});
  const auto r = imbalance(w0, s);
  // Treated subjects have x1 = 1, 2, 3; untreated 0, 1, 0: sum (a - 0.5) x1 = 0.5 * 6 - 0.5 * 1.
  CHECK(r.residual(0) == doctest::Approx(2.5 / 6));
  CHECK(r.rows == 6);
  const auto r0 = imbalance(w0, s, Eigen::VectorXd::Zero(1));
  CHECK(r0.multiplier_mean == 1.0);
  CHECK(r0.multiplier_sd == 0.0);
}

TEST_CASE("scenario 1 ordinal and normalization system") {
  const auto inst = scenario_instance(42, 500, CensoringScenario::none);
  const auto w0 = inst.fitted.initial.flatten(inst.system.rows);
  const auto sol = solve(w0, inst.system);
  REQUIRE(sol.converged);
  CHECK(sol.iterations <= 25);
  CHECK(sol.final_residual_inf <= 1e-8);
  CHECK(inst.system.residual(w0).cwiseAbs().maxCoeff() > 1e-3);

  const auto w = apply(inst.fitted.initial, inst.system, sol.lambda);
  const auto res = inst.system.residual(w.flatten(inst.system.rows));
  CHECK(res.cwiseAbs().maxCoeff() <= 1e-8 * std::max(1.0, inst.system.l.cwiseAbs().maxCoeff()));
  const auto rep = imbalance(w, inst.system, sol.lambda);
  CHECK(rep.residual.cwiseAbs().maxCoeff() <= 1e-8 / static_cast<double>(rep.rows) *
                                                  std::max(1.0, inst.system.l.cwiseAbs().maxCoeff()));
  CHECK(rep.multiplier_sd > 0);
  for (int j = 1; j <= 10; ++j) CHECK(w.values.col(j).mean() == doctest::Approx(1.0).epsilon(1e-9));
  for (const auto& c : w.rows()) CHECK(w.values(c.subject, c.visit) > 0);

  SUBCASE("perturbed starts reach the same solution") {
    std::mt19937_64 gen(8);
    std::normal_distribution<double> nd;
    Eigen::VectorXd start(sol.lambda.size());
    for (auto& v : start) v = 0.1 * nd(gen);
    const auto again = solve(w0, inst.system, {}, start);
    REQUIRE(again.converged);
    CHECK((again.lambda - sol.lambda).cwiseAbs().maxCoeff() <= 1e-6);
  }
}

TEST_CASE("scenario 2 joint treatment and censoring system") {
  const auto inst = scenario_instance(43, 500, CensoringScenario::covariate_dependent);
  const auto w0 = inst.fitted.initial.flatten(inst.system.rows);
  const auto sol = solve(w0, inst.system);
  REQUIRE(sol.converged);
  CHECK(sol.final_residual_inf <= 1e-8 * std::max(1.0, inst.system.l.cwiseAbs().maxCoeff()));
  for (const auto& f : inst.system.families) CHECK(f != RestrictionFamily::normalization);
}
