#include "doctest.h"
#include "support.hpp"

#include <cmath>
#include <random>

#include "msmcal/error.hpp"
#include "msmcal/glm.hpp"

using namespace msmcal;

namespace {

double loglik_oracle(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& b) {
  double s = 0;
  for (Index i = 0; i < X.rows(); ++i) {
    const double eta = X.row(i).dot(b);
    s += y(i) * eta - std::log1p(std::exp(eta));
  }
  return s;
}

// Argmax over a unimodal function of grid index k in [0, n].
template <typename F>
int grid_argmax(int n, F f) {
  int lo = 0, hi = n;
  while (hi - lo > 2) {
    const int m1 = lo + (hi - lo) / 3, m2 = hi - (hi - lo) / 3;
    if (f(m1) < f(m2)) lo = m1 + 1; else hi = m2;
  }
  int best = lo;
  for (int k = lo + 1; k <= hi; ++k) if (f(k) > f(best)) best = k;
  return best;
}

DesignMatrix dense(const Eigen::MatrixXd& X) {
  DesignMatrix d;
  d.X = X;
  for (Index c = 0; c < X.cols(); ++c) d.names.push_back("c" + std::to_string(c));
  return d;
}

}  // namespace

TEST_CASE("logistic fit matches a grid search of the log-likelihood") {
  Eigen::MatrixXd X(8, 2);
  X << 1, -1.2, 1, -0.7, 1, -0.3, 1, 0.1, 1, 0.4, 1, 0.9, 1, 1.3, 1, 2.0;
  Eigen::VectorXd y(8);
  y << 0, 1, 0, 0, 1, 0, 1, 1;
  const auto fit = fit_logistic(X, {"1", "x"}, y);
  REQUIRE(fit.converged);
  // The log-likelihood is concave, so its profile over each coordinate is unimodal on the grid.
  const int steps = 10000;
  const auto at = [](int k) { return -5.0 + 1e-3 * k; };
  int best1 = 0;
  const int best0 = grid_argmax(steps, [&](int k0) {
    const int k1 = grid_argmax(steps, [&](int k) { return loglik_oracle(X, y, Eigen::Vector2d(at(k0), at(k))); });
    return loglik_oracle(X, y, Eigen::Vector2d(at(k0), at(k1)));
  });
  best1 = grid_argmax(steps, [&](int k) { return loglik_oracle(X, y, Eigen::Vector2d(at(best0), at(k))); });
  CHECK(std::abs(fit.coefficients(0) - at(best0)) <= 2e-3);
  CHECK(std::abs(fit.coefficients(1) - at(best1)) <= 2e-3);
}

TEST_CASE("logistic score matches finite differences of the log-likelihood") {
  std::mt19937_64 gen(7);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd X(40, 3);
  Eigen::VectorXd y(40), w(40);
  for (Index i = 0; i < 40; ++i) {
    X(i, 0) = 1;
    X(i, 1) = nd(gen);
    X(i, 2) = nd(gen);
    y(i) = nd(gen) > 0.3 ? 1 : 0;
    w(i) = 0.5 + std::abs(nd(gen));
  }
  const double h = 1e-6;
  for (int rep = 0; rep < 10; ++rep) {
    Eigen::VectorXd b(3);
    for (auto& v : b) v = nd(gen);
    const auto s = logistic_score(X, y, w, b);
    CHECK(std::abs(logistic_loglik(X, y, Eigen::VectorXd::Ones(40), b) - loglik_oracle(X, y, b)) < 1e-9);
    for (Index k = 0; k < 3; ++k) {
      Eigen::VectorXd bp = b, bm = b;
      bp(k) += h;
      bm(k) -= h;
      const double fd = (logistic_loglik(X, y, w, bp) - logistic_loglik(X, y, w, bm)) / (2 * h);
      CHECK(std::abs(fd - s(k)) <= 1e-5 * std::max(1.0, std::abs(s(k))));
    }
  }
}

TEST_CASE("closed-form logistic solutions") {
  SUBCASE("intercept only gives the logit of the mean") {
    Eigen::MatrixXd X = Eigen::MatrixXd::Ones(10, 1);
    Eigen::VectorXd y(10);
    y << 1, 1, 1, 0, 0, 0, 0, 0, 0, 0;
    const auto fit = fit_logistic(X, {"1"}, y);
    CHECK(fit.coefficients(0) == doctest::Approx(std::log(3.0 / 7.0)).epsilon(1e-10));
  }
  SUBCASE("saturated binary covariate gives group logits") {
    Eigen::MatrixXd X(9, 2);
    Eigen::VectorXd y(9);
    const double g[9] = {0, 0, 0, 0, 1, 1, 1, 1, 1};
    const double yy[9] = {1, 0, 0, 0, 1, 1, 1, 0, 1};
    for (int i = 0; i < 9; ++i) {
      X(i, 0) = 1;
      X(i, 1) = g[i];
      y(i) = yy[i];
    }
    const auto fit = fit_logistic(X, {"1", "g"}, y);
    CHECK(fit.coefficients(0) == doctest::Approx(std::log(1.0 / 3.0)).epsilon(1e-10));
    CHECK(fit.coefficients(0) + fit.coefficients(1) == doctest::Approx(std::log(4.0)).epsilon(1e-10));
  }
  SUBCASE("prior weights equal replicated rows") {
    Eigen::MatrixXd X(4, 2);
    X << 1, 0.1, 1, 0.5, 1, 1.1, 1, -0.4;
    Eigen::VectorXd y(4), w(4);
    y << 0, 1, 1, 0;
    w << 2, 1, 3, 1;
    Eigen::MatrixXd Xr(7, 2);
    Eigen::VectorXd yr(7);
    int r = 0;
    for (int i = 0; i < 4; ++i)
      for (int k = 0; k < static_cast<int>(w(i)); ++k, ++r) {
        Xr.row(r) = X.row(i);
        yr(r) = y(i);
      }
    const auto a = fit_logistic(X, {"1", "x"}, y, w);
    const auto b = fit_logistic(Xr, {"1", "x"}, yr);
    CHECK((a.coefficients - b.coefficients).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("logistic fit on simulated treatment data reaches the score tolerance") {
  const auto d = testing::cohort(21, 2000, 10, false);
  const auto X = build_design(d, {"1 + a0@1 + a1@1 + x1@1 + x2@1 + x3@1 + x4@1", "a0", std::nullopt}, {1, 10});
  const auto fit = fit_logistic(X, X.response);
  CHECK(fit.converged);
  CHECK(fit.max_abs_score <= 1e-10);
  CHECK(fit.iterations <= 100);
  const auto s = logistic_score(X.X, X.response, Eigen::VectorXd::Ones(X.size()), fit.coefficients);
  CHECK(s.cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("logistic errors and warnings") {
  Eigen::MatrixXd X(6, 3);
  X << 1, 1, 2, 1, 2, 4, 1, 3, 6, 1, 4, 8, 1, 5, 10, 1, 6, 12;
  Eigen::VectorXd y(6);
  y << 0, 1, 0, 1, 1, 0;
  CHECK_THROWS_WITH_AS(fit_logistic(X, {"1", "u", "v"}, y), doctest::Contains("'v'"), NumericalError);

  Eigen::MatrixXd S(6, 2);
  S << 1, -3, 1, -2, 1, -1, 1, 1, 1, 2, 1, 3;
  Eigen::VectorXd ys(6);
  ys << 0, 0, 0, 1, 1, 1;
  const auto fit = fit_logistic(S, {"1", "x"}, ys);
  CHECK(fit.separation_warning);

  Eigen::VectorXd bad(6);
  bad << 0, 2, 0, 1, 1, 0;
  CHECK_THROWS_AS(fit_logistic(S, {"1", "x"}, bad), DataError);
}

TEST_CASE("predicted probabilities are clamped") {
  LogisticFit fit;
  fit.names = {"c0"};
  fit.coefficients = Eigen::VectorXd::Constant(1, 40.0);
  Eigen::MatrixXd X(2, 1);
  X << 1, -1;
  Index clamped = 0;
  const auto p = predict_prob(fit, dense(X), &clamped);
  CHECK(clamped == 2);
  CHECK(p(0) == 1.0 - kProbabilityClamp);
  CHECK(p(1) == kProbabilityClamp);
}

namespace {

double hetnormal_loglik(const Eigen::MatrixXd& Xm, const Eigen::MatrixXd& Xs, const Eigen::VectorXd& a,
                        const Eigen::VectorXd& bm, const Eigen::VectorXd& bs) {
  double s = 0;
  for (Index i = 0; i < a.size(); ++i) {
    const double mu = Xm.row(i).dot(bm), ls = Xs.row(i).dot(bs);
    s += -0.5 * ls - 0.5 * (a(i) - mu) * (a(i) - mu) * std::exp(-ls);
  }
  return s;
}

}  // namespace

TEST_CASE("heteroscedastic normal fit") {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> nd;
  SUBCASE("intercepts give the sample mean and the ML variance") {
    Eigen::VectorXd a(50);
    for (auto& v : a) v = 2 + 3 * nd(gen);
    const auto X = dense(Eigen::MatrixXd::Ones(50, 1));
    const auto fit = fit_hetnormal(X, X, a);
    const double mean = a.mean();
    const double var = (a.array() - mean).square().mean();
    CHECK(fit.mean_coefficients(0) == doctest::Approx(mean).epsilon(1e-10));
    CHECK(fit.logvar_coefficients(0) == doctest::Approx(std::log(var)).epsilon(1e-8));
  }
  SUBCASE("saturated groups give group means and variances") {
    Eigen::MatrixXd M(60, 2);
    Eigen::VectorXd a(60);
    for (Index i = 0; i < 60; ++i) {
      const double g = i % 2;
      M(i, 0) = 1;
      M(i, 1) = g;
      a(i) = 1 + 2 * g + (1 + 3 * g) * nd(gen);
    }
    const auto X = dense(M);
    const auto fit = fit_hetnormal(X, X, a);
    for (int g = 0; g < 2; ++g) {
      double s = 0, ss = 0;
      for (Index i = g; i < 60; i += 2) s += a(i);
      const double mean = s / 30;
      for (Index i = g; i < 60; i += 2) ss += (a(i) - mean) * (a(i) - mean);
      const double mfit = fit.mean_coefficients(0) + g * fit.mean_coefficients(1);
      const double vfit = std::exp(fit.logvar_coefficients(0) + g * fit.logvar_coefficients(1));
      CHECK(mfit == doctest::Approx(mean).epsilon(1e-9));
      CHECK(vfit == doctest::Approx(ss / 30).epsilon(1e-7));
    }
  }
  SUBCASE("continuous covariates: scores vanish and match finite differences") {
    const Index n = 400;
    Eigen::MatrixXd M(n, 3), S(n, 2);
    Eigen::VectorXd a(n);
    for (Index i = 0; i < n; ++i) {
      const double x = nd(gen), z = nd(gen);
      M.row(i) << 1, x, z;
      S.row(i) << 1, x;
      a(i) = 0.5 + x - z + std::exp(0.3 * x) * nd(gen);
    }
    const auto fit = fit_hetnormal(dense(M), dense(S), a);
    REQUIRE(fit.converged);
    const auto sc = hetnormal_score(M, S, a, fit.mean_coefficients, fit.logvar_coefficients);
    CHECK(sc.mean.cwiseAbs().maxCoeff() <= 1e-8);
    CHECK(sc.logvar.cwiseAbs().maxCoeff() <= 1e-8);
    CHECK(fit.logvar_coefficients(1) == doctest::Approx(0.6).epsilon(0.3));

    Eigen::VectorXd bm(3), bs(2);
    bm << 0.1, 0.9, -0.8;
    bs << 0.2, 0.5;
    const auto s = hetnormal_score(M, S, a, bm, bs);
    const double h = 1e-6;
    for (Index k = 0; k < 3; ++k) {
      Eigen::VectorXd p = bm, m = bm;
      p(k) += h;
      m(k) -= h;
      const double fd = (hetnormal_loglik(M, S, a, p, bs) - hetnormal_loglik(M, S, a, m, bs)) / (2 * h);
      CHECK(std::abs(fd - s.mean(k)) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
    for (Index k = 0; k < 2; ++k) {
      Eigen::VectorXd p = bs, m = bs;
      p(k) += h;
      m(k) -= h;
      const double fd = (hetnormal_loglik(M, S, a, bm, p) - hetnormal_loglik(M, S, a, bm, m)) / (2 * h);
      CHECK(std::abs(fd - s.logvar(k)) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
  SUBCASE("exact fit has degenerate variance") {
    Eigen::MatrixXd M(5, 2);
    M << 1, 0, 1, 1, 1, 2, 1, 3, 1, 4;
    Eigen::VectorXd a = 1.0 + 2.0 * M.col(1).array();
    CHECK_THROWS_AS(fit_hetnormal(dense(M), dense(M.leftCols(1)), a), NumericalError);
  }
}
