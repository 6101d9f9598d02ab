#include "msmcal/glm.hpp"

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include <cmath>

#include "msmcal/error.hpp"
#include "msmcal/linalg.hpp"

namespace msmcal {

namespace {

// log(1 + exp(x)) without overflow.
double log1pexp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double expit(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Eigen::VectorXd solve_spd(const Eigen::MatrixXd& A, const Eigen::VectorXd& b) {
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() == Eigen::Success) return llt.solve(b);
  return A.fullPivLu().solve(b);
}

void check_names(const std::vector<std::string>& expected, const std::vector<std::string>& got) {
  if (expected != got) {
    std::string msg = "design column mismatch: fit has [";
    for (std::size_t k = 0; k < expected.size(); ++k) msg += (k ? ", " : "") + expected[k];
    msg += "], design has [";
    for (std::size_t k = 0; k < got.size(); ++k) msg += (k ? ", " : "") + got[k];
    throw DataError(msg + "]");
  }
}

}  // namespace

void require_full_rank(const Eigen::MatrixXd& X, const std::vector<std::string>& names,
                       const std::string& what) {
  if (X.rows() < X.cols()) {
    throw NumericalError("rank deficiency in " + what + ": " + std::to_string(X.rows()) +
                         " rows for " + std::to_string(X.cols()) + " columns");
  }
  const auto dependent = linalg::dependent_columns(X, 1e-10);
  if (!dependent.empty()) {
    std::string msg = "rank deficiency in " + what + ": dependent columns";
    for (const auto c : dependent) msg += " '" + names[static_cast<std::size_t>(c)] + "'";
    throw NumericalError(msg);
  }
}

double logistic_loglik(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                       const Eigen::VectorXd& beta) {
  const Eigen::VectorXd eta = X * beta;
  double ll = 0.0;
  for (Index i = 0; i < eta.size(); ++i) ll += w(i) * (y(i) * eta(i) - log1pexp(eta(i)));
  return ll;
}

Eigen::VectorXd logistic_score(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                               const Eigen::VectorXd& w, const Eigen::VectorXd& beta) {
  const Eigen::VectorXd eta = X * beta;
  Eigen::VectorXd resid(eta.size());
  for (Index i = 0; i < eta.size(); ++i) resid(i) = w(i) * (y(i) - expit(eta(i)));
  // Compensated sums: residuals repeat within covariate patterns, so plain
  // rounding errors add up coherently and swamp the convergence tolerance.
  Eigen::VectorXd score(X.cols());
  for (Index c = 0; c < X.cols(); ++c) {
    double sum = 0.0, comp = 0.0;
    for (Index i = 0; i < eta.size(); ++i) {
      const double term = X(i, c) * resid(i);
      const double t = sum + term;
      comp += std::abs(sum) >= std::abs(term) ? (sum - t) + term : (term - t) + sum;
      sum = t;
    }
    score(c) = sum + comp;
  }
  return score;
}

LogisticFit fit_logistic(const Eigen::MatrixXd& X, const std::vector<std::string>& names,
                         const Eigen::VectorXd& y, const std::optional<Eigen::VectorXd>& prior_weights,
                         const LogisticOptions& options) {
  const Index m = X.rows();
  const Index p = X.cols();
  if (static_cast<Index>(names.size()) != p) throw DataError("design names do not match its width");
  if (y.size() != m) throw DataError("response length does not match design rows");
  for (Index i = 0; i < m; ++i) {
    if (y(i) != 0.0 && y(i) != 1.0) throw DataError("logistic response must be 0 or 1");
  }
  Eigen::VectorXd w = prior_weights.value_or(Eigen::VectorXd::Ones(m));
  if (w.size() != m) throw DataError("prior weight length does not match design rows");
  if ((w.array() < 0).any() || !w.allFinite()) throw DataError("prior weights must be nonnegative");

  {
    std::vector<Index> keep;
    for (Index i = 0; i < m; ++i) {
      if (w(i) > 0) keep.push_back(i);
    }
    Eigen::MatrixXd Xpos(static_cast<Index>(keep.size()), p);
    for (std::size_t k = 0; k < keep.size(); ++k) Xpos.row(static_cast<Index>(k)) = X.row(keep[k]);
    require_full_rank(Xpos, names, "logistic design");
  }

  LogisticFit fit;
  fit.names = names;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  double ll = logistic_loglik(X, y, w, beta);
  Eigen::VectorXd score = logistic_score(X, y, w, beta);
  int it = 0;
  for (; it < options.max_iterations; ++it) {
    if (score.cwiseAbs().maxCoeff() <= options.tolerance) break;
    const Eigen::VectorXd eta = X * beta;
    Eigen::VectorXd v(m);
    for (Index i = 0; i < m; ++i) {
      const double pi = expit(eta(i));
      v(i) = w(i) * pi * (1.0 - pi);
    }
    const Eigen::MatrixXd info = X.transpose() * v.asDiagonal() * X;
    const Eigen::VectorXd step = solve_spd(info, score);
    if (!step.allFinite()) break;
    double t = 1.0;
    bool accepted = false;
    Eigen::VectorXd candidate;
    double ll_new = ll;
    for (int h = 0; h <= options.max_halvings; ++h, t *= 0.5) {
      candidate = beta + t * step;
      ll_new = logistic_loglik(X, y, w, candidate);
      if (!std::isfinite(ll_new)) continue;
      if (ll_new >= ll) {
        accepted = true;
        break;
      }
      // Near the optimum the log-likelihood is flat to rounding; judge by the score instead.
      if (ll_new >= ll - 1e-10 * (1.0 + std::abs(ll))) {
        const Eigen::VectorXd s_new = logistic_score(X, y, w, candidate);
        if (s_new.cwiseAbs().maxCoeff() < score.cwiseAbs().maxCoeff()) {
          accepted = true;
          break;
        }
      }
    }
    if (!accepted || candidate == beta) break;
    beta = candidate;
    ll = ll_new;
    score = logistic_score(X, y, w, beta);
  }
  fit.coefficients = beta;
  fit.iterations = it;
  fit.max_abs_score = score.size() ? score.cwiseAbs().maxCoeff() : 0.0;
  fit.converged = fit.max_abs_score <= options.tolerance;
  fit.separation_warning = p > 0 && beta.cwiseAbs().maxCoeff() > options.separation_threshold;
  if (!fit.converged && !fit.separation_warning) {
    throw NumericalError("logistic fit did not converge after " + std::to_string(it) +
                         " iterations (max |score| = " + std::to_string(fit.max_abs_score) + ")");
  }
  return fit;
}

LogisticFit fit_logistic(const DesignMatrix& X, const Eigen::VectorXd& y,
                         const std::optional<Eigen::VectorXd>& prior_weights,
                         const LogisticOptions& options) {
  return fit_logistic(X.X, X.names, y, prior_weights, options);
}

Eigen::VectorXd predict_prob(const LogisticFit& fit, const DesignMatrix& X, Index* clamped) {
  check_names(fit.names, X.names);
  const Eigen::VectorXd eta = X.X * fit.coefficients;
  Eigen::VectorXd p(eta.size());
  Index count = 0;
  for (Index i = 0; i < eta.size(); ++i) {
    double v = expit(eta(i));
    if (v < kProbabilityClamp) {
      v = kProbabilityClamp;
      ++count;
    } else if (v > 1.0 - kProbabilityClamp) {
      v = 1.0 - kProbabilityClamp;
      ++count;
    }
    p(i) = v;
  }
  if (clamped) *clamped += count;
  return p;
}

HetNormalScores hetnormal_score(const Eigen::MatrixXd& X_mu, const Eigen::MatrixXd& X_sigma,
                                const Eigen::VectorXd& a, const Eigen::VectorXd& b_mu,
                                const Eigen::VectorXd& b_sigma) {
  const Eigen::VectorXd r = a - X_mu * b_mu;
  const Eigen::VectorXd inv_var = (-(X_sigma * b_sigma)).array().exp();
  HetNormalScores s;
  s.mean = X_mu.transpose() * r.cwiseProduct(inv_var);
  s.logvar = 0.5 * X_sigma.transpose() *
             (r.array().square() * inv_var.array() - 1.0).matrix();
  return s;
}

namespace {

double hetnormal_loglik_sigma(const Eigen::MatrixXd& X_sigma, const Eigen::VectorXd& r2,
                              const Eigen::VectorXd& b_sigma) {
  const Eigen::VectorXd eta = X_sigma * b_sigma;
  return -0.5 * (eta.array() + r2.array() * (-eta.array()).exp()).sum();
}

}  // namespace

HetNormalFit fit_hetnormal(const DesignMatrix& X_mu, const DesignMatrix& X_sigma, const Eigen::VectorXd& a,
                           const HetNormalOptions& options) {
  if (X_mu.rows != X_sigma.rows) throw DataError("mean and log-variance designs cover different rows");
  const Index m = X_mu.size();
  if (a.size() != m) throw DataError("response length does not match design rows");
  require_full_rank(X_mu.X, X_mu.names, "mean design");
  require_full_rank(X_sigma.X, X_sigma.names, "log-variance design");

  const Eigen::MatrixXd& Xm = X_mu.X;
  const Eigen::MatrixXd& Xs = X_sigma.X;
  HetNormalFit fit;
  fit.mean_names = X_mu.names;
  fit.logvar_names = X_sigma.names;
  Eigen::VectorXd bm = Eigen::VectorXd::Zero(Xm.cols());
  Eigen::VectorXd bs = Eigen::VectorXd::Zero(Xs.cols());

  int it = 0;
  double max_score = 0.0;
  for (; it < options.max_iterations; ++it) {
    // Mean block: exact weighted least squares with precision weights.
    const Eigen::VectorXd prec = (-(Xs * bs)).array().exp();
    const Eigen::MatrixXd XtW = Xm.transpose() * prec.asDiagonal();
    bm = solve_spd(XtW * Xm, XtW * a);

    // Log-variance block: Newton step on the profile log-likelihood.
    const Eigen::VectorXd r2 = (a - Xm * bm).array().square();
    const Eigen::VectorXd eta = Xs * bs;
    const Eigen::VectorXd scaled = r2.array() * (-eta.array()).exp();
    const Eigen::VectorXd grad = 0.5 * Xs.transpose() * (scaled.array() - 1.0).matrix();
    Eigen::MatrixXd info = 0.5 * Xs.transpose() * scaled.asDiagonal() * Xs;
    Eigen::LLT<Eigen::MatrixXd> llt(info);
    if (llt.info() != Eigen::Success) info = 0.5 * Xs.transpose() * Xs;  // Fisher scoring fallback
    const Eigen::VectorXd step = solve_spd(info, grad);
    const double ll = hetnormal_loglik_sigma(Xs, r2, bs);
    double t = 1.0;
    for (int h = 0; h <= options.max_halvings; ++h, t *= 0.5) {
      const Eigen::VectorXd cand = bs + t * step;
      const double ll_new = hetnormal_loglik_sigma(Xs, r2, cand);
      if (std::isfinite(ll_new) && ll_new >= ll) {
        bs = cand;
        break;
      }
    }
    if ((Xs * bs).minCoeff() < options.logvar_floor) {
      throw NumericalError("degenerate variance: fitted log-variance fell below " +
                           std::to_string(options.logvar_floor));
    }
    const auto s = hetnormal_score(Xm, Xs, a, bm, bs);
    max_score = std::max(s.mean.cwiseAbs().maxCoeff(), s.logvar.cwiseAbs().maxCoeff());
    if (max_score <= options.tolerance) {
      ++it;
      fit.converged = true;
      break;
    }
  }
  fit.mean_coefficients = bm;
  fit.logvar_coefficients = bs;
  fit.iterations = it;
  fit.max_abs_score = max_score;
  if (!fit.converged) {
    throw NumericalError("heteroscedastic normal fit did not converge (max |score| = " +
                         std::to_string(max_score) + ")");
  }
  return fit;
}

Eigen::VectorXd predict_mean(const HetNormalFit& fit, const DesignMatrix& X_mu) {
  check_names(fit.mean_names, X_mu.names);
  return X_mu.X * fit.mean_coefficients;
}

Eigen::VectorXd predict_variance(const HetNormalFit& fit, const DesignMatrix& X_sigma) {
  check_names(fit.logvar_names, X_sigma.names);
  return (X_sigma.X * fit.logvar_coefficients).array().exp();
}

nlohmann::json to_json(const LogisticFit& fit) {
  nlohmann::json coef = nlohmann::json::object();
  for (std::size_t k = 0; k < fit.names.size(); ++k) coef[fit.names[k]] = fit.coefficients(static_cast<Index>(k));
  return {{"model", "logistic"},
          {"coefficients", coef},
          {"converged", fit.converged},
          {"iterations", fit.iterations},
          {"max_abs_score", fit.max_abs_score},
          {"separation_warning", fit.separation_warning}};
}

nlohmann::json to_json(const HetNormalFit& fit) {
  nlohmann::json mean = nlohmann::json::object();
  nlohmann::json logvar = nlohmann::json::object();
  for (std::size_t k = 0; k < fit.mean_names.size(); ++k) mean[fit.mean_names[k]] = fit.mean_coefficients(static_cast<Index>(k));
  for (std::size_t k = 0; k < fit.logvar_names.size(); ++k) logvar[fit.logvar_names[k]] = fit.logvar_coefficients(static_cast<Index>(k));
  return {{"model", "heteroscedastic_normal"},
          {"mean_coefficients", mean},
          {"logvar_coefficients", logvar},
          {"converged", fit.converged},
          {"iterations", fit.iterations},
          {"max_abs_score", fit.max_abs_score}};
}

}  // namespace msmcal
