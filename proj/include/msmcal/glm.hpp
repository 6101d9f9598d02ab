#pragma once

#include <Eigen/Core>

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "msmcal/design.hpp"

namespace msmcal {

// Probabilities are clamped into [kProbabilityClamp, 1 - kProbabilityClamp].
inline constexpr double kProbabilityClamp = 1e-12;

struct LogisticOptions {
  double tolerance = 1e-10;  // max-abs score at convergence
  int max_iterations = 100;
  int max_halvings = 30;
  double separation_threshold = 15.0;
};

struct LogisticFit {
  std::vector<std::string> names;
  Eigen::VectorXd coefficients;
  bool converged = false;
  int iterations = 0;
  double max_abs_score = 0.0;
  bool separation_warning = false;
};

/// Weighted logistic regression by Newton-Raphson with step halving, started
/// at zero. Throws NumericalError on rank deficiency (naming the dependent
/// columns) or non-convergence; near-separated fits are returned with
/// `separation_warning` set instead of throwing.
LogisticFit fit_logistic(const Eigen::MatrixXd& X, const std::vector<std::string>& names,
                         const Eigen::VectorXd& y,
                         const std::optional<Eigen::VectorXd>& prior_weights = std::nullopt,
                         const LogisticOptions& options = {});

LogisticFit fit_logistic(const DesignMatrix& X, const Eigen::VectorXd& y,
                         const std::optional<Eigen::VectorXd>& prior_weights = std::nullopt,
                         const LogisticOptions& options = {});

// Expit of the linear predictor, clamped; `clamped` counts rows hitting the clamp.
Eigen::VectorXd predict_prob(const LogisticFit& fit, const DesignMatrix& X, Index* clamped = nullptr);

double logistic_loglik(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                       const Eigen::VectorXd& beta);
// Sum_i w_i (y_i - p_i) x_i.
Eigen::VectorXd logistic_score(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                               const Eigen::VectorXd& w, const Eigen::VectorXd& beta);

struct HetNormalOptions {
  double tolerance = 1e-8;
  int max_iterations = 100;
  int max_halvings = 30;
  double logvar_floor = -30.0;
};

struct HetNormalFit {
  std::vector<std::string> mean_names;
  std::vector<std::string> logvar_names;
  Eigen::VectorXd mean_coefficients;
  Eigen::VectorXd logvar_coefficients;
  bool converged = false;
  int iterations = 0;
  double max_abs_score = 0.0;
};

/// Heteroscedastic normal model a ~ N(X_mu b_mu, exp(X_sigma b_sigma)) fitted
/// by alternating an exact weighted-least-squares mean block with a damped
/// Newton step on the log-variance block.
HetNormalFit fit_hetnormal(const DesignMatrix& X_mu, const DesignMatrix& X_sigma,
                           const Eigen::VectorXd& a, const HetNormalOptions& options = {});

struct HetNormalScores {
  Eigen::VectorXd mean;
  Eigen::VectorXd logvar;
};
HetNormalScores hetnormal_score(const Eigen::MatrixXd& X_mu, const Eigen::MatrixXd& X_sigma,
                                const Eigen::VectorXd& a, const Eigen::VectorXd& b_mu,
                                const Eigen::VectorXd& b_sigma);

Eigen::VectorXd predict_mean(const HetNormalFit& fit, const DesignMatrix& X_mu);
Eigen::VectorXd predict_variance(const HetNormalFit& fit, const DesignMatrix& X_sigma);

// Throws NumericalError naming the columns that are linearly dependent on earlier ones.
void require_full_rank(const Eigen::MatrixXd& X, const std::vector<std::string>& names,
                       const std::string& what);

nlohmann::json to_json(const LogisticFit& fit);
nlohmann::json to_json(const HetNormalFit& fit);

}  // namespace msmcal
