#pragma once

#include <Eigen/Core>

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "msmcal/error.hpp"
#include "msmcal/restrictions.hpp"
#include "msmcal/weights.hpp"

namespace msmcal {

// Raised when some |K_i . lambda| exceeds the exponent guard; the solver
// treats it as a rejected step.
class StepTooLarge : public NumericalError {
 public:
  StepTooLarge() : NumericalError("calibration step too large: exponent overflow guard") {}
};

inline constexpr double kExponentGuard = 700.0;

struct ObjectiveTerms {
  double value = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;
};

/// Exponential tilting objective sum(w0 .* exp(K lambda)) - l^T lambda with
/// gradient K^T (w0 .* exp(K lambda)) - l and Hessian K^T diag(w0 .* exp(K lambda)) K.
ObjectiveTerms objective_grad_hess(const Eigen::VectorXd& w0, const Eigen::MatrixXd& K, const Eigen::VectorXd& l,
                                   const Eigen::VectorXd& lambda, bool with_hessian = true);

struct CalibrationOptions {
  double tolerance = 1e-8;  // on |gradient|_inf, relative to max(1, |l|_inf)
  int max_iterations = 100;
  int max_halvings = 60;
  double lambda_limit = 1e4;
  int stall_limit = 20;  // consecutive damped steps without gradient decrease
};

struct CalibrationSolution {
  Eigen::VectorXd lambda;
  std::vector<std::string> labels;
  int iterations = 0;
  double final_residual_inf = 0.0;
  double objective_value = 0.0;
  bool converged = false;
  bool infeasible = false;
  bool jitter_used = false;
  std::string message;
};

/// Newton's method with step halving on the tilting objective, from
/// lambda = 0 unless `start` is given.
CalibrationSolution solve(const Eigen::VectorXd& w0, const RestrictionSystem& system,
                          const CalibrationOptions& options = {},
                          const std::optional<Eigen::VectorXd>& start = std::nullopt);

// exp(K lambda).
Eigen::VectorXd calibration_multipliers(const RestrictionSystem& system, const Eigen::VectorXd& lambda);

// w0 .* exp(K lambda) on the system rows, as a calibrated WeightMatrix.
WeightMatrix apply(const WeightMatrix& w0, const RestrictionSystem& system, const Eigen::VectorXd& lambda);

struct ImbalanceReport {
  std::vector<std::string> labels;
  Eigen::VectorXd residual;  // (K^T w - l) / m
  double multiplier_mean = 1.0;
  double multiplier_sd = 0.0;
  Index rows = 0;
};

// Scaled residuals of `w` on the system rows; multiplier summary from `lambda` when given.
ImbalanceReport imbalance(const WeightMatrix& w, const RestrictionSystem& system,
                          const std::optional<Eigen::VectorXd>& lambda = std::nullopt);

nlohmann::json to_json(const CalibrationSolution& s);
nlohmann::json to_json(const ImbalanceReport& r);

}  // namespace msmcal
