#include "msmcal/calibrate.hpp"

#include <Eigen/Cholesky>

#include <cmath>

namespace msmcal {

namespace {

double inf_norm(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

// Newton direction; jitter is added only if the plain factorization fails.
Eigen::VectorXd newton_direction(const Eigen::MatrixXd& H, const Eigen::VectorXd& g, bool& jitter_used) {
  Eigen::LLT<Eigen::MatrixXd> llt(H);
  if (llt.info() == Eigen::Success) {
    Eigen::VectorXd d = -llt.solve(g);
    if (d.allFinite()) return d;
  }
  jitter_used = true;
  const double r = static_cast<double>(H.rows());
  double jitter = 1e-10 * std::max(H.trace(), 1e-300) / r;
  for (int attempt = 0; attempt < 12; ++attempt, jitter *= 100.0) {
    Eigen::MatrixXd Hj = H;
    Hj.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> jllt(Hj);
    if (jllt.info() == Eigen::Success) {
      Eigen::VectorXd d = -jllt.solve(g);
      if (d.allFinite()) return d;
    }
  }
  return -g;
}

}  // namespace

ObjectiveTerms objective_grad_hess(const Eigen::VectorXd& w0, const Eigen::MatrixXd& K, const Eigen::VectorXd& l,
                                   const Eigen::VectorXd& lambda, bool with_hessian) {
  if (K.rows() != w0.size() || K.cols() != l.size() || lambda.size() != l.size()) {
    throw DataError("calibration shapes disagree");
  }
  const Eigen::VectorXd eta = K * lambda;
  if (eta.size() && eta.cwiseAbs().maxCoeff() > kExponentGuard) throw StepTooLarge();
  const Eigen::VectorXd w = w0.array() * eta.array().exp();
  ObjectiveTerms t;
  t.value = w.sum() - l.dot(lambda);
  t.gradient = K.transpose() * w - l;
  if (with_hessian) {
    const Eigen::MatrixXd h = K.transpose() * w.asDiagonal() * K;
    t.hessian = 0.5 * (h + h.transpose());
  }
  return t;
}

CalibrationSolution solve(const Eigen::VectorXd& w0, const RestrictionSystem& system,
                          const CalibrationOptions& options, const std::optional<Eigen::VectorXd>& start) {
  if (w0.size() != system.size()) throw DataError("initial weights do not match the restriction rows");
  if (w0.size() && !(w0.minCoeff() > 0.0)) throw DataError("initial weights must be positive");
  const Eigen::MatrixXd& K = system.K;
  const Eigen::VectorXd& l = system.l;
  const double tol = options.tolerance * std::max(1.0, inf_norm(l));

  CalibrationSolution sol;
  sol.labels = system.labels;
  Eigen::VectorXd lambda = start.value_or(Eigen::VectorXd::Zero(l.size()));
  if (lambda.size() != l.size()) throw DataError("starting point has the wrong length");
  ObjectiveTerms cur;
  try {
    cur = objective_grad_hess(w0, K, l, lambda);
  } catch (const StepTooLarge&) {
    lambda.setZero();
    cur = objective_grad_hess(w0, K, l, lambda);
  }

  int stall = 0;
  for (int it = 0;; ++it) {
    const double gnorm = inf_norm(cur.gradient);
    if (gnorm <= tol) {
      // A final full Newton step tightens the solution; kept only if it helps.
      if (it > 0 && gnorm > 0.0) {
        const Eigen::VectorXd cand = lambda + newton_direction(cur.hessian, cur.gradient, sol.jitter_used);
        try {
          auto trial = objective_grad_hess(w0, K, l, cand);
          if (cand.allFinite() && inf_norm(trial.gradient) < gnorm) {
            lambda = cand;
            cur = std::move(trial);
            ++sol.iterations;
          }
        } catch (const StepTooLarge&) {
        }
      }
      sol.converged = true;
      sol.message = "converged";
      break;
    }
    if (lambda.norm() > options.lambda_limit) {
      sol.infeasible = true;
      sol.message = "infeasible: multiplier norm exceeded " + std::to_string(options.lambda_limit);
      break;
    }
    if (it >= options.max_iterations) {
      sol.message = "maximum iterations reached";
      break;
    }
    const Eigen::VectorXd d = newton_direction(cur.hessian, cur.gradient, sol.jitter_used);
    const double slope = cur.gradient.dot(d);
    double t = 1.0;
    bool accepted = false;
    int guarded = 0;
    Eigen::VectorXd cand;
    for (int h = 0; h <= options.max_halvings; ++h, t *= 0.5) {
      cand = lambda + t * d;
      ObjectiveTerms trial;
      try {
        trial = objective_grad_hess(w0, K, l, cand, false);
      } catch (const StepTooLarge&) {
        ++guarded;
        continue;
      }
      const bool armijo = trial.value <= cur.value + 1e-4 * t * slope;
      // Near the optimum the objective is flat to rounding; accept steps that
      // keep it level and shrink the gradient.
      const bool flat = trial.value <= cur.value + 1e-13 * std::abs(cur.value) &&
                        inf_norm(trial.gradient) < gnorm;
      if (armijo || flat) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      if (guarded == options.max_halvings + 1 || !d.allFinite()) {
        // Even tiny fractions of the step overflow the exponent: the minimizer
        // lies beyond any representable multiplier.
        sol.infeasible = true;
        sol.message = "infeasible: multipliers would exceed the exponent guard";
      } else {
        sol.message = "line search failed";
      }
      break;
    }
    lambda = cand;
    cur = objective_grad_hess(w0, K, l, lambda);
    ++sol.iterations;
    if (t < 1.0 && inf_norm(cur.gradient) >= gnorm) {
      if (++stall >= options.stall_limit) {
        sol.infeasible = true;
        sol.message = "infeasible: gradient stopped decreasing over " + std::to_string(stall) + " damped steps";
        break;
      }
    } else {
      stall = 0;
    }
  }
  sol.lambda = lambda;
  sol.objective_value = cur.value;
  sol.final_residual_inf = inf_norm(cur.gradient);
  if (sol.infeasible) sol.converged = false;
  return sol;
}

Eigen::VectorXd calibration_multipliers(const RestrictionSystem& system, const Eigen::VectorXd& lambda) {
  if (lambda.size() != system.width()) throw DataError("multiplier vector has the wrong length");
  return (system.K * lambda).array().exp();
}

WeightMatrix apply(const WeightMatrix& w0, const RestrictionSystem& system, const Eigen::VectorXd& lambda) {
  WeightMatrix w = rescale_cells(w0, system.rows, calibration_multipliers(system, lambda), WeightKind::calibrated);
  w.provenance.models.push_back("calibration: " + std::to_string(system.width()) + " restrictions");
  return w;
}

ImbalanceReport imbalance(const WeightMatrix& w, const RestrictionSystem& system,
                          const std::optional<Eigen::VectorXd>& lambda) {
  ImbalanceReport r;
  r.labels = system.labels;
  r.rows = system.size();
  const double m = static_cast<double>(std::max<Index>(1, system.size()));
  r.residual = system.residual(w.flatten(system.rows)) / m;
  if (lambda) {
    const Eigen::VectorXd c = calibration_multipliers(system, *lambda);
    r.multiplier_mean = c.mean();
    r.multiplier_sd = c.size() > 1 ? std::sqrt((c.array() - r.multiplier_mean).square().sum() / (c.size() - 1.0)) : 0.0;
  }
  return r;
}

nlohmann::json to_json(const CalibrationSolution& s) {
  nlohmann::json lambda = nlohmann::json::object();
  for (std::size_t k = 0; k < s.labels.size(); ++k) lambda[s.labels[k]] = s.lambda(static_cast<Index>(k));
  return {{"lambda", lambda},
          {"iterations", s.iterations},
          {"final_residual_inf", s.final_residual_inf},
          {"objective_value", s.objective_value},
          {"converged", s.converged},
          {"infeasible", s.infeasible},
          {"jitter_used", s.jitter_used},
          {"message", s.message}};
}

nlohmann::json to_json(const ImbalanceReport& r) {
  nlohmann::json res = nlohmann::json::object();
  for (std::size_t k = 0; k < r.labels.size(); ++k) res[r.labels[k]] = r.residual(static_cast<Index>(k));
  return {{"residual_per_row", res},
          {"rows", r.rows},
          {"multiplier_mean", r.multiplier_mean},
          {"multiplier_sd", r.multiplier_sd}};
}

}  // namespace msmcal
