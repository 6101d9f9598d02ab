#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "msmcal/dataset.hpp"
#include "msmcal/design.hpp"
#include "msmcal/weights.hpp"

namespace msmcal {

/// Linear marginal structural model with identity link and working
/// independence. Treatment terms must vanish when the treatment history is
/// all zero; a term qualifies when one of its factors is a treatment column
/// (a0, a1, a, a01 or their cum_ running sums). An empty `treatment_terms`
/// selects every such column.
struct MsmSpec {
  std::string formula = "1 + cum_a01 + cum_a1";
  std::string outcome = "y";
  std::vector<std::string> treatment_terms;
  VisitRange range;
};

struct MsmEstimate {
  std::vector<std::string> names;
  Eigen::VectorXd coefficients;
  std::vector<std::string> treatment_terms;
  std::optional<Eigen::VectorXd> bootstrap_se;
  Index replicates_used = 0;
  Index failed_replicates = 0;
  std::vector<std::string> failures;
  Index rows = 0;
  double total_weight = 0.0;

  double coefficient(const std::string& name) const;
};

// Weighted least squares over the observed cells of spec.range.
MsmEstimate fit_msm(const LongitudinalDataset& data, const MsmSpec& spec, const WeightMatrix& weights);

// Weighted least squares on an explicit design.
Eigen::VectorXd weighted_least_squares(const DesignMatrix& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w);

using MsmPipeline = std::function<MsmEstimate(const LongitudinalDataset&)>;

struct BootstrapOptions {
  int replicates = 200;
  std::uint64_t seed = 1;
  int jobs = 1;
  double max_failure_rate = 0.2;
};

struct BootstrapResult {
  std::vector<std::string> names;
  Eigen::VectorXd se;
  Eigen::MatrixXd estimates;  // successful replicates in replicate order
  Index used = 0;
  Index failed = 0;
  std::vector<std::string> failures;
};

// Subject indices drawn with replacement for replicate `b`.
std::vector<Index> bootstrap_sample(Index n, std::uint64_t seed, std::uint64_t b);

/// Nonparametric bootstrap over subjects. Each replicate reruns `pipeline` on
/// a resample drawn from its own substream of `seed`; replicates that throw
/// a library error are excluded and counted. Throws NumericalError when the
/// failure rate exceeds `max_failure_rate`.
BootstrapResult bootstrap(const LongitudinalDataset& data, const MsmPipeline& pipeline,
                          const BootstrapOptions& options);

std::string format_estimate_csv(const MsmEstimate& e);
nlohmann::json to_json(const MsmEstimate& e);

}  // namespace msmcal
