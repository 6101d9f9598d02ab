#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "msmcal/dataset.hpp"
#include "msmcal/pipeline.hpp"
#include "msmcal/weights.hpp"

namespace msmcal {

enum class CensoringScenario { none, covariate_dependent };
enum class CovariateSet { correct, transformed };
enum class Estimator { mle, cmle, truth };

const char* to_string(CensoringScenario s);
const char* to_string(CovariateSet c);
const char* to_string(Estimator e);
CensoringScenario parse_censoring_scenario(const std::string& text);  // "1"/"none", "2"/"covariate_dependent"
CovariateSet parse_covariate_set(const std::string& text);
Estimator parse_estimator(const std::string& text);

struct ScenarioConfig {
  Index n = 500;
  int T = 10;
  CensoringScenario censoring = CensoringScenario::none;
  CovariateSet covariates = CovariateSet::correct;
  std::uint64_t seed = 1;
  int replicates = 1;
  double noise_sd = 20.0;  // standard deviation of the outcome noise
  int jobs = 1;

  void validate() const;
};

nlohmann::json to_json(const ScenarioConfig& c);

// True effects of cum_a01 and cum_a1 in the simulated outcome model.
inline constexpr double kTrueGamma1 = 10.0;
inline constexpr double kTrueGamma2 = 20.0;

/// One simulated cohort (ordinal treatment, covariates x1..x4) for the given
/// replicate; the random stream depends only on (seed, replicate).
LongitudinalDataset generate_cohort(const ScenarioConfig& config, int replicate);

/// Appends x1t = x1^3/9, x2t = x1*x2, x3t = log|x3| + 4, x4t = expit(x4).
/// x3 = 0 maps to log(1e-300) + 4; such cells are counted in `zero_count`.
LongitudinalDataset misspecify_transform(const LongitudinalDataset& data, Index* zero_count = nullptr);

// Pipeline configuration used for the simulated cohorts.
PipelineConfig scenario_pipeline(const ScenarioConfig& config);

// Generating probabilities of the observed treatment and of remaining in follow-up at each cell.
Eigen::VectorXd true_treatment_probability(const LongitudinalDataset& data, std::span<const SubjectVisit> cells);
Eigen::VectorXd true_observation_probability(const LongitudinalDataset& data, CensoringScenario scenario,
                                             std::span<const SubjectVisit> cells);

// Weights with the fitted numerator over the generating treatment probabilities,
// times inverse generating probabilities of remaining in follow-up.
WeightMatrix true_weights(const LongitudinalDataset& data, const ScenarioConfig& config,
                          const FittedTreatmentModel& numerator);

struct StudySummary {
  Estimator estimator;
  std::string coefficient;
  double bias = 0.0;
  double sd = 0.0;
  double rmse = 0.0;
  Index successes = 0;
};

struct StudyResult {
  ScenarioConfig config;
  std::vector<Estimator> estimators;
  std::vector<std::string> coefficients;  // gamma1 (cum_a01), gamma2 (cum_a1)
  std::vector<Eigen::MatrixXd> errors;    // per estimator: replicates x 2, NaN on failure
  std::vector<Index> failures;            // per estimator
  std::vector<std::string> failure_messages;
  Eigen::VectorXd lambda_inf;             // |lambda|_inf per replicate (NaN when not calibrated)
  Index transform_zero_count = 0;
  std::vector<StudySummary> summary;
};

// Replication study; replicates run on `config.jobs` threads.
StudyResult run_study(const ScenarioConfig& config, const std::vector<Estimator>& estimators);

std::string format_study_csv(const StudyResult& r);
std::string format_study_table(const StudyResult& r);
nlohmann::json to_json(const StudyResult& r);

}  // namespace msmcal
