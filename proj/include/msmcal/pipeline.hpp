#pragma once

#include <optional>
#include <string>

#include "json.hpp"
#include "msmcal/calibrate.hpp"
#include "msmcal/msm.hpp"
#include "msmcal/restrictions.hpp"
#include "msmcal/weights.hpp"

namespace msmcal {

/// Everything needed to go from a dataset to calibrated weights and an MSM fit.
struct PipelineConfig {
  VisitRange range{1, 0};  // last = 0 means the last visit in the data
  TreatmentModelSpec numerator;
  TreatmentModelSpec denominator;
  std::optional<TreatmentModelSpec> treatment_probe;  // defaults to the denominator
  bool treatment_restrictions = true;

  std::optional<std::string> censoring;              // censoring model; none means no censoring weights
  std::optional<std::string> censoring_stabilizer;   // history-only model for stabilized censoring weights
  std::optional<std::string> censoring_probe;        // defaults to the censoring model

  bool normalization = true;
  bool per_visit_normalization = true;
  bool drop_normalization_with_censoring = true;
  RestrictionTarget target = RestrictionTarget::repeated;

  Scaling scaling = Scaling::none;
  WeightOptions weight_options;
  CalibrationOptions calibration;
  MsmSpec msm;
};

// Reads keys from a flat JSON object (see the README for the key list).
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PipelineConfig& c);

struct WeightingResult {
  FittedTreatmentModel numerator;
  FittedTreatmentModel denominator;
  std::optional<FittedCensoringModel> censoring;
  std::optional<FittedCensoringModel> stabilizer;
  WeightMatrix treatment;
  std::optional<WeightMatrix> censoring_weights;
  WeightMatrix initial;
};

// Fits the weight models and builds the (scaled) initial joint weights.
WeightingResult fit_initial_weights(const LongitudinalDataset& data, const PipelineConfig& config);

// Restriction system for the rows of `initial`, built from the fitted models.
RestrictionSystem build_restrictions(const LongitudinalDataset& data, const PipelineConfig& config,
                                     const WeightingResult& fitted);

struct CalibrationResult {
  RestrictionSystem system;
  CalibrationSolution solution;
  WeightMatrix calibrated;
};

// Builds the restrictions, solves, and applies. Throws NumericalError if the
// solver does not converge.
CalibrationResult calibrate_weights(const LongitudinalDataset& data, const PipelineConfig& config,
                                    const WeightingResult& fitted);

enum class WeightMethod { mle, cmle };

// Full re-estimation: models, weights, optional calibration, MSM.
MsmEstimate estimate_msm(const LongitudinalDataset& data, const PipelineConfig& config, WeightMethod method);

}  // namespace msmcal
