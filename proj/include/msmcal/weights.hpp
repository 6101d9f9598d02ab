#pragma once

#include <Eigen/Core>

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "msmcal/dataset.hpp"
#include "msmcal/design.hpp"
#include "msmcal/glm.hpp"

namespace msmcal {

// Formulas for one treatment model. For indicator coding `formula0` models
// a0 and `formula1` models a1 among rows with a0 = 1 (unused for binary
// treatment). For continuous treatment they are the mean and log-variance
// designs of the heteroscedastic normal model.
struct TreatmentModelSpec {
  std::string formula0;
  std::string formula1;
};

struct FittedTreatmentModel {
  TreatmentKind kind = TreatmentKind::ordinal3;
  TreatmentModelSpec spec;
  VisitRange range;
  LogisticFit fit0;
  LogisticFit fit1;
  HetNormalFit normal;
};

FittedTreatmentModel fit_treatment_model(const LongitudinalDataset& data, const TreatmentModelSpec& spec,
                                         VisitRange range);

// Model predictions at a list of cells. For indicator coding `e0`/`e1` are
// the fitted probabilities of a0 = 1 and of a1 = 1 given a0 = 1; for
// continuous treatment they hold the fitted mean and variance. `likelihood`
// is the probability (or density) of the observed treatment at each cell.
struct TreatmentPrediction {
  Eigen::VectorXd e0;
  Eigen::VectorXd e1;
  Eigen::VectorXd likelihood;
  Index clamped = 0;
};

TreatmentPrediction predict_treatment(const FittedTreatmentModel& model, const LongitudinalDataset& data,
                                      std::span<const SubjectVisit> cells);

// Logistic model for pr(r_j = 1 | history, r_{j-1} = 1), pooled over visits.
struct FittedCensoringModel {
  std::string formula;
  VisitRange range;
  LogisticFit fit;
};

FittedCensoringModel fit_censoring_model(const LongitudinalDataset& data, const std::string& formula,
                                         VisitRange range);

// Fitted pr(r = 1) at each cell. Cells only need follow-up at the previous visit.
Eigen::VectorXd predict_observation(const FittedCensoringModel& model, const LongitudinalDataset& data,
                                    std::span<const SubjectVisit> cells, Index* clamped = nullptr);

enum class WeightKind { treatment_stabilized, censor_unstabilized, censor_stabilized, joint, calibrated };
enum class Scaling { none, per_visit_to_n, total_to_nT };

const char* to_string(WeightKind kind);
WeightKind parse_weight_kind(const std::string& text);
const char* to_string(Scaling scaling);
Scaling parse_scaling(const std::string& text);

struct Provenance {
  std::vector<std::string> models;
  std::string scaling = "none";
  Index clamped = 0;
  Index predictions = 0;
  std::vector<std::string> warnings;
};

/// Per-subject, per-visit weights over a visit range.
///
/// `values` and `factors` are n x (T + 1). For cells in range with mask 1,
/// values(i, j) = values(i, j - 1) * factors(i, j), where the value just
/// before the range is 1. Cells outside the mask hold NaN.
struct WeightMatrix {
  std::vector<std::string> ids;
  VisitRange range;
  WeightKind kind = WeightKind::joint;
  Eigen::MatrixXd values;
  Eigen::MatrixXd factors;
  Eigen::MatrixXi mask;
  Provenance provenance;

  Index subjects() const { return static_cast<Index>(ids.size()); }
  // Masked-in cells in range, subject-major.
  std::vector<SubjectVisit> rows() const;
  Eigen::VectorXd flatten() const;
  Eigen::VectorXd flatten(std::span<const SubjectVisit> cells) const;
};

struct WeightOptions {
  // Fraction of clamped probabilities above which a positivity warning is recorded.
  double max_clamp_fraction = 0.01;
};

// Weights equal to 1 on every observed cell of the range.
WeightMatrix unit_weights(const LongitudinalDataset& data, VisitRange range);

WeightMatrix treatment_weights(const LongitudinalDataset& data, const FittedTreatmentModel& numerator,
                               const FittedTreatmentModel& denominator, const WeightOptions& options = {});

WeightMatrix censoring_weights(const LongitudinalDataset& data, const FittedCensoringModel& model,
                               const std::optional<FittedCensoringModel>& stabilizer = std::nullopt,
                               const WeightOptions& options = {});

// Cumulative weights from per-cell factors on the observed cells of `range`.
WeightMatrix weights_from_factors(const LongitudinalDataset& data, VisitRange range, WeightKind kind,
                                  const Eigen::MatrixXd& factors);

WeightMatrix combine_and_scale(const WeightMatrix& tw, const std::optional<WeightMatrix>& cw,
                               Scaling scaling);

// w0 multiplied cellwise by `multipliers` (given on `cells`; other cells keep
// their value). Factors are updated so the cumulative structure still holds.
WeightMatrix rescale_cells(const WeightMatrix& w0, std::span<const SubjectVisit> cells,
                           const Eigen::VectorXd& multipliers, WeightKind kind);

// Throws DataError unless the weights were built for these subjects in this order.
void require_same_subjects(const WeightMatrix& w, const LongitudinalDataset& data);

// CSV with header id,visit,kind,mask,weight,factor over every visit in range.
std::string format_weights(const WeightMatrix& w);
WeightMatrix parse_weights(const std::string& text);
void write_weights(const std::string& path, const WeightMatrix& w);
WeightMatrix read_weights(const std::string& path);

nlohmann::json to_json(const Provenance& p);

}  // namespace msmcal
