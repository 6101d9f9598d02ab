#pragma once

#include <Eigen/Core>

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "msmcal/dataset.hpp"
#include "msmcal/weights.hpp"

namespace msmcal {

enum class RestrictionFamily { treatment, normalization, censoring };
// Repeated outcomes use every follow-up visit; an eventual outcome only the last.
enum class RestrictionTarget { repeated, eventual };

const char* to_string(RestrictionFamily family);
const char* to_string(RestrictionTarget target);
RestrictionTarget parse_restriction_target(const std::string& text);

/// Linear restrictions K^T w = l on the weights of `rows` (one K row per
/// weight, one column per restriction).
struct RestrictionSystem {
  Eigen::MatrixXd K;
  Eigen::VectorXd l;
  std::vector<SubjectVisit> rows;
  std::vector<std::string> labels;
  std::vector<RestrictionFamily> families;
  nlohmann::json probe_spec = nlohmann::json::object();
  std::vector<std::string> pruning_report;

  Index size() const { return K.rows(); }
  Index width() const { return K.cols(); }
  // K^T w - l.
  Eigen::VectorXd residual(const Eigen::VectorXd& w) const;
};

/// Treatment balance restrictions from probe designs and the numerator
/// (history-only) model. Indicator coding: columns
///   sum_{k<=j} (a0_ik - e0_ik) X0_ik   and, for ordinal treatment,
///   sum_{k<=j} a0_ik (a1_ik - e1_ik) X1_ik,
/// continuous treatment: sum_{k<=j} (a_ik - mu_ik)/s2_ik Xmu_ik and
/// sum_{k<=j} (-1 + (a_ik - mu_ik)^2/s2_ik) Xsigma_ik. All right-hand sides
/// are zero. Probe designs are evaluated at visit k (their lags reach back to
/// the history before visit k). With the eventual target only rows at the
/// last visit carry entries.
RestrictionSystem treatment_restrictions(const LongitudinalDataset& data, std::span<const SubjectVisit> rows,
                                         const FittedTreatmentModel& numerator, const TreatmentModelSpec& probe,
                                         RestrictionTarget target = RestrictionTarget::repeated);

/// Weight averages equal to one: per visit (l = count at the visit) or a
/// single column over all rows (l = number of rows). With the eventual target
/// and per_visit = false the single column covers the last visit only.
RestrictionSystem normalization_restrictions(std::span<const SubjectVisit> rows, VisitRange range, bool per_visit,
                                             RestrictionTarget target = RestrictionTarget::repeated);

/// Censoring restrictions in solved form. With H(i, v) the probe design at
/// visit v and T the last visit, the repeated target gives
///   K(i,j) = (T-j+1) H(i,j) - (T-j) ps(i,j+1) H(i,j+1),
///   l = (number of visits) * sum_i ps(i,first) H(i,first),
/// where ps is the stabilizer prediction (1 when absent). The eventual target
/// gives K(i,j) = H(i,j) - H(i,j+1) (H(i,T) at j = T) and l = sum_i H(i,first).
/// Sums over i run over subjects in follow-up just before the range.
RestrictionSystem censoring_restrictions(const LongitudinalDataset& data, std::span<const SubjectVisit> rows,
                                         const std::string& probe_formula, VisitRange range,
                                         RestrictionTarget target = RestrictionTarget::repeated,
                                         const std::optional<FittedCensoringModel>& stabilizer = std::nullopt);

/// Column-wise concatenation of systems over the same rows. When censoring
/// columns are present and `drop_normalization_if_censoring` is set,
/// normalization columns are dropped. Columns with max-abs below 1e-10 and
/// columns linearly dependent on earlier ones (relative 1e-10) are then
/// pruned; every removal is listed in `pruning_report`.
RestrictionSystem assemble_joint(std::span<const RestrictionSystem> systems,
                                 bool drop_normalization_if_censoring = true);

// Prune a single system the same way.
RestrictionSystem prune(RestrictionSystem system);

// Diagnostic CSV: label,l,residual_initial,residual_calibrated.
std::string format_restriction_report(const RestrictionSystem& system, const Eigen::VectorXd& w0,
                                      const std::optional<Eigen::VectorXd>& calibrated);

}  // namespace msmcal
