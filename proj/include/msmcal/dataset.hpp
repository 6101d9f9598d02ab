#pragma once

#include <Eigen/Core>

#include <compare>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace msmcal {

using Index = Eigen::Index;

enum class TreatmentKind { ordinal3, binary, continuous };

const char* to_string(TreatmentKind kind);
TreatmentKind parse_treatment_kind(const std::string& text);

// A single (subject, visit) cell of the longitudinal grid.
struct SubjectVisit {
  Index subject = 0;
  int visit = 0;
  auto operator<=>(const SubjectVisit&) const = default;
};

// Closed range of follow-up visits [first, last].
struct VisitRange {
  int first = 1;
  int last = 1;
  int count() const { return last - first + 1; }
  bool contains(int v) const { return v >= first && v <= last; }
  auto operator<=>(const VisitRange&) const = default;
};

// Column mapping for long-format files. `rename` maps canonical column names
// (id, visit, r, y, a0, a1, a) onto the header names actually used in the file.
struct Schema {
  TreatmentKind treatment = TreatmentKind::ordinal3;
  std::map<std::string, std::string> rename;
};

/// Per-subject, per-visit cohort records on a dense grid of n subjects by
/// T + 1 visits. Every column is stored as an n x (T + 1) matrix; missing
/// entries are NaN and can only occur where r = 0.
///
/// Construction validates the structural invariants: r = 1 at visit 0,
/// monotone dropout, a1 = 1 only when a0 = 1, and no missing fields while
/// under follow-up. Treatment-derived columns are appended automatically:
/// `a01` (a0 - a1), `cum_a0`, `cum_a1`, `cum_a01` for indicator coding and
/// `cum_a` for continuous treatment, each a running sum from visit 0.
class LongitudinalDataset {
 public:
  LongitudinalDataset(TreatmentKind kind, std::vector<std::string> ids,
                      std::vector<std::string> covariates,
                      std::map<std::string, Eigen::MatrixXd> columns);

  Index subjects() const { return static_cast<Index>(ids_.size()); }
  int last_visit() const { return last_visit_; }
  TreatmentKind treatment_kind() const { return kind_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::vector<std::string>& covariates() const { return covariates_; }

  bool has_column(const std::string& name) const;
  const Eigen::MatrixXd& column(const std::string& name) const;
  double value(const std::string& name, Index subject, int visit) const;

  bool observed(Index subject, int visit) const;
  // Number of subjects with r = 1 at `visit`.
  Index observed_count(int visit) const;

  // Columns written to disk, in canonical order.
  std::vector<std::string> file_columns() const;

  // Copy with an extra covariate column (n x (T + 1), NaN allowed where r = 0).
  LongitudinalDataset with_covariate(const std::string& name, Eigen::MatrixXd values) const;

  // Subset/resample subjects; duplicated subjects get unique ids `id#k`.
  LongitudinalDataset select_subjects(std::span<const Index> subjects) const;

 private:
  void validate() const;
  void derive_treatment_columns();

  TreatmentKind kind_;
  std::vector<std::string> ids_;
  std::vector<std::string> covariates_;
  std::map<std::string, Eigen::MatrixXd> columns_;
  std::vector<std::string> derived_;
  int last_visit_ = 0;
};

LongitudinalDataset load_long(const std::string& path, const Schema& schema);
LongitudinalDataset parse_long(const std::string& text, const Schema& schema);

// Canonical long format: subjects in dataset order, every visit 0..T emitted,
// blank fields for missing values, shortest round-trip float formatting.
std::string format_long(const LongitudinalDataset& data);
void write_long(const std::string& path, const LongitudinalDataset& data);

// Column shifted by `depth` visits within subject; entries with visit < depth are NaN.
Eigen::MatrixXd lag(const LongitudinalDataset& data, const std::string& column, int depth);

// Value of `column` at visit - depth; throws when depth exceeds the visit.
double lagged_value(const LongitudinalDataset& data, const std::string& column, int depth,
                    Index subject, int visit);

}  // namespace msmcal
