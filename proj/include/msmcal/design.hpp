#pragma once

#include <Eigen/Core>

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msmcal/dataset.hpp"

namespace msmcal {

// One factor of a model term: a data column at some lag, the visit factor, or 1.
struct Factor {
  enum class Kind { column, visit, one };
  Kind kind = Kind::one;
  std::string name;
  int lag = 0;

  std::string label() const;
  bool operator==(const Factor&) const = default;
};

using Term = std::vector<Factor>;

/// Parsed model formula.
///
///   formula := term ("+" term)*
///   term    := factor (":" factor)*
///   factor  := IDENT ("@" INT)? | "visit" | "1"
///
/// `:` is an elementwise product, `@k` a lag of k visits. A term made only of
/// `1` factors is the intercept. `visit` expands to indicator columns over the
/// visit range the design is evaluated on; the first level is dropped when the
/// formula has an intercept.
class Formula {
 public:
  static Formula parse(const std::string& text);

  const std::string& text() const { return text_; }
  const std::vector<Term>& terms() const { return terms_; }
  bool has_intercept() const;
  int max_lag() const;

  // Column names for the given visit levels, in design order.
  std::vector<std::string> column_names(VisitRange levels) const;

  // Evaluate the design row for (subject, visit). Throws on lags beyond the
  // visit index or missing values.
  void evaluate(const LongitudinalDataset& data, Index subject, int visit, VisitRange levels,
                Eigen::RowVectorXd& out) const;

 private:
  std::string text_;
  std::vector<Term> terms_;
  std::vector<char> bare_visit_;  // term is the visit factor alone
};

/// Design specification: a formula and the response it models.
///
/// Rows are the (subject, visit) pairs in range where the response is defined:
/// subjects observed at the visit, or for the censoring indicator `r`, subjects
/// still in follow-up at the previous visit. `subset`, when set, further keeps
/// only rows where that column equals 1 at the visit (e.g. `a0` for the
/// second ordinal submodel).
struct DesignSpec {
  std::string formula;
  std::string response;
  std::optional<std::string> subset;
};

struct DesignMatrix {
  Eigen::MatrixXd X;
  std::vector<std::string> names;
  std::vector<SubjectVisit> rows;
  Eigen::VectorXd response;  // empty when the spec has no response
  VisitRange levels;

  Index cols() const { return X.cols(); }
  Index size() const { return X.rows(); }
};

// Rows where the response of `spec` is defined in `range`.
std::vector<SubjectVisit> eligible_rows(const LongitudinalDataset& data, const DesignSpec& spec,
                                        VisitRange range);

DesignMatrix build_design(const LongitudinalDataset& data, const DesignSpec& spec, VisitRange range);

// Evaluate a formula at arbitrary rows, using `levels` for the visit factor.
DesignMatrix design_at(const LongitudinalDataset& data, const Formula& formula,
                       std::span<const SubjectVisit> rows, VisitRange levels);

}  // namespace msmcal
