#include "msmcal/restrictions.hpp"

#include <algorithm>
#include <cmath>

#include "msmcal/error.hpp"
#include "msmcal/io.hpp"
#include "msmcal/linalg.hpp"

namespace msmcal {

namespace {

constexpr double kZeroColumn = 1e-10;
constexpr double kDependence = 1e-10;

// Cell index lookup over the n x (T + 1) grid; -1 where absent.
class CellIndex {
 public:
  CellIndex(Index n, int last_visit) : index_(Eigen::MatrixXi::Constant(n, last_visit + 1, -1)) {}
  void set(const SubjectVisit& c, int k) { index_(c.subject, c.visit) = k; }
  int at(Index i, int j) const { return index_(i, j); }

 private:
  Eigen::MatrixXi index_;
};

void check_rows(const LongitudinalDataset& data, std::span<const SubjectVisit> rows, VisitRange range) {
  if (rows.empty()) throw DataError("restrictions need at least one weight row");
  for (const auto& r : rows) {
    if (r.subject < 0 || r.subject >= data.subjects() || !range.contains(r.visit) || !data.observed(r.subject, r.visit)) {
      throw DataError("restriction row outside the observed cells of visits " + std::to_string(range.first) + ".." +
                      std::to_string(range.last));
    }
  }
}

// Observed cells from the first visit of `range` up to each subject's last row.
std::vector<SubjectVisit> history_cells(const LongitudinalDataset& data, std::span<const SubjectVisit> rows,
                                        VisitRange range) {
  std::vector<int> upto(static_cast<std::size_t>(data.subjects()), range.first - 1);
  for (const auto& r : rows) {
    auto& u = upto[static_cast<std::size_t>(r.subject)];
    u = std::max(u, r.visit);
  }
  std::vector<SubjectVisit> cells;
  for (Index i = 0; i < data.subjects(); ++i) {
    for (int k = range.first; k <= upto[static_cast<std::size_t>(i)]; ++k) cells.push_back({i, k});
  }
  return cells;
}

// Running sums of per-cell contributions within subject, read off at `rows`.
Eigen::MatrixXd cumulate(const LongitudinalDataset& data, std::span<const SubjectVisit> cells,
                         const Eigen::MatrixXd& contrib, std::span<const SubjectVisit> rows,
                         RestrictionTarget target, int last_visit) {
  Eigen::MatrixXd running(contrib.rows(), contrib.cols());
  CellIndex index(data.subjects(), data.last_visit());
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto kk = static_cast<Index>(k);
    index.set(cells[k], static_cast<int>(k));
    if (k > 0 && cells[k - 1].subject == cells[k].subject) {
      running.row(kk) = running.row(kk - 1) + contrib.row(kk);
    } else {
      running.row(kk) = contrib.row(kk);
    }
  }
  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(static_cast<Index>(rows.size()), contrib.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (target == RestrictionTarget::eventual && rows[r].visit != last_visit) continue;
    K.row(static_cast<Index>(r)) = running.row(index.at(rows[r].subject, rows[r].visit));
  }
  return K;
}

RestrictionSystem append(RestrictionSystem a, const RestrictionSystem& b) {
  const Index w = a.width();
  a.K.conservativeResize(a.K.rows(), w + b.width());
  a.K.rightCols(b.width()) = b.K;
  a.l.conservativeResize(w + b.width());
  a.l.tail(b.width()) = b.l;
  a.labels.insert(a.labels.end(), b.labels.begin(), b.labels.end());
  a.families.insert(a.families.end(), b.families.begin(), b.families.end());
  return a;
}

RestrictionSystem keep_columns(const RestrictionSystem& s, const std::vector<Index>& keep) {
  RestrictionSystem out;
  out.rows = s.rows;
  out.probe_spec = s.probe_spec;
  out.pruning_report = s.pruning_report;
  out.K.resize(s.size(), static_cast<Index>(keep.size()));
  out.l.resize(static_cast<Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const auto c = keep[k];
    out.K.col(static_cast<Index>(k)) = s.K.col(c);
    out.l(static_cast<Index>(k)) = s.l(c);
    out.labels.push_back(s.labels[static_cast<std::size_t>(c)]);
    out.families.push_back(s.families[static_cast<std::size_t>(c)]);
  }
  return out;
}

}  // namespace

const char* to_string(RestrictionFamily family) {
  switch (family) {
    case RestrictionFamily::treatment: return "treatment";
    case RestrictionFamily::normalization: return "normalization";
    case RestrictionFamily::censoring: return "censoring";
  }
  return "?";
}

const char* to_string(RestrictionTarget target) {
  return target == RestrictionTarget::repeated ? "repeated" : "eventual";
}

RestrictionTarget parse_restriction_target(const std::string& text) {
  if (text == "repeated") return RestrictionTarget::repeated;
  if (text == "eventual") return RestrictionTarget::eventual;
  throw DataError("unknown restriction target '" + text + "'");
}

Eigen::VectorXd RestrictionSystem::residual(const Eigen::VectorXd& w) const {
  if (w.size() != size()) throw DataError("weight vector length does not match the restriction rows");
  return K.transpose() * w - l;
}

RestrictionSystem treatment_restrictions(const LongitudinalDataset& data, std::span<const SubjectVisit> rows,
                                         const FittedTreatmentModel& numerator, const TreatmentModelSpec& probe,
                                         RestrictionTarget target) {
  const VisitRange range = numerator.range;
  check_rows(data, rows, range);
  const auto cells = history_cells(data, rows, range);
  const auto pred = predict_treatment(numerator, data, cells);
  const auto m = static_cast<Index>(cells.size());

  const auto x0 = design_at(data, Formula::parse(probe.formula0), cells, range);
  std::optional<DesignMatrix> x1;
  if (data.treatment_kind() != TreatmentKind::binary) {
    x1 = design_at(data, Formula::parse(probe.formula1), cells, range);
  }

  Eigen::VectorXd r0(m), r1 = Eigen::VectorXd::Zero(m);
  std::string p0 = "a0:", p1 = "a1:";
  if (data.treatment_kind() == TreatmentKind::continuous) {
    p0 = "mean:";
    p1 = "logvar:";
    const auto& a = data.column("a");
    for (Index k = 0; k < m; ++k) {
      const auto& c = cells[static_cast<std::size_t>(k)];
      const double s2 = pred.e1(k);
      if (s2 < 1e-12) throw NumericalError("degenerate variance: fitted variance below 1e-12");
      const double resid = a(c.subject, c.visit) - pred.e0(k);
      r0(k) = resid / s2;
      r1(k) = -1.0 + resid * resid / s2;
    }
  } else {
    const auto& a0 = data.column("a0");
    const auto& a1 = data.column("a1");
    for (Index k = 0; k < m; ++k) {
      const auto& c = cells[static_cast<std::size_t>(k)];
      r0(k) = a0(c.subject, c.visit) - pred.e0(k);
      if (x1) r1(k) = a0(c.subject, c.visit) * (a1(c.subject, c.visit) - pred.e1(k));
    }
  }

  Eigen::MatrixXd contrib = r0.asDiagonal() * x0.X;
  std::vector<std::string> labels;
  for (const auto& n : x0.names) labels.push_back(p0 + n);
  if (x1) {
    const Index w = contrib.cols();
    contrib.conservativeResize(m, w + x1->cols());
    contrib.rightCols(x1->cols()) = r1.asDiagonal() * x1->X;
    for (const auto& n : x1->names) labels.push_back(p1 + n);
  }

  RestrictionSystem s;
  s.rows.assign(rows.begin(), rows.end());
  s.K = cumulate(data, cells, contrib, rows, target, range.last);
  s.l = Eigen::VectorXd::Zero(s.K.cols());
  s.labels = labels;
  s.families.assign(labels.size(), RestrictionFamily::treatment);
  s.probe_spec = {{"treatment",
                   {{"probe", {probe.formula0, probe.formula1}},
                    {"numerator", {numerator.spec.formula0, numerator.spec.formula1}},
                    {"target", to_string(target)}}}};
  return s;
}

RestrictionSystem normalization_restrictions(std::span<const SubjectVisit> rows, VisitRange range, bool per_visit,
                                             RestrictionTarget target) {
  RestrictionSystem s;
  s.rows.assign(rows.begin(), rows.end());
  const auto m = static_cast<Index>(rows.size());
  if (per_visit) {
    s.K = Eigen::MatrixXd::Zero(m, range.count());
    for (Index k = 0; k < m; ++k) {
      const int v = rows[static_cast<std::size_t>(k)].visit;
      if (!range.contains(v)) throw DataError("normalization row outside the visit range");
      s.K(k, v - range.first) = 1.0;
    }
    s.l = s.K.colwise().sum().transpose();
    for (int v = range.first; v <= range.last; ++v) s.labels.push_back("norm:visit[" + std::to_string(v) + "]");
  } else if (target == RestrictionTarget::eventual) {
    s.K = Eigen::MatrixXd::Zero(m, 1);
    for (Index k = 0; k < m; ++k) {
      if (rows[static_cast<std::size_t>(k)].visit == range.last) s.K(k, 0) = 1.0;
    }
    s.l = s.K.colwise().sum().transpose();
    s.labels.push_back("norm:visit[" + std::to_string(range.last) + "]");
  } else {
    s.K = Eigen::MatrixXd::Ones(m, 1);
    s.l = Eigen::VectorXd::Constant(1, static_cast<double>(m));
    s.labels.push_back("norm:all");
  }
  s.families.assign(s.labels.size(), RestrictionFamily::normalization);
  s.probe_spec = {{"normalization", {{"per_visit", per_visit}, {"target", to_string(target)}}}};
  return s;
}

RestrictionSystem censoring_restrictions(const LongitudinalDataset& data, std::span<const SubjectVisit> rows,
                                         const std::string& probe_formula, VisitRange range, RestrictionTarget target,
                                         const std::optional<FittedCensoringModel>& stabilizer) {
  check_rows(data, rows, range);
  if (stabilizer && target != RestrictionTarget::repeated) {
    throw DataError("stabilized censoring restrictions are only defined for repeated outcomes");
  }
  const Formula formula = Formula::parse(probe_formula);
  for (const auto& t : formula.terms()) {
    for (const auto& f : t) {
      if (f.kind == Factor::Kind::column && f.lag < 1) {
        throw DataError("lag out of range: censoring design term '" + f.label() +
                        "' must refer to the history before the visit (use a lag of at least 1)");
      }
    }
  }
  if (formula.max_lag() > range.first) {
    throw DataError("lag out of range: censoring design needs lag " + std::to_string(formula.max_lag()) +
                    " but the range starts at visit " + std::to_string(range.first));
  }
  const int T = range.last;

  std::vector<SubjectVisit> here(rows.begin(), rows.end());
  std::vector<SubjectVisit> next;
  std::vector<Index> next_of(rows.size(), -1);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k].visit < T) {
      next_of[k] = static_cast<Index>(next.size());
      next.push_back({rows[k].subject, rows[k].visit + 1});
    }
  }
  std::vector<SubjectVisit> baseline;
  for (Index i = 0; i < data.subjects(); ++i) {
    if (data.observed(i, range.first - 1)) baseline.push_back({i, range.first});
  }

  const auto h_here = design_at(data, formula, here, range);
  const auto h_next = design_at(data, formula, next, range);
  const auto h_base = design_at(data, formula, baseline, range);
  Eigen::VectorXd ps_next = Eigen::VectorXd::Ones(static_cast<Index>(next.size()));
  Eigen::VectorXd ps_base = Eigen::VectorXd::Ones(static_cast<Index>(baseline.size()));
  if (stabilizer) {
    ps_next = predict_observation(*stabilizer, data, next);
    ps_base = predict_observation(*stabilizer, data, baseline);
  }

  RestrictionSystem s;
  s.rows = here;
  s.K.resize(static_cast<Index>(rows.size()), h_here.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto kk = static_cast<Index>(k);
    const int j = rows[k].visit;
    if (target == RestrictionTarget::repeated) {
      s.K.row(kk) = (T - j + 1) * h_here.X.row(kk);
      if (j < T) s.K.row(kk) -= (T - j) * ps_next(next_of[k]) * h_next.X.row(next_of[k]);
    } else {
      s.K.row(kk) = h_here.X.row(kk);
      if (j < T) s.K.row(kk) -= h_next.X.row(next_of[k]);
    }
  }
  const Eigen::VectorXd base_sum = h_base.X.transpose() * ps_base;
  s.l = target == RestrictionTarget::repeated ? Eigen::VectorXd(range.count() * base_sum) : base_sum;
  for (const auto& n : h_here.names) s.labels.push_back("censor:" + n);
  s.families.assign(s.labels.size(), RestrictionFamily::censoring);
  s.probe_spec = {{"censoring",
                   {{"probe", probe_formula},
                    {"target", to_string(target)},
                    {"stabilizer", stabilizer ? nlohmann::json(stabilizer->formula) : nlohmann::json()}}}};
  return s;
}

RestrictionSystem prune(RestrictionSystem system) {
  std::vector<Index> nonzero;
  for (Index c = 0; c < system.width(); ++c) {
    const double max_abs = system.size() ? system.K.col(c).cwiseAbs().maxCoeff() : 0.0;
    if (max_abs < kZeroColumn) {
      system.pruning_report.push_back("pruned '" + system.labels[static_cast<std::size_t>(c)] + "': zero column");
    } else {
      nonzero.push_back(c);
    }
  }
  system = keep_columns(system, nonzero);
  const auto dependent = linalg::dependent_columns(system.K, kDependence);
  std::vector<Index> keep;
  for (Index c = 0; c < system.width(); ++c) {
    if (std::find(dependent.begin(), dependent.end(), c) != dependent.end()) {
      system.pruning_report.push_back("pruned '" + system.labels[static_cast<std::size_t>(c)] +
                                      "': linearly dependent on earlier columns");
    } else {
      keep.push_back(c);
    }
  }
  return keep_columns(system, keep);
}

RestrictionSystem assemble_joint(std::span<const RestrictionSystem> systems, bool drop_normalization_if_censoring) {
  if (systems.empty()) throw DataError("no restriction systems to assemble");
  RestrictionSystem joint;
  joint.rows = systems[0].rows;
  joint.K.resize(static_cast<Index>(joint.rows.size()), 0);
  joint.probe_spec = nlohmann::json::object();
  for (const auto& s : systems) {
    if (s.rows != joint.rows) throw DataError("inconsistent row_index across restriction systems");
    joint = append(std::move(joint), s);
    for (const auto& [k, v] : s.probe_spec.items()) joint.probe_spec[k] = v;
    joint.pruning_report.insert(joint.pruning_report.end(), s.pruning_report.begin(), s.pruning_report.end());
  }
  const bool censoring = std::find(joint.families.begin(), joint.families.end(), RestrictionFamily::censoring) !=
                         joint.families.end();
  if (censoring && drop_normalization_if_censoring) {
    std::vector<Index> keep;
    for (Index c = 0; c < joint.width(); ++c) {
      if (joint.families[static_cast<std::size_t>(c)] == RestrictionFamily::normalization) {
        joint.pruning_report.push_back("dropped '" + joint.labels[static_cast<std::size_t>(c)] +
                                       "': normalization is implied by the censoring restrictions");
      } else {
        keep.push_back(c);
      }
    }
    joint = keep_columns(joint, keep);
  }
  return prune(std::move(joint));
}

std::string format_restriction_report(const RestrictionSystem& system, const Eigen::VectorXd& w0,
                                      const std::optional<Eigen::VectorXd>& calibrated) {
  const Eigen::VectorXd r0 = system.residual(w0);
  Eigen::VectorXd r1;
  if (calibrated) r1 = system.residual(*calibrated);
  std::string out = "label,l,residual_initial,residual_calibrated\n";
  for (Index c = 0; c < system.width(); ++c) {
    out += system.labels[static_cast<std::size_t>(c)] + "," + io::format_double(system.l(c)) + "," +
           io::format_double(r0(c)) + "," + (calibrated ? io::format_double(r1(c)) : std::string()) + "\n";
  }
  return out;
}

}  // namespace msmcal
