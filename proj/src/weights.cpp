#include "msmcal/weights.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_map>

#include "msmcal/error.hpp"
#include "msmcal/io.hpp"

namespace msmcal {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<SubjectVisit> observed_cells(const LongitudinalDataset& data, VisitRange range) {
  std::vector<SubjectVisit> cells;
  for (Index i = 0; i < data.subjects(); ++i) {
    for (int j = range.first; j <= range.last; ++j) {
      if (!data.observed(i, j)) break;
      cells.push_back({i, j});
    }
  }
  return cells;
}

void check_range(const LongitudinalDataset& data, VisitRange range) {
  if (range.first < 1 || range.last > data.last_visit() || range.first > range.last) {
    throw DataError("weight range [" + std::to_string(range.first) + ", " + std::to_string(range.last) +
                    "] must lie within visits 1.." + std::to_string(data.last_visit()));
  }
}

void record_clamps(Provenance& p, Index clamped, Index predictions, const WeightOptions& options) {
  p.clamped += clamped;
  p.predictions += predictions;
  if (predictions > 0 && static_cast<double>(clamped) > options.max_clamp_fraction * static_cast<double>(predictions)) {
    p.warnings.push_back("positivity: " + std::to_string(clamped) + " of " + std::to_string(predictions) +
                         " predicted probabilities hit the clamp");
  }
}

}  // namespace

FittedTreatmentModel fit_treatment_model(const LongitudinalDataset& data, const TreatmentModelSpec& spec,
                                         VisitRange range) {
  FittedTreatmentModel m;
  m.kind = data.treatment_kind();
  m.spec = spec;
  m.range = range;
  switch (m.kind) {
    case TreatmentKind::ordinal3: {
      const auto d0 = build_design(data, {spec.formula0, "a0", std::nullopt}, range);
      m.fit0 = fit_logistic(d0, d0.response);
      const auto d1 = build_design(data, {spec.formula1, "a1", std::string("a0")}, range);
      m.fit1 = fit_logistic(d1, d1.response);
      break;
    }
    case TreatmentKind::binary: {
      const auto d0 = build_design(data, {spec.formula0, "a0", std::nullopt}, range);
      m.fit0 = fit_logistic(d0, d0.response);
      break;
    }
    case TreatmentKind::continuous: {
      const auto dmu = build_design(data, {spec.formula0, "a", std::nullopt}, range);
      const auto dsig = build_design(data, {spec.formula1, "a", std::nullopt}, range);
      m.normal = fit_hetnormal(dmu, dsig, dmu.response);
      break;
    }
  }
  return m;
}

TreatmentPrediction predict_treatment(const FittedTreatmentModel& model, const LongitudinalDataset& data,
                                      std::span<const SubjectVisit> cells) {
  if (model.kind != data.treatment_kind()) throw DataError("treatment model kind does not match the data");
  TreatmentPrediction out;
  const auto m = static_cast<Index>(cells.size());
  out.likelihood.resize(m);
  const auto d0 = design_at(data, Formula::parse(model.spec.formula0), cells, model.range);
  if (model.kind == TreatmentKind::continuous) {
    const auto d1 = design_at(data, Formula::parse(model.spec.formula1), cells, model.range);
    out.e0 = predict_mean(model.normal, d0);
    out.e1 = predict_variance(model.normal, d1);
    const auto& a = data.column("a");
    for (Index k = 0; k < m; ++k) {
      const auto& c = cells[static_cast<std::size_t>(k)];
      const double z = a(c.subject, c.visit) - out.e0(k);
      out.likelihood(k) = std::exp(-0.5 * z * z / out.e1(k)) / std::sqrt(2.0 * std::numbers::pi * out.e1(k));
    }
    return out;
  }
  out.e0 = predict_prob(model.fit0, d0, &out.clamped);
  if (model.kind == TreatmentKind::ordinal3) {
    const auto d1 = design_at(data, Formula::parse(model.spec.formula1), cells, model.range);
    out.e1 = predict_prob(model.fit1, d1, &out.clamped);
  } else {
    out.e1 = Eigen::VectorXd::Zero(m);
  }
  const auto& a0 = data.column("a0");
  const auto& a1 = data.column("a1");
  for (Index k = 0; k < m; ++k) {
    const auto& c = cells[static_cast<std::size_t>(k)];
    const double x0 = a0(c.subject, c.visit);
    double p = x0 == 1.0 ? out.e0(k) : 1.0 - out.e0(k);
    if (model.kind == TreatmentKind::ordinal3 && x0 == 1.0) {
      p *= a1(c.subject, c.visit) == 1.0 ? out.e1(k) : 1.0 - out.e1(k);
    }
    out.likelihood(k) = p;
  }
  return out;
}

FittedCensoringModel fit_censoring_model(const LongitudinalDataset& data, const std::string& formula,
                                         VisitRange range) {
  FittedCensoringModel m;
  m.formula = formula;
  m.range = range;
  const auto d = build_design(data, {formula, "r", std::nullopt}, range);
  m.fit = fit_logistic(d, d.response);
  return m;
}

Eigen::VectorXd predict_observation(const FittedCensoringModel& model, const LongitudinalDataset& data,
                                    std::span<const SubjectVisit> cells, Index* clamped) {
  const auto d = design_at(data, Formula::parse(model.formula), cells, model.range);
  return predict_prob(model.fit, d, clamped);
}

const char* to_string(WeightKind kind) {
  switch (kind) {
    case WeightKind::treatment_stabilized: return "treatment_stabilized";
    case WeightKind::censor_unstabilized: return "censor_unstabilized";
    case WeightKind::censor_stabilized: return "censor_stabilized";
    case WeightKind::joint: return "joint";
    case WeightKind::calibrated: return "calibrated";
  }
  return "?";
}

WeightKind parse_weight_kind(const std::string& text) {
  for (auto k : {WeightKind::treatment_stabilized, WeightKind::censor_unstabilized, WeightKind::censor_stabilized,
                 WeightKind::joint, WeightKind::calibrated}) {
    if (text == to_string(k)) return k;
  }
  throw DataError("unknown weight kind '" + text + "'");
}

const char* to_string(Scaling scaling) {
  switch (scaling) {
    case Scaling::none: return "none";
    case Scaling::per_visit_to_n: return "per_visit_to_n";
    case Scaling::total_to_nT: return "total_to_nT";
  }
  return "?";
}

Scaling parse_scaling(const std::string& text) {
  for (auto s : {Scaling::none, Scaling::per_visit_to_n, Scaling::total_to_nT}) {
    if (text == to_string(s)) return s;
  }
  throw DataError("unknown scaling '" + text + "'");
}

std::vector<SubjectVisit> WeightMatrix::rows() const {
  std::vector<SubjectVisit> out;
  for (Index i = 0; i < subjects(); ++i) {
    for (int j = range.first; j <= range.last; ++j) {
      if (mask(i, j)) out.push_back({i, j});
    }
  }
  return out;
}

Eigen::VectorXd WeightMatrix::flatten() const {
  const auto cells = rows();
  return flatten(cells);
}

Eigen::VectorXd WeightMatrix::flatten(std::span<const SubjectVisit> cells) const {
  Eigen::VectorXd out(static_cast<Index>(cells.size()));
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto& c = cells[k];
    if (c.visit < range.first || c.visit > range.last || !mask(c.subject, c.visit)) {
      throw DataError("no weight defined at subject " + ids[static_cast<std::size_t>(c.subject)] + ", visit " +
                      std::to_string(c.visit));
    }
    out(static_cast<Index>(k)) = values(c.subject, c.visit);
  }
  return out;
}

WeightMatrix weights_from_factors(const LongitudinalDataset& data, VisitRange range, WeightKind kind,
                                  const Eigen::MatrixXd& factors) {
  check_range(data, range);
  WeightMatrix w;
  w.ids = data.ids();
  w.range = range;
  w.kind = kind;
  const Index n = data.subjects();
  const Index cols = data.last_visit() + 1;
  w.values = Eigen::MatrixXd::Constant(n, cols, kNaN);
  w.factors = Eigen::MatrixXd::Constant(n, cols, kNaN);
  w.mask = Eigen::MatrixXi::Zero(n, cols);
  for (Index i = 0; i < n; ++i) {
    double running = 1.0;
    for (int j = range.first; j <= range.last; ++j) {
      if (!data.observed(i, j)) break;
      const double f = factors(i, j);
      if (!(f > 0.0) || !std::isfinite(f)) {
        throw NumericalError("non-positive weight factor at subject " + data.ids()[static_cast<std::size_t>(i)] +
                             ", visit " + std::to_string(j));
      }
      running *= f;
      w.mask(i, j) = 1;
      w.factors(i, j) = f;
      w.values(i, j) = running;
    }
  }
  return w;
}

WeightMatrix unit_weights(const LongitudinalDataset& data, VisitRange range) {
  const Eigen::MatrixXd ones = Eigen::MatrixXd::Ones(data.subjects(), data.last_visit() + 1);
  return weights_from_factors(data, range, WeightKind::joint, ones);
}

WeightMatrix treatment_weights(const LongitudinalDataset& data, const FittedTreatmentModel& numerator,
                               const FittedTreatmentModel& denominator, const WeightOptions& options) {
  if (numerator.range != denominator.range) {
    throw DataError("numerator and denominator models cover different visit ranges");
  }
  const VisitRange range = denominator.range;
  check_range(data, range);
  const auto cells = observed_cells(data, range);
  const auto num = predict_treatment(numerator, data, cells);
  const auto den = predict_treatment(denominator, data, cells);
  Eigen::MatrixXd factors = Eigen::MatrixXd::Constant(data.subjects(), data.last_visit() + 1, kNaN);
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto kk = static_cast<Index>(k);
    factors(cells[k].subject, cells[k].visit) = num.likelihood(kk) / den.likelihood(kk);
  }
  auto w = weights_from_factors(data, range, WeightKind::treatment_stabilized, factors);
  w.provenance.models = {"numerator: " + numerator.spec.formula0 + " | " + numerator.spec.formula1,
                         "denominator: " + denominator.spec.formula0 + " | " + denominator.spec.formula1};
  const Index per_cell = data.treatment_kind() == TreatmentKind::ordinal3 ? 4 : 2;
  record_clamps(w.provenance, num.clamped + den.clamped,
                data.treatment_kind() == TreatmentKind::continuous ? 0 : per_cell * static_cast<Index>(cells.size()),
                options);
  return w;
}

WeightMatrix censoring_weights(const LongitudinalDataset& data, const FittedCensoringModel& model,
                               const std::optional<FittedCensoringModel>& stabilizer,
                               const WeightOptions& options) {
  const VisitRange range = model.range;
  check_range(data, range);
  if (stabilizer && stabilizer->range != range) {
    throw DataError("censoring stabilizer covers a different visit range");
  }
  const auto cells = observed_cells(data, range);
  Index clamped = 0;
  const Eigen::VectorXd pi = predict_observation(model, data, cells, &clamped);
  Eigen::VectorXd ps = Eigen::VectorXd::Ones(pi.size());
  if (stabilizer) ps = predict_observation(*stabilizer, data, cells, &clamped);
  Eigen::MatrixXd factors = Eigen::MatrixXd::Constant(data.subjects(), data.last_visit() + 1, kNaN);
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto kk = static_cast<Index>(k);
    factors(cells[k].subject, cells[k].visit) = ps(kk) / pi(kk);
  }
  auto w = weights_from_factors(data, range,
                                stabilizer ? WeightKind::censor_stabilized : WeightKind::censor_unstabilized, factors);
  w.provenance.models = {"censoring: " + model.formula};
  if (stabilizer) w.provenance.models.push_back("censoring stabilizer: " + stabilizer->formula);
  record_clamps(w.provenance, clamped, static_cast<Index>(cells.size()) * (stabilizer ? 2 : 1), options);
  return w;
}

WeightMatrix rescale_cells(const WeightMatrix& w0, std::span<const SubjectVisit> cells,
                           const Eigen::VectorXd& multipliers, WeightKind kind) {
  if (static_cast<Index>(cells.size()) != multipliers.size()) {
    throw DataError("multiplier count does not match the number of cells");
  }
  Eigen::MatrixXd c = Eigen::MatrixXd::Ones(w0.values.rows(), w0.values.cols());
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto& cell = cells[k];
    if (cell.visit < w0.range.first || cell.visit > w0.range.last || !w0.mask(cell.subject, cell.visit)) {
      throw DataError("multiplier given for a cell without a weight");
    }
    c(cell.subject, cell.visit) = multipliers(static_cast<Index>(k));
  }
  WeightMatrix w = w0;
  w.kind = kind;
  for (Index i = 0; i < w.subjects(); ++i) {
    for (int j = w.range.first; j <= w.range.last; ++j) {
      if (!w.mask(i, j)) continue;
      w.values(i, j) *= c(i, j);
      const double prev = j > w.range.first ? c(i, j - 1) : 1.0;
      if (c(i, j) != prev) w.factors(i, j) *= c(i, j) / prev;
    }
  }
  return w;
}

WeightMatrix combine_and_scale(const WeightMatrix& tw, const std::optional<WeightMatrix>& cw, Scaling scaling) {
  WeightMatrix w = tw;
  if (cw) {
    if (cw->ids != tw.ids || cw->range != tw.range || cw->mask.rows() != tw.mask.rows() ||
        cw->mask.cols() != tw.mask.cols()) {
      throw DataError("incompatible masks: treatment and censoring weights cover different cells");
    }
    for (Index i = 0; i < w.subjects(); ++i) {
      for (int j = w.range.first; j <= w.range.last; ++j) {
        if (cw->mask(i, j) && !tw.mask(i, j)) {
          throw DataError("incompatible masks: censoring weight without a treatment weight at subject " +
                          tw.ids[static_cast<std::size_t>(i)] + ", visit " + std::to_string(j));
        }
        if (!cw->mask(i, j)) {
          w.mask(i, j) = 0;
          w.values(i, j) = kNaN;
          w.factors(i, j) = kNaN;
          continue;
        }
        w.values(i, j) *= cw->values(i, j);
        w.factors(i, j) *= cw->factors(i, j);
      }
    }
    w.kind = WeightKind::joint;
    for (const auto& m : cw->provenance.models) w.provenance.models.push_back(m);
    for (const auto& m : cw->provenance.warnings) w.provenance.warnings.push_back(m);
    w.provenance.clamped += cw->provenance.clamped;
    w.provenance.predictions += cw->provenance.predictions;
  }
  if (scaling == Scaling::none) return w;

  const auto cells = w.rows();
  Eigen::VectorXd mult(static_cast<Index>(cells.size()));
  if (scaling == Scaling::per_visit_to_n) {
    std::vector<double> sum(static_cast<std::size_t>(w.range.last + 1), 0.0);
    std::vector<double> count(sum.size(), 0.0);
    for (const auto& c : cells) {
      sum[static_cast<std::size_t>(c.visit)] += w.values(c.subject, c.visit);
      count[static_cast<std::size_t>(c.visit)] += 1.0;
    }
    for (std::size_t k = 0; k < cells.size(); ++k) {
      const auto v = static_cast<std::size_t>(cells[k].visit);
      mult(static_cast<Index>(k)) = count[v] / sum[v];
    }
  } else {
    // Subjects entering the range; with a later first visit only those with a weight there are known.
    Index cohort = 0;
    for (Index i = 0; i < w.subjects(); ++i) {
      if (w.range.first == 1 || w.mask(i, w.range.first)) ++cohort;
    }
    double total = 0.0;
    for (const auto& c : cells) total += w.values(c.subject, c.visit);
    mult.setConstant(static_cast<double>(cohort) * w.range.count() / total);
  }
  const WeightKind kind = w.kind;
  w = rescale_cells(w, cells, mult, kind);
  w.provenance.scaling = to_string(scaling);
  return w;
}

void require_same_subjects(const WeightMatrix& w, const LongitudinalDataset& data) {
  if (w.ids != data.ids()) throw DataError("weights do not match the dataset's subjects");
  if (w.range.last > data.last_visit()) throw DataError("weights extend past the dataset's last visit");
  for (Index i = 0; i < w.subjects(); ++i) {
    for (int j = w.range.first; j <= w.range.last; ++j) {
      if (w.mask(i, j) && !data.observed(i, j)) {
        throw DataError("weight given for an unobserved cell at subject " + w.ids[static_cast<std::size_t>(i)] +
                        ", visit " + std::to_string(j));
      }
    }
  }
}

std::string format_weights(const WeightMatrix& w) {
  std::string out = "id,visit,kind,mask,weight,factor\n";
  const std::string kind = to_string(w.kind);
  for (Index i = 0; i < w.subjects(); ++i) {
    for (int j = w.range.first; j <= w.range.last; ++j) {
      out += w.ids[static_cast<std::size_t>(i)] + "," + std::to_string(j) + "," + kind + ",";
      if (w.mask(i, j)) {
        out += "1," + io::format_double(w.values(i, j)) + "," + io::format_double(w.factors(i, j)) + "\n";
      } else {
        out += "0,,\n";
      }
    }
  }
  return out;
}

WeightMatrix parse_weights(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("weights file is empty");
  const auto header = io::split_csv(line);
  const std::vector<std::string> expected = {"id", "visit", "kind", "mask", "weight", "factor"};
  if (header.size() != expected.size()) throw DataError("weights header must be id,visit,kind,mask,weight,factor");
  for (std::size_t k = 0; k < expected.size(); ++k) {
    if (io::trim(header[k]) != expected[k]) throw DataError("weights header must be id,visit,kind,mask,weight,factor");
  }
  struct Record {
    Index subject;
    int visit;
    bool mask;
    double weight, factor;
  };
  std::vector<Record> records;
  std::vector<std::string> ids;
  std::unordered_map<std::string, Index> index;
  std::optional<std::string> kind;
  int first = std::numeric_limits<int>::max(), last = -1;
  std::size_t lineno = 1;
  auto fail = [&](const std::string& why) -> void {
    throw DataError("parse error at line " + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (io::trim(line).empty()) continue;
    const auto f = io::split_csv(line);
    if (f.size() != expected.size()) fail("expected 6 fields");
    const std::string id(io::trim(f[0]));
    const auto visit = io::parse_int(f[1]);
    if (!visit || *visit < 0) fail("bad visit");
    const std::string k(io::trim(f[2]));
    if (kind && *kind != k) fail("mixed weight kinds");
    kind = k;
    const auto m = io::parse_int(f[3]);
    if (!m || (*m != 0 && *m != 1)) fail("mask must be 0 or 1");
    Record r{0, static_cast<int>(*visit), *m == 1, kNaN, kNaN};
    if (r.mask) {
      const auto wv = io::parse_double(f[4]);
      const auto fv = io::parse_double(f[5]);
      if (!wv || !fv) fail("bad weight or factor");
      r.weight = *wv;
      r.factor = *fv;
      if (!(r.weight > 0)) fail("weights must be positive");
    }
    auto [it, inserted] = index.emplace(id, static_cast<Index>(ids.size()));
    if (inserted) ids.push_back(id);
    r.subject = it->second;
    first = std::min(first, r.visit);
    last = std::max(last, r.visit);
    records.push_back(r);
  }
  if (records.empty()) throw DataError("weights file has no records");
  if (first < 1) throw DataError("weights must start at visit 1 or later");
  WeightMatrix w;
  w.ids = ids;
  w.range = {first, last};
  w.kind = parse_weight_kind(*kind);
  const auto n = static_cast<Index>(ids.size());
  w.values = Eigen::MatrixXd::Constant(n, last + 1, kNaN);
  w.factors = Eigen::MatrixXd::Constant(n, last + 1, kNaN);
  w.mask = Eigen::MatrixXi::Zero(n, last + 1);
  for (const auto& r : records) {
    if (r.mask) {
      w.mask(r.subject, r.visit) = 1;
      w.values(r.subject, r.visit) = r.weight;
      w.factors(r.subject, r.visit) = r.factor;
    }
  }
  return w;
}

void write_weights(const std::string& path, const WeightMatrix& w) { io::write_file(path, format_weights(w)); }

WeightMatrix read_weights(const std::string& path) { return parse_weights(io::read_file(path)); }

nlohmann::json to_json(const Provenance& p) {
  return {{"models", p.models},
          {"scaling", p.scaling},
          {"clamped", p.clamped},
          {"predictions", p.predictions},
          {"warnings", p.warnings}};
}

}  // namespace msmcal
