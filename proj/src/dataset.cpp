#include "msmcal/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_map>

#include "msmcal/error.hpp"
#include "msmcal/io.hpp"

namespace msmcal {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string where(const std::vector<std::string>& ids, Index i, int j) {
  return "subject " + ids[static_cast<std::size_t>(i)] + ", visit " + std::to_string(j);
}

bool is_indicator(double x) { return x == 0.0 || x == 1.0; }

}  // namespace

const char* to_string(TreatmentKind kind) {
  switch (kind) {
    case TreatmentKind::ordinal3: return "ordinal3";
    case TreatmentKind::binary: return "binary";
    case TreatmentKind::continuous: return "continuous";
  }
  return "?";
}

TreatmentKind parse_treatment_kind(const std::string& text) {
  if (text == "ordinal3" || text == "ordinal") return TreatmentKind::ordinal3;
  if (text == "binary") return TreatmentKind::binary;
  if (text == "continuous") return TreatmentKind::continuous;
  throw DataError("unknown treatment kind '" + text + "'");
}

LongitudinalDataset::LongitudinalDataset(TreatmentKind kind, std::vector<std::string> ids,
                                         std::vector<std::string> covariates,
                                         std::map<std::string, Eigen::MatrixXd> columns)
    : kind_(kind),
      ids_(std::move(ids)),
      covariates_(std::move(covariates)),
      columns_(std::move(columns)) {
  if (ids_.empty()) throw DataError("dataset has no subjects");
  const auto r = columns_.find("r");
  if (r == columns_.end()) throw DataError("dataset is missing column 'r'");
  if (r->second.cols() < 1) throw DataError("dataset has no visits");
  last_visit_ = static_cast<int>(r->second.cols()) - 1;

  std::vector<std::string> required = {"r", "y"};
  if (kind_ == TreatmentKind::continuous) {
    required.push_back("a");
  } else {
    required.push_back("a0");
    if (kind_ == TreatmentKind::binary && !columns_.count("a1")) {
      columns_["a1"] = Eigen::MatrixXd::Zero(subjects(), last_visit_ + 1);
    }
    required.push_back("a1");
  }
  for (const auto& c : covariates_) required.push_back(c);
  for (const auto& name : required) {
    const auto it = columns_.find(name);
    if (it == columns_.end()) throw DataError("dataset is missing column '" + name + "'");
    if (it->second.rows() != subjects() || it->second.cols() != last_visit_ + 1) {
      throw DataError("column '" + name + "' has the wrong shape");
    }
  }
  validate();
  derive_treatment_columns();
}

void LongitudinalDataset::validate() const {
  const auto& r = columns_.at("r");
  std::vector<const Eigen::MatrixXd*> fields;
  std::vector<std::string> field_names;
  for (const auto& [name, m] : columns_) {
    if (name == "r") continue;
    fields.push_back(&m);
    field_names.push_back(name);
  }
  const bool indicators = kind_ != TreatmentKind::continuous;
  for (Index i = 0; i < subjects(); ++i) {
    for (int j = 0; j <= last_visit_; ++j) {
      const double rij = r(i, j);
      if (!is_indicator(rij)) throw DataError("r must be 0 or 1 at " + where(ids_, i, j));
      if (j == 0 && rij != 1.0) throw DataError("baseline not observed at " + where(ids_, i, j));
      if (j > 0 && rij == 1.0 && r(i, j - 1) == 0.0) {
        throw DataError("non-monotone dropout at " + where(ids_, i, j));
      }
      if (indicators) {
        const double a0 = columns_.at("a0")(i, j);
        const double a1 = columns_.at("a1")(i, j);
        if ((!std::isnan(a0) && !is_indicator(a0)) || (!std::isnan(a1) && !is_indicator(a1))) {
          throw DataError("treatment indicators must be 0 or 1 at " + where(ids_, i, j));
        }
        if (a1 == 1.0 && a0 == 0.0) {
          throw DataError("ordinal coding violated at " + where(ids_, i, j));
        }
        if (kind_ == TreatmentKind::binary && a1 == 1.0) {
          throw DataError("binary treatment with a1 = 1 at " + where(ids_, i, j));
        }
      }
      if (rij == 1.0) {
        for (std::size_t f = 0; f < fields.size(); ++f) {
          if (std::isnan((*fields[f])(i, j))) {
            throw DataError("missing value for '" + field_names[f] + "' at " + where(ids_, i, j));
          }
        }
      }
    }
  }
}

void LongitudinalDataset::derive_treatment_columns() {
  const auto cumulate = [&](const Eigen::MatrixXd& m) {
    Eigen::MatrixXd out(m.rows(), m.cols());
    for (Index i = 0; i < m.rows(); ++i) {
      double acc = 0.0;
      for (Index j = 0; j < m.cols(); ++j) {
        acc += m(i, j);
        out(i, j) = acc;
      }
    }
    return out;
  };
  const auto add = [&](const std::string& name, Eigen::MatrixXd m) {
    if (columns_.count(name)) throw DataError("column name '" + name + "' is reserved");
    columns_[name] = std::move(m);
    derived_.push_back(name);
  };
  if (kind_ == TreatmentKind::continuous) {
    add("cum_a", cumulate(columns_.at("a")));
  } else {
    const Eigen::MatrixXd a01 = columns_.at("a0") - columns_.at("a1");
    add("a01", a01);
    add("cum_a0", cumulate(columns_.at("a0")));
    add("cum_a1", cumulate(columns_.at("a1")));
    add("cum_a01", cumulate(a01));
  }
}

bool LongitudinalDataset::has_column(const std::string& name) const {
  return columns_.count(name) > 0;
}

const Eigen::MatrixXd& LongitudinalDataset::column(const std::string& name) const {
  const auto it = columns_.find(name);
  if (it == columns_.end()) throw DataError("unknown column '" + name + "'");
  return it->second;
}

double LongitudinalDataset::value(const std::string& name, Index subject, int visit) const {
  return column(name)(subject, visit);
}

bool LongitudinalDataset::observed(Index subject, int visit) const {
  return columns_.at("r")(subject, visit) == 1.0;
}

Index LongitudinalDataset::observed_count(int visit) const {
  const auto& r = columns_.at("r");
  return static_cast<Index>(r.col(visit).sum());
}

std::vector<std::string> LongitudinalDataset::file_columns() const {
  std::vector<std::string> out = {"r", "y"};
  if (kind_ == TreatmentKind::continuous) {
    out.push_back("a");
  } else {
    out.push_back("a0");
    out.push_back("a1");
  }
  out.insert(out.end(), covariates_.begin(), covariates_.end());
  return out;
}

LongitudinalDataset LongitudinalDataset::with_covariate(const std::string& name,
                                                        Eigen::MatrixXd values) const {
  if (columns_.count(name) || name == "visit") {
    throw DataError("column '" + name + "' already exists");
  }
  auto columns = columns_;
  for (const auto& d : derived_) columns.erase(d);
  columns[name] = std::move(values);
  auto covariates = covariates_;
  covariates.push_back(name);
  return LongitudinalDataset(kind_, ids_, std::move(covariates), std::move(columns));
}

LongitudinalDataset LongitudinalDataset::select_subjects(std::span<const Index> subjects) const {
  if (subjects.empty()) throw DataError("cannot select an empty set of subjects");
  std::vector<std::string> ids;
  ids.reserve(subjects.size());
  std::unordered_map<Index, int> seen;
  for (const Index s : subjects) {
    if (s < 0 || s >= this->subjects()) throw DataError("subject index out of range");
    const int copy = seen[s]++;
    const auto& base = ids_[static_cast<std::size_t>(s)];
    ids.push_back(copy == 0 ? base : base + "#" + std::to_string(copy));
  }
  std::map<std::string, Eigen::MatrixXd> columns;
  for (const auto& [name, m] : columns_) {
    if (std::find(derived_.begin(), derived_.end(), name) != derived_.end()) continue;
    Eigen::MatrixXd sub(static_cast<Index>(subjects.size()), m.cols());
    for (std::size_t k = 0; k < subjects.size(); ++k) sub.row(static_cast<Index>(k)) = m.row(subjects[k]);
    columns[name] = std::move(sub);
  }
  return LongitudinalDataset(kind_, std::move(ids), covariates_, std::move(columns));
}

LongitudinalDataset parse_long(const std::string& text, const Schema& schema) {
  const auto header_name = [&](const std::string& canonical) {
    const auto it = schema.rename.find(canonical);
    return it == schema.rename.end() ? canonical : it->second;
  };

  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!io::trim(line).empty()) {
      for (auto f : io::split_csv(line)) header.emplace_back(f);
      break;
    }
  }
  if (header.empty()) throw DataError("parse error: missing header");

  std::vector<std::string> canonical = {"id", "visit", "r", "y"};
  if (schema.treatment == TreatmentKind::continuous) {
    canonical.push_back("a");
  } else {
    canonical.push_back("a0");
    canonical.push_back("a1");
  }
  // header position -> canonical name (or covariate name)
  std::vector<std::string> role(header.size());
  std::map<std::string, std::size_t> position;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c].empty()) throw DataError("parse error at line 1: empty column name");
    role[c] = header[c];
    for (const auto& name : canonical) {
      if (header_name(name) == header[c]) role[c] = name;
    }
    if (position.count(role[c])) throw DataError("parse error: duplicate column '" + header[c] + "'");
    position[role[c]] = c;
  }
  for (const auto& name : canonical) {
    if (name == "a1" && schema.treatment == TreatmentKind::binary) continue;
    if (!position.count(name)) throw DataError("parse error: missing column '" + header_name(name) + "'");
  }
  std::vector<std::string> covariates;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (std::find(canonical.begin(), canonical.end(), role[c]) == canonical.end()) {
      if (role[c] == "visit" || role[c] == "a01" || role[c].rfind("cum_", 0) == 0) {
        throw DataError("parse error: column name '" + header[c] + "' is reserved");
      }
      covariates.push_back(role[c]);
    }
  }

  struct Record {
    std::size_t subject;
    int visit;
    std::vector<double> values;  // aligned with header, id/visit slots unused
    int line;
  };
  std::vector<Record> records;
  std::vector<std::string> ids;
  std::unordered_map<std::string, std::size_t> id_index;
  int max_visit = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (io::trim(line).empty()) continue;
    const auto fields = io::split_csv(line);
    if (fields.size() != header.size()) {
      throw DataError("parse error at line " + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " fields, found " +
                      std::to_string(fields.size()));
    }
    Record rec{0, 0, std::vector<double>(header.size(), kNaN), line_no};
    for (std::size_t c = 0; c < header.size(); ++c) {
      const auto field = fields[c];
      const auto fail = [&](const std::string& why) {
        return DataError("parse error at line " + std::to_string(line_no) + ", column '" +
                         header[c] + "': " + why);
      };
      if (role[c] == "id") {
        if (field.empty()) throw fail("empty id");
        const std::string id(field);
        auto [it, inserted] = id_index.emplace(id, ids.size());
        if (inserted) ids.push_back(id);
        rec.subject = it->second;
      } else if (role[c] == "visit") {
        const auto v = io::parse_int(field);
        if (!v || *v < 0 || *v > 100000) throw fail("invalid visit '" + std::string(field) + "'");
        rec.visit = static_cast<int>(*v);
        max_visit = std::max(max_visit, rec.visit);
      } else if (field.empty()) {
        if (role[c] == "r") throw fail("r may not be empty");
      } else {
        const auto v = io::parse_double(field);
        if (!v) throw fail("invalid number '" + std::string(field) + "'");
        if ((role[c] == "r" || role[c] == "a0" || role[c] == "a1") && !is_indicator(*v)) {
          throw fail("expected 0 or 1, found '" + std::string(field) + "'");
        }
        rec.values[c] = *v;
      }
    }
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw DataError("parse error: no data rows");

  const Index n = static_cast<Index>(ids.size());
  const Index visits = max_visit + 1;
  std::map<std::string, Eigen::MatrixXd> columns;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (role[c] == "id" || role[c] == "visit") continue;
    columns[role[c]] = Eigen::MatrixXd::Constant(n, visits, kNaN);
  }
  columns["r"].setZero();
  Eigen::MatrixXi seen = Eigen::MatrixXi::Zero(n, visits);
  for (const auto& rec : records) {
    const Index i = static_cast<Index>(rec.subject);
    if (seen(i, rec.visit)++) {
      throw DataError("parse error at line " + std::to_string(rec.line) + ": duplicate record for subject " +
                      ids[rec.subject] + ", visit " + std::to_string(rec.visit));
    }
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (role[c] == "id" || role[c] == "visit") continue;
      columns[role[c]](i, rec.visit) = rec.values[c];
    }
  }
  for (Index i = 0; i < n; ++i) {
    if (!seen(i, 0)) throw DataError("missing baseline record for subject " + ids[static_cast<std::size_t>(i)]);
  }
  return LongitudinalDataset(schema.treatment, std::move(ids), std::move(covariates), std::move(columns));
}

LongitudinalDataset load_long(const std::string& path, const Schema& schema) {
  return parse_long(io::read_file(path), schema);
}

std::string format_long(const LongitudinalDataset& data) {
  const auto cols = data.file_columns();
  std::string out = "id,visit";
  for (const auto& c : cols) out += "," + c;
  out += "\n";
  std::vector<const Eigen::MatrixXd*> mats;
  for (const auto& c : cols) mats.push_back(&data.column(c));
  for (Index i = 0; i < data.subjects(); ++i) {
    for (int j = 0; j <= data.last_visit(); ++j) {
      out += data.ids()[static_cast<std::size_t>(i)];
      out += ",";
      out += std::to_string(j);
      for (const auto* m : mats) {
        out += ",";
        const double v = (*m)(i, j);
        if (!std::isnan(v)) out += io::format_double(v);
      }
      out += "\n";
    }
  }
  return out;
}

void write_long(const std::string& path, const LongitudinalDataset& data) {
  io::write_file(path, format_long(data));
}

Eigen::MatrixXd lag(const LongitudinalDataset& data, const std::string& column, int depth) {
  if (depth < 1) throw DataError("lag depth must be at least 1");
  const auto& m = data.column(column);
  Eigen::MatrixXd out = Eigen::MatrixXd::Constant(m.rows(), m.cols(), kNaN);
  if (depth < m.cols()) out.rightCols(m.cols() - depth) = m.leftCols(m.cols() - depth);
  return out;
}

double lagged_value(const LongitudinalDataset& data, const std::string& column, int depth,
                    Index subject, int visit) {
  if (depth < 0) throw DataError("lag depth must be nonnegative");
  if (depth > visit) {
    throw DataError("lag " + std::to_string(depth) + " of '" + column + "' out of range at visit " +
                    std::to_string(visit));
  }
  return data.column(column)(subject, visit - depth);
}

}  // namespace msmcal
