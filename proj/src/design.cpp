#include "msmcal/design.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include "msmcal/error.hpp"

namespace msmcal {

namespace {

class Parser {
 public:
  explicit Parser(const std::string& text) {
    for (char c : text) {
      if (!std::isspace(static_cast<unsigned char>(c))) s_.push_back(c);
    }
  }

  std::vector<Term> parse() {
    if (s_.empty()) fail("empty formula");
    std::vector<Term> terms;
    terms.push_back(term());
    while (peek() == '+') {
      ++pos_;
      terms.push_back(term());
    }
    if (pos_ != s_.size()) fail(std::string("unexpected '") + s_[pos_] + "'");
    return terms;
  }

 private:
  Term term() {
    Term t;
    t.push_back(factor());
    while (peek() == ':') {
      ++pos_;
      t.push_back(factor());
    }
    return t;
  }

  Factor factor() {
    const char c = peek();
    if (c == '1' && !std::isdigit(static_cast<unsigned char>(peek(1)))) {
      ++pos_;
      return Factor{Factor::Kind::one, "1", 0};
    }
    if (!(std::isalpha(static_cast<unsigned char>(c)) || c == '_')) {
      fail(c == '\0' ? "unexpected end of formula" : std::string("unexpected '") + c + "'");
    }
    std::string ident;
    while (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '.') {
      ident.push_back(s_[pos_++]);
    }
    if (ident == "visit") {
      if (peek() == '@') fail("the visit factor cannot be lagged");
      return Factor{Factor::Kind::visit, "visit", 0};
    }
    int lag = 0;
    if (peek() == '@') {
      ++pos_;
      std::string digits;
      while (std::isdigit(static_cast<unsigned char>(peek()))) digits.push_back(s_[pos_++]);
      if (digits.empty() || digits.size() > 6) fail("expected lag depth after '@'");
      lag = std::stoi(digits);
    }
    return Factor{Factor::Kind::column, ident, lag};
  }

  char peek(std::size_t ahead = 0) const {
    return pos_ + ahead < s_.size() ? s_[pos_ + ahead] : '\0';
  }

  [[noreturn]] void fail(const std::string& why) const {
    throw DataError("formula parse error at position " + std::to_string(pos_) + ": " + why);
  }

  std::string s_;
  std::size_t pos_ = 0;
};

bool is_intercept(const Term& t) {
  return std::all_of(t.begin(), t.end(), [](const Factor& f) { return f.kind == Factor::Kind::one; });
}

int visit_factors(const Term& t) {
  return static_cast<int>(std::count_if(t.begin(), t.end(), [](const Factor& f) {
    return f.kind == Factor::Kind::visit;
  }));
}

std::string term_label(const Term& t) {
  std::string out;
  for (const auto& f : t) {
    if (f.kind == Factor::Kind::one || f.kind == Factor::Kind::visit) continue;
    if (!out.empty()) out += ":";
    out += f.label();
  }
  return out;
}

std::string level_label(int v) { return "visit[" + std::to_string(v) + "]"; }

}  // namespace

std::string Factor::label() const {
  switch (kind) {
    case Kind::one: return "1";
    case Kind::visit: return "visit";
    case Kind::column: return lag == 0 ? name : name + "@" + std::to_string(lag);
  }
  return "?";
}

Formula Formula::parse(const std::string& text) {
  Formula f;
  f.text_ = text;
  f.terms_ = Parser(text).parse();
  int intercepts = 0;
  for (const auto& t : f.terms_) {
    if (is_intercept(t)) ++intercepts;
    if (visit_factors(t) > 1) throw DataError("formula term uses the visit factor twice");
  }
  if (intercepts > 1) throw DataError("formula has more than one intercept term");
  for (const auto& t : f.terms_) {
    f.bare_visit_.push_back(visit_factors(t) > 0 && term_label(t).empty());
  }
  return f;
}

bool Formula::has_intercept() const {
  return std::any_of(terms_.begin(), terms_.end(), is_intercept);
}

int Formula::max_lag() const {
  int out = 0;
  for (const auto& t : terms_) {
    for (const auto& f : t) out = std::max(out, f.lag);
  }
  return out;
}

std::vector<std::string> Formula::column_names(VisitRange levels) const {
  const bool intercept = has_intercept();
  std::vector<std::string> names;
  for (const auto& t : terms_) {
    if (is_intercept(t)) {
      names.emplace_back("(Intercept)");
      continue;
    }
    const std::string base = term_label(t);
    if (visit_factors(t) == 0) {
      names.push_back(base);
      continue;
    }
    // A bare visit term loses its reference level under an intercept.
    const bool bare = base.empty();
    const int first = (bare && intercept) ? levels.first + 1 : levels.first;
    for (int v = first; v <= levels.last; ++v) {
      names.push_back(bare ? level_label(v) : level_label(v) + ":" + base);
    }
  }
  std::set<std::string> unique(names.begin(), names.end());
  if (unique.size() != names.size()) {
    throw DataError("formula '" + text_ + "' produces duplicate column names");
  }
  return names;
}

void Formula::evaluate(const LongitudinalDataset& data, Index subject, int visit, VisitRange levels,
                       Eigen::RowVectorXd& out) const {
  const bool intercept = has_intercept();
  Index width = 0;
  for (std::size_t ti = 0; ti < terms_.size(); ++ti) {
    if (visit_factors(terms_[ti]) == 0) {
      ++width;
    } else {
      width += std::max(0, levels.count() - ((bare_visit_[ti] && intercept) ? 1 : 0));
    }
  }
  if (out.size() != width) out.resize(width);
  Index col = 0;
  for (std::size_t ti = 0; ti < terms_.size(); ++ti) {
    const auto& t = terms_[ti];
    double scalar = 1.0;
    for (const auto& f : t) {
      if (f.kind != Factor::Kind::column) continue;
      if (f.lag > visit) {
        throw DataError("lag out of range: '" + f.label() + "' at visit " + std::to_string(visit));
      }
      const double v = data.column(f.name)(subject, visit - f.lag);
      if (std::isnan(v)) {
        throw DataError("missing value for '" + f.label() + "' at subject " +
                        data.ids()[static_cast<std::size_t>(subject)] + ", visit " +
                        std::to_string(visit));
      }
      scalar *= v;
    }
    if (visit_factors(t) == 0) {
      out(col++) = scalar;
      continue;
    }
    const bool bare = bare_visit_[ti] != 0;
    const int first = (bare && intercept) ? levels.first + 1 : levels.first;
    for (int v = first; v <= levels.last; ++v) out(col++) = (v == visit) ? scalar : 0.0;
  }
}

std::vector<SubjectVisit> eligible_rows(const LongitudinalDataset& data, const DesignSpec& spec,
                                        VisitRange range) {
  if (range.first < 0 || range.last > data.last_visit() || range.first > range.last) {
    throw DataError("visit range [" + std::to_string(range.first) + ", " + std::to_string(range.last) +
                    "] is outside the data (last visit " + std::to_string(data.last_visit()) + ")");
  }
  const bool censoring = spec.response == "r";
  if (censoring && range.first < 1) throw DataError("censoring designs start at visit 1 or later");
  std::vector<SubjectVisit> rows;
  for (Index i = 0; i < data.subjects(); ++i) {
    for (int j = range.first; j <= range.last; ++j) {
      const bool at_risk = censoring ? data.observed(i, j - 1) : data.observed(i, j);
      if (!at_risk) continue;
      if (spec.subset && data.value(*spec.subset, i, j) != 1.0) continue;
      rows.push_back({i, j});
    }
  }
  return rows;
}

DesignMatrix design_at(const LongitudinalDataset& data, const Formula& formula,
                       std::span<const SubjectVisit> rows, VisitRange levels) {
  DesignMatrix d;
  d.names = formula.column_names(levels);
  d.levels = levels;
  d.rows.assign(rows.begin(), rows.end());
  for (const auto& t : formula.terms()) {
    for (const auto& f : t) {
      if (f.kind == Factor::Kind::column && !data.has_column(f.name)) {
        throw DataError("unknown column '" + f.name + "' in formula '" + formula.text() + "'");
      }
    }
  }
  d.X.resize(static_cast<Index>(rows.size()), static_cast<Index>(d.names.size()));
  Eigen::RowVectorXd row(d.X.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    formula.evaluate(data, rows[k].subject, rows[k].visit, levels, row);
    d.X.row(static_cast<Index>(k)) = row;
  }
  return d;
}

DesignMatrix build_design(const LongitudinalDataset& data, const DesignSpec& spec, VisitRange range) {
  const Formula formula = Formula::parse(spec.formula);
  if (formula.max_lag() > range.first) {
    throw DataError("lag out of range: formula '" + spec.formula + "' needs lag " +
                    std::to_string(formula.max_lag()) + " but the range starts at visit " +
                    std::to_string(range.first));
  }
  const auto rows = eligible_rows(data, spec, range);
  if (rows.empty()) throw DataError("empty design: no eligible rows for '" + spec.formula + "'");
  DesignMatrix d = design_at(data, formula, rows, range);
  if (!spec.response.empty()) {
    const auto& y = data.column(spec.response);
    d.response.resize(d.size());
    for (Index k = 0; k < d.size(); ++k) {
      d.response(k) = y(d.rows[static_cast<std::size_t>(k)].subject, d.rows[static_cast<std::size_t>(k)].visit);
    }
  }
  return d;
}

}  // namespace msmcal
