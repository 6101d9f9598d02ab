#include "msmcal/msm.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <set>
#include <thread>

#include "msmcal/error.hpp"
#include "msmcal/glm.hpp"
#include "msmcal/io.hpp"
#include "msmcal/rng.hpp"

namespace msmcal {

namespace {

const std::set<std::string>& treatment_columns() {
  static const std::set<std::string> names = {"a0", "a1", "a", "a01", "cum_a0", "cum_a1", "cum_a01", "cum_a"};
  return names;
}

bool involves_treatment(const std::string& column_name) {
  std::size_t start = 0;
  while (start <= column_name.size()) {
    const auto end = std::min(column_name.find(':', start), column_name.size());
    std::string factor = column_name.substr(start, end - start);
    factor = factor.substr(0, factor.find('@'));
    if (treatment_columns().count(factor)) return true;
    start = end + 1;
  }
  return false;
}

}  // namespace

double MsmEstimate::coefficient(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw DataError("no MSM coefficient named '" + name + "'");
  return coefficients(it - names.begin());
}

Eigen::VectorXd weighted_least_squares(const DesignMatrix& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w) {
  if (y.size() != X.size() || w.size() != X.size()) throw DataError("MSM design, outcome and weights disagree in length");
  if ((w.array() < 0).any()) throw DataError("MSM weights must be nonnegative");
  if (!(w.sum() > 0)) throw NumericalError("zero total weight in the MSM fit");
  const Eigen::VectorXd sw = w.cwiseSqrt();
  const Eigen::MatrixXd A = sw.asDiagonal() * X.X;
  require_full_rank(A, X.names, "MSM design");
  return A.householderQr().solve(sw.cwiseProduct(y));
}

MsmEstimate fit_msm(const LongitudinalDataset& data, const MsmSpec& spec, const WeightMatrix& weights) {
  require_same_subjects(weights, data);
  const auto X = build_design(data, {spec.formula, spec.outcome, std::nullopt}, spec.range);
  MsmEstimate e;
  e.names = X.names;
  if (spec.treatment_terms.empty()) {
    for (const auto& n : X.names) {
      if (involves_treatment(n)) e.treatment_terms.push_back(n);
    }
    if (e.treatment_terms.empty()) throw DataError("MSM formula '" + spec.formula + "' has no treatment terms");
  } else {
    for (const auto& t : spec.treatment_terms) {
      if (std::find(X.names.begin(), X.names.end(), t) == X.names.end()) {
        throw DataError("treatment term '" + t + "' is not a column of the MSM design");
      }
      if (!involves_treatment(t)) {
        throw DataError("treatment term '" + t + "' does not vanish at zero treatment history");
      }
    }
    e.treatment_terms = spec.treatment_terms;
  }
  const Eigen::VectorXd w = weights.flatten(X.rows);
  e.coefficients = weighted_least_squares(X, X.response, w);
  e.rows = X.size();
  e.total_weight = w.sum();
  return e;
}

std::vector<Index> bootstrap_sample(Index n, std::uint64_t seed, std::uint64_t b) {
  Rng rng(substream_seed(seed, b));
  std::vector<Index> idx(static_cast<std::size_t>(n));
  for (auto& i : idx) i = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
  return idx;
}

BootstrapResult bootstrap(const LongitudinalDataset& data, const MsmPipeline& pipeline,
                          const BootstrapOptions& options) {
  if (options.replicates < 2) throw DataError("bootstrap needs at least 2 replicates");
  const auto B = static_cast<std::size_t>(options.replicates);
  std::vector<std::optional<MsmEstimate>> results(B);
  std::vector<std::string> messages(B);
  std::atomic<std::size_t> next{0};
  std::exception_ptr fatal;
  std::mutex fatal_mutex;

  auto worker = [&] {
    for (std::size_t b = next++; b < B; b = next++) {
      try {
        const auto idx = bootstrap_sample(data.subjects(), options.seed, b);
        results[b] = pipeline(data.select_subjects(idx));
      } catch (const Error& e) {
        messages[b] = e.what();
      } catch (...) {
        std::lock_guard<std::mutex> lock(fatal_mutex);
        if (!fatal) fatal = std::current_exception();
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(options.jobs, options.replicates));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (fatal) std::rethrow_exception(fatal);

  BootstrapResult out;
  for (std::size_t b = 0; b < B; ++b) {
    if (!results[b]) {
      ++out.failed;
      out.failures.push_back("replicate " + std::to_string(b) + ": " + messages[b]);
      continue;
    }
    if (out.names.empty()) {
      out.names = results[b]->names;
    } else if (out.names != results[b]->names) {
      ++out.failed;
      out.failures.push_back("replicate " + std::to_string(b) + ": coefficient names changed");
      results[b].reset();
    }
  }
  out.used = static_cast<Index>(B) - out.failed;
  const double rate = static_cast<double>(out.failed) / static_cast<double>(B);
  if (rate > options.max_failure_rate || out.used < 2) {
    std::string msg = "bootstrap failure rate " + io::format_double(rate) + " (" + std::to_string(out.failed) +
                      " of " + std::to_string(B) + " replicates)";
    if (!out.failures.empty()) msg += "; first failure: " + out.failures.front();
    throw NumericalError(msg);
  }
  out.estimates.resize(out.used, static_cast<Index>(out.names.size()));
  Index row = 0;
  for (const auto& r : results) {
    if (r) out.estimates.row(row++) = r->coefficients.transpose();
  }
  const Eigen::RowVectorXd mean = out.estimates.colwise().mean();
  out.se = ((out.estimates.rowwise() - mean).array().square().colwise().sum() / (out.used - 1.0)).sqrt().transpose();
  return out;
}

std::string format_estimate_csv(const MsmEstimate& e) {
  std::string out = "coefficient,estimate,se\n";
  for (std::size_t k = 0; k < e.names.size(); ++k) {
    const auto kk = static_cast<Index>(k);
    out += e.names[k] + "," + io::format_double(e.coefficients(kk)) + "," +
           (e.bootstrap_se ? io::format_double((*e.bootstrap_se)(kk)) : std::string()) + "\n";
  }
  return out;
}

nlohmann::json to_json(const MsmEstimate& e) {
  nlohmann::json coef = nlohmann::json::object();
  nlohmann::json se = nlohmann::json::object();
  for (std::size_t k = 0; k < e.names.size(); ++k) {
    coef[e.names[k]] = e.coefficients(static_cast<Index>(k));
    if (e.bootstrap_se) se[e.names[k]] = (*e.bootstrap_se)(static_cast<Index>(k));
  }
  nlohmann::json j = {{"coefficients", coef},
                      {"treatment_terms", e.treatment_terms},
                      {"rows", e.rows},
                      {"total_weight", e.total_weight}};
  if (e.bootstrap_se) {
    j["bootstrap_se"] = se;
    j["replicates_used"] = e.replicates_used;
    j["failed_replicates"] = e.failed_replicates;
    j["failures"] = e.failures;
  }
  return j;
}

}  // namespace msmcal
