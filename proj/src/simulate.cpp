#include "msmcal/simulate.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <limits>
#include <mutex>
#include <thread>

#include "msmcal/error.hpp"
#include "msmcal/io.hpp"
#include "msmcal/msm.hpp"
#include "msmcal/rng.hpp"

namespace msmcal {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double expit(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct History {
  double a0, a1, x1, x2, x3, x4;
};

History history_at(const LongitudinalDataset& data, Index i, int visit) {
  return {data.value("a0", i, visit), data.value("a1", i, visit), data.value("x1", i, visit),
          data.value("x2", i, visit), data.value("x3", i, visit), data.value("x4", i, visit)};
}

double treatment_logit(const History& h) {
  return h.a0 + h.a1 + 0.5 * h.x1 + 0.5 * h.x2 - 0.2 * h.x3 - 0.2 * h.x4;
}

double observation_logit(const History& h) {
  return 1.0 + h.a0 + h.a1 + 0.5 * h.x1 + 0.5 * h.x2 + 0.2 * h.x3 + 0.2 * h.x4;
}

std::string covariate(const ScenarioConfig& c, int k) {
  return "x" + std::to_string(k) + (c.covariates == CovariateSet::transformed ? "t" : "");
}

}  // namespace

const char* to_string(CensoringScenario s) {
  return s == CensoringScenario::none ? "none" : "covariate_dependent";
}

const char* to_string(CovariateSet c) { return c == CovariateSet::correct ? "correct" : "transformed"; }

const char* to_string(Estimator e) {
  switch (e) {
    case Estimator::mle: return "mle";
    case Estimator::cmle: return "cmle";
    case Estimator::truth: return "truth";
  }
  return "?";
}

CensoringScenario parse_censoring_scenario(const std::string& text) {
  if (text == "1" || text == "none") return CensoringScenario::none;
  if (text == "2" || text == "covariate_dependent") return CensoringScenario::covariate_dependent;
  throw DataError("unknown scenario '" + text + "' (expected 1 or 2)");
}

CovariateSet parse_covariate_set(const std::string& text) {
  if (text == "correct") return CovariateSet::correct;
  if (text == "transformed") return CovariateSet::transformed;
  throw DataError("unknown covariate set '" + text + "' (expected correct or transformed)");
}

Estimator parse_estimator(const std::string& text) {
  for (auto e : {Estimator::mle, Estimator::cmle, Estimator::truth}) {
    if (text == to_string(e)) return e;
  }
  throw DataError("unknown estimator '" + text + "'");
}

void ScenarioConfig::validate() const {
  if (n < 2) throw DataError("scenario needs n >= 2");
  if (T < 1) throw DataError("scenario needs T >= 1");
  if (replicates < 1) throw DataError("scenario needs at least one replicate");
  if (!(noise_sd >= 0)) throw DataError("noise standard deviation must be nonnegative");
}

nlohmann::json to_json(const ScenarioConfig& c) {
  return {{"n", c.n},
          {"T", c.T},
          {"censoring", to_string(c.censoring)},
          {"covariates", to_string(c.covariates)},
          {"seed", c.seed},
          {"replicates", c.replicates},
          {"noise_sd", c.noise_sd},
          {"jobs", c.jobs}};
}

LongitudinalDataset generate_cohort(const ScenarioConfig& config, int replicate) {
  config.validate();
  const Index n = config.n;
  const int T = config.T;
  Rng rng(substream_seed(config.seed, static_cast<std::uint64_t>(replicate)));
  std::map<std::string, Eigen::MatrixXd> cols;
  for (const char* name : {"r", "y", "a0", "a1", "x1", "x2", "x3", "x4"}) {
    cols[name] = Eigen::MatrixXd::Constant(n, T + 1, kNaN);
  }
  auto& r = cols["r"];
  auto& y = cols["y"];
  auto& a0 = cols["a0"];
  auto& a1 = cols["a1"];
  auto& x1 = cols["x1"];
  auto& x2 = cols["x2"];
  auto& x3 = cols["x3"];
  auto& x4 = cols["x4"];
  std::vector<std::string> ids;
  for (Index i = 0; i < n; ++i) ids.push_back(std::to_string(i + 1));

  for (Index i = 0; i < n; ++i) {
    double cumulative = 0.0;  // sum over t <= j of (a0_t + a1_t)
    for (int j = 0; j <= T; ++j) {
      double p = 0.5;
      if (j > 0) {
        const History h{a0(i, j - 1), a1(i, j - 1), x1(i, j - 1), x2(i, j - 1), x3(i, j - 1), x4(i, j - 1)};
        if (config.censoring == CensoringScenario::covariate_dependent && !rng.bernoulli(expit(observation_logit(h)))) {
          r.row(i).tail(T + 1 - j).setZero();
          break;
        }
        p = expit(treatment_logit(h));
      }
      r(i, j) = 1.0;
      const double t0 = rng.bernoulli(p) ? 1.0 : 0.0;
      const double t1 = (t0 == 1.0 && rng.bernoulli(p)) ? 1.0 : 0.0;
      a0(i, j) = t0;
      a1(i, j) = t1;
      cumulative += t0 + t1;
      const double u = 1.0 - 0.3 * (t0 + t1);
      x1(i, j) = u * rng.normal();
      x2(i, j) = u * rng.normal();
      x3(i, j) = rng.normal() + 0.5 * cumulative;
      x4(i, j) = rng.normal() + 0.5 * cumulative;
      double xsum = x1(i, j) + x2(i, j) + x3(i, j) + x4(i, j);
      if (j > 0) xsum += x1(i, j - 1) + x2(i, j - 1) + x3(i, j - 1) + x4(i, j - 1);
      y(i, j) = 200.0 + 5.0 * (t0 + t1 + xsum) + config.noise_sd * rng.normal();
    }
  }
  return LongitudinalDataset(TreatmentKind::ordinal3, ids, {"x1", "x2", "x3", "x4"}, std::move(cols));
}

LongitudinalDataset misspecify_transform(const LongitudinalDataset& data, Index* zero_count) {
  for (const char* c : {"x1", "x2", "x3", "x4"}) {
    if (!data.has_column(c)) throw DataError(std::string("transform needs column '") + c + "'");
  }
  const auto& x1 = data.column("x1");
  const auto& x2 = data.column("x2");
  const auto& x3 = data.column("x3");
  const auto& x4 = data.column("x4");
  Index zeros = 0;
  Eigen::MatrixXd t3 = x3;
  for (Index i = 0; i < t3.rows(); ++i) {
    for (Index j = 0; j < t3.cols(); ++j) {
      const double v = x3(i, j);
      if (std::isnan(v)) continue;
      if (v == 0.0) {
        ++zeros;
        t3(i, j) = std::log(1e-300) + 4.0;
      } else {
        t3(i, j) = std::log(std::abs(v)) + 4.0;
      }
    }
  }
  if (zero_count) *zero_count += zeros;
  return data.with_covariate("x1t", x1.array().cube() / 9.0)
      .with_covariate("x2t", x1.cwiseProduct(x2))
      .with_covariate("x3t", t3)
      .with_covariate("x4t", x4.unaryExpr([](double v) { return std::isnan(v) ? v : expit(v); }));
}

PipelineConfig scenario_pipeline(const ScenarioConfig& config) {
  PipelineConfig c;
  c.range = {1, config.T};
  const std::string history = "1 + a0@1 + a1@1";
  std::string covs;
  for (int k = 1; k <= 4; ++k) covs += " + " + covariate(config, k) + "@1";
  c.numerator = {history, history};
  c.denominator = {history + covs, history + covs};
  if (config.censoring == CensoringScenario::covariate_dependent) {
    c.censoring = "visit + a0@1 + a1@1" + covs;
  }
  c.normalization = true;
  c.per_visit_normalization = true;
  c.msm.formula = "1 + cum_a01 + cum_a1";
  c.msm.range = c.range;
  return c;
}

Eigen::VectorXd true_treatment_probability(const LongitudinalDataset& data, std::span<const SubjectVisit> cells) {
  Eigen::VectorXd out(static_cast<Index>(cells.size()));
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto& c = cells[k];
    if (c.visit < 1) throw DataError("generating probabilities are defined from visit 1");
    const double p = expit(treatment_logit(history_at(data, c.subject, c.visit - 1)));
    const double t0 = data.value("a0", c.subject, c.visit);
    const double t1 = data.value("a1", c.subject, c.visit);
    double lik = t0 == 1.0 ? p : 1.0 - p;
    if (t0 == 1.0) lik *= t1 == 1.0 ? p : 1.0 - p;
    out(static_cast<Index>(k)) = lik;
  }
  return out;
}

Eigen::VectorXd true_observation_probability(const LongitudinalDataset& data, CensoringScenario scenario,
                                             std::span<const SubjectVisit> cells) {
  Eigen::VectorXd out = Eigen::VectorXd::Ones(static_cast<Index>(cells.size()));
  if (scenario == CensoringScenario::none) return out;
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto& c = cells[k];
    out(static_cast<Index>(k)) = expit(observation_logit(history_at(data, c.subject, c.visit - 1)));
  }
  return out;
}

WeightMatrix true_weights(const LongitudinalDataset& data, const ScenarioConfig& config,
                          const FittedTreatmentModel& numerator) {
  const VisitRange range{1, config.T};
  std::vector<SubjectVisit> cells;
  for (Index i = 0; i < data.subjects(); ++i) {
    for (int j = range.first; j <= range.last && data.observed(i, j); ++j) cells.push_back({i, j});
  }
  const auto num = predict_treatment(numerator, data, cells);
  const auto den = true_treatment_probability(data, cells);
  const auto obs = true_observation_probability(data, config.censoring, cells);
  Eigen::MatrixXd factors = Eigen::MatrixXd::Constant(data.subjects(), data.last_visit() + 1, kNaN);
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto kk = static_cast<Index>(k);
    factors(cells[k].subject, cells[k].visit) = num.likelihood(kk) / (den(kk) * obs(kk));
  }
  auto w = weights_from_factors(data, range, WeightKind::joint, factors);
  w.provenance.models = {"generating probabilities"};
  return w;
}

StudyResult run_study(const ScenarioConfig& config, const std::vector<Estimator>& estimators) {
  config.validate();
  if (estimators.empty()) throw DataError("no estimators requested");
  const auto R = static_cast<std::size_t>(config.replicates);
  const auto E = estimators.size();
  StudyResult res;
  res.config = config;
  res.estimators = estimators;
  res.coefficients = {"gamma1", "gamma2"};
  res.errors.assign(E, Eigen::MatrixXd::Constant(static_cast<Index>(R), 2, kNaN));
  res.failures.assign(E, 0);
  res.lambda_inf = Eigen::VectorXd::Constant(static_cast<Index>(R), kNaN);
  std::vector<std::vector<std::string>> messages(R);
  std::vector<Index> zeros(R, 0);
  const PipelineConfig pipeline = scenario_pipeline(config);

  auto run_one = [&](std::size_t rep) {
    auto data = generate_cohort(config, static_cast<int>(rep));
    if (config.covariates == CovariateSet::transformed) data = misspecify_transform(data, &zeros[rep]);
    std::optional<WeightingResult> fitted;
    std::string fit_error;
    try {
      fitted = fit_initial_weights(data, pipeline);
    } catch (const Error& e) {
      fit_error = e.what();
    }
    for (std::size_t k = 0; k < E; ++k) {
      try {
        if (!fitted) throw NumericalError(fit_error);
        WeightMatrix w;
        switch (estimators[k]) {
          case Estimator::mle: w = fitted->initial; break;
          case Estimator::cmle: {
            const auto cal = calibrate_weights(data, pipeline, *fitted);
            res.lambda_inf(static_cast<Index>(rep)) =
                cal.solution.lambda.size() ? cal.solution.lambda.cwiseAbs().maxCoeff() : 0.0;
            w = cal.calibrated;
            break;
          }
          case Estimator::truth: w = true_weights(data, config, fitted->numerator); break;
        }
        const auto est = fit_msm(data, pipeline.msm, w);
        res.errors[k](static_cast<Index>(rep), 0) = est.coefficient("cum_a01") - kTrueGamma1;
        res.errors[k](static_cast<Index>(rep), 1) = est.coefficient("cum_a1") - kTrueGamma2;
      } catch (const Error& e) {
        messages[rep].push_back(std::string(to_string(estimators[k])) + " replicate " + std::to_string(rep) + ": " +
                                e.what());
      }
    }
  };

  std::atomic<std::size_t> next{0};
  std::exception_ptr fatal;
  std::mutex fatal_mutex;
  auto worker = [&] {
    for (std::size_t rep = next++; rep < R; rep = next++) {
      try {
        run_one(rep);
      } catch (...) {
        std::lock_guard<std::mutex> lock(fatal_mutex);
        if (!fatal) fatal = std::current_exception();
      }
    }
  };
  const int jobs = std::max(1, std::min(config.jobs, config.replicates));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (fatal) std::rethrow_exception(fatal);

  for (std::size_t rep = 0; rep < R; ++rep) {
    res.transform_zero_count += zeros[rep];
    for (auto& m : messages[rep]) res.failure_messages.push_back(std::move(m));
  }
  for (std::size_t k = 0; k < E; ++k) {
    for (int c = 0; c < 2; ++c) {
      std::vector<double> ok;
      for (Index rep = 0; rep < static_cast<Index>(R); ++rep) {
        const double v = res.errors[k](rep, c);
        if (!std::isnan(v)) ok.push_back(v);
      }
      StudySummary s{estimators[k], res.coefficients[static_cast<std::size_t>(c)], kNaN, kNaN, kNaN,
                     static_cast<Index>(ok.size())};
      if (!ok.empty()) {
        double mean = 0.0;
        for (double v : ok) mean += v;
        mean /= static_cast<double>(ok.size());
        double ss = 0.0;
        for (double v : ok) ss += (v - mean) * (v - mean);
        s.bias = mean;
        s.sd = ok.size() > 1 ? std::sqrt(ss / (static_cast<double>(ok.size()) - 1.0)) : kNaN;
        s.rmse = std::sqrt(s.bias * s.bias + s.sd * s.sd);
      }
      res.summary.push_back(s);
    }
    res.failures[k] = static_cast<Index>(R) - res.summary.back().successes;
  }
  return res;
}

std::string format_study_csv(const StudyResult& r) {
  std::string out = "estimator,coefficient,bias,sd,rmse,replicates,failures\n";
  for (std::size_t k = 0; k < r.summary.size(); ++k) {
    const auto& s = r.summary[k];
    out += std::string(to_string(s.estimator)) + "," + s.coefficient + "," + io::format_double(s.bias) + "," +
           io::format_double(s.sd) + "," + io::format_double(s.rmse) + "," + std::to_string(s.successes) + "," +
           std::to_string(static_cast<Index>(r.config.replicates) - s.successes) + "\n";
  }
  return out;
}

std::string format_study_table(const StudyResult& r) {
  char line[256];
  std::string out;
  std::snprintf(line, sizeof line, "Scenario %d, %s covariates, n = %lld, T = %d, %d replicates, seed %llu\n",
                r.config.censoring == CensoringScenario::none ? 1 : 2, to_string(r.config.covariates),
                static_cast<long long>(r.config.n), r.config.T, r.config.replicates,
                static_cast<unsigned long long>(r.config.seed));
  out += line;
  std::snprintf(line, sizeof line, "outcome noise: standard deviation %g\n", r.config.noise_sd);
  out += line;
  out += "           Bias             SD               RMSE\n";
  out += "           (g1, g2)         (g1, g2)         (g1, g2)\n";
  for (std::size_t k = 0; k < r.estimators.size(); ++k) {
    const auto& s1 = r.summary[2 * k];
    const auto& s2 = r.summary[2 * k + 1];
    std::string name = to_string(r.estimators[k]);
    std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::toupper(c); });
    std::snprintf(line, sizeof line, "%-8s %7.2f %7.2f  %7.2f %7.2f  %7.2f %7.2f\n", name.c_str(), s1.bias, s2.bias,
                  s1.sd, s2.sd, s1.rmse, s2.rmse);
    out += line;
  }
  for (std::size_t k = 0; k < r.estimators.size(); ++k) {
    if (r.failures[k] > 0) {
      std::snprintf(line, sizeof line, "%s: %lld failed replicates\n", to_string(r.estimators[k]),
                    static_cast<long long>(r.failures[k]));
      out += line;
    }
  }
  return out;
}

nlohmann::json to_json(const StudyResult& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : r.summary) {
    rows.push_back({{"estimator", to_string(s.estimator)},
                    {"coefficient", s.coefficient},
                    {"bias", s.bias},
                    {"sd", s.sd},
                    {"rmse", s.rmse},
                    {"successes", s.successes}});
  }
  return {{"config", to_json(r.config)},
          {"summary", rows},
          {"noise_sd_is_standard_deviation", true},
          {"transform_zero_count", r.transform_zero_count},
          {"failures", r.failure_messages}};
}

}  // namespace msmcal
