#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "msmcal/calibrate.hpp"
#include "msmcal/dataset.hpp"
#include "msmcal/error.hpp"
#include "msmcal/io.hpp"
#include "msmcal/msm.hpp"
#include "msmcal/pipeline.hpp"
#include "msmcal/restrictions.hpp"
#include "msmcal/simulate.hpp"
#include "msmcal/version.hpp"
#include "msmcal/weights.hpp"

namespace {

using msmcal::Index;
using nlohmann::json;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class KeyType { text, integer, real, boolean };

struct PipelineKey {
  const char* name;
  KeyType type;
  const char* help;
};

const std::vector<PipelineKey> kPipelineKeys = {
    {"first_visit", KeyType::integer, "First analysis visit (default 1)"},
    {"last_visit", KeyType::integer, "Last analysis visit (default: last visit in the data)"},
    {"numerator0", KeyType::text, "Numerator model for a0, treatment history only"},
    {"numerator1", KeyType::text, "Numerator model for a1 among a0 = 1"},
    {"denominator0", KeyType::text, "Denominator model for a0"},
    {"denominator1", KeyType::text, "Denominator model for a1 among a0 = 1"},
    {"probe0", KeyType::text, "Balance design for a0 restrictions (default: denominator0)"},
    {"probe1", KeyType::text, "Balance design for a1 restrictions (default: denominator1)"},
    {"treatment_restrictions", KeyType::boolean, "Impose treatment balance restrictions (default true)"},
    {"censoring", KeyType::text, "Model for remaining in follow-up; enables censoring weights and restrictions"},
    {"censoring_stabilizer", KeyType::text, "History-only model for stabilized censoring weights"},
    {"censoring_probe", KeyType::text, "Balance design for censoring restrictions (default: censoring model)"},
    {"normalization", KeyType::boolean, "Impose weight averages of one (default true)"},
    {"per_visit_normalization", KeyType::boolean, "One normalization restriction per visit (default true)"},
    {"drop_normalization_with_censoring", KeyType::boolean,
     "Drop normalization when censoring restrictions are present (default true)"},
    {"target", KeyType::text, "Restriction target: repeated or eventual"},
    {"scaling", KeyType::text, "Initial weight scaling: none, per_visit_to_n or total_to_nT"},
    {"max_clamp_fraction", KeyType::real, "Clamped-probability fraction that triggers a positivity warning"},
    {"calibration_tolerance", KeyType::real, "Relative tolerance on the restriction residual (default 1e-8)"},
    {"calibration_max_iterations", KeyType::integer, "Newton iteration limit"},
    {"msm", KeyType::text, "Marginal structural model formula (default 1 + cum_a01 + cum_a1)"},
    {"msm_outcome", KeyType::text, "Outcome column (default y)"},
    {"msm_treatment_terms", KeyType::text, "Comma-separated treatment columns of the MSM"},
};

struct Options {
  std::string config;
  std::string manifest;
  std::string data;
  std::string treatment_kind = "ordinal3";
  std::string weights;
  std::string out;
  std::string json_out;
  std::string report;
  std::string solution;
  std::map<std::string, std::string> pipeline;

  std::string scenario = "1";
  std::string covariates = "correct";
  std::string estimators = "mle,cmle";
  std::string table;
  std::string cohort_out;
  int replicate = 0;
  Index n = 500;
  int T = 10;
  int study_replicates = 100;
  double noise_sd = 20.0;

  std::string method = "cmle";
  int boot_replicates = 200;
  double max_failure_rate = 0.2;

  std::uint64_t seed = 1;
  int jobs = 1;
};

struct Run {
  std::string command;
  CLI::App* app = nullptr;
  std::vector<std::string> outputs;
  json extra = json::object();
};

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "Key-value (TOML) or JSON file with option values; flags take precedence");
  sub->add_option("--manifest", o.manifest, "Manifest path (default: <out>.manifest.json)");
}

void add_data(CLI::App* sub, Options& o) {
  sub->add_option("--data", o.data, "Long-format cohort CSV");
  sub->add_option("--treatment-kind", o.treatment_kind, "ordinal3, binary or continuous")->capture_default_str();
}

void add_pipeline(CLI::App* sub, Options& o) {
  for (const auto& key : kPipelineKeys) {
    static const char* names[] = {"TEXT", "INT", "FLOAT", "BOOL"};
    sub->add_option(std::string("--") + key.name, o.pipeline[key.name], key.help)
        ->type_name(names[static_cast<int>(key.type)])
        ->group("Pipeline");
  }
}

bool is_set(const CLI::App* sub, const std::string& name) {
  const auto* opt = sub->get_option_no_throw("--" + name);
  return opt && opt->count() > 0;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

json typed_value(const PipelineKey& key, const std::string& raw) {
  switch (key.type) {
    case KeyType::text:
      return raw;
    case KeyType::integer:
      if (auto v = msmcal::io::parse_int(raw)) return *v;
      break;
    case KeyType::real:
      if (auto v = msmcal::io::parse_double(raw)) return *v;
      break;
    case KeyType::boolean: {
      const std::string s = lower(raw);
      if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
      if (s == "false" || s == "0" || s == "no" || s == "off") return false;
      break;
    }
  }
  throw UsageError(std::string("invalid value '") + raw + "' for --" + key.name);
}

json pipeline_json(const Run& run, const Options& o) {
  json j = json::object();
  for (const auto& key : kPipelineKeys) {
    if (is_set(run.app, key.name)) j[key.name] = typed_value(key, o.pipeline.at(key.name));
  }
  return j;
}

// Config values fill every option the command line left unset.
void apply_config(const Run& run, const std::string& path) {
  const std::string text = msmcal::io::read_file(path);
  std::vector<std::pair<std::string, std::vector<std::string>>> items;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      throw UsageError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    if (j.contains("options")) {
      if (j.contains("command") && j.at("command") != run.command) {
        throw UsageError("manifest '" + path + "' belongs to the '" + j.at("command").get<std::string>() +
                         "' command");
      }
      j = j.at("options");
    }
    if (!j.is_object()) throw UsageError("config file '" + path + "' must hold a JSON object");
    for (const auto& [k, v] : j.items()) {
      std::vector<std::string> values;
      for (const auto& e : v.is_array() ? v : json::array({v})) {
        values.push_back(e.is_string() ? e.get<std::string>() : e.dump());
      }
      items.emplace_back(k, values);
    }
  } else {
    std::istringstream in(text);
    try {
      for (const auto& item : CLI::ConfigTOML().from_config(in)) {
        std::string name = item.name;
        for (auto it = item.parents.rbegin(); it != item.parents.rend(); ++it) name = *it + "." + name;
        items.emplace_back(name, item.inputs);
      }
    } catch (const CLI::Error& e) {
      throw UsageError("cannot read config file '" + path + "': " + e.what());
    }
  }
  for (const auto& [name, values] : items) {
    if (name == "config" || name == "manifest") continue;
    auto* opt = run.app->get_option_no_throw("--" + name);
    if (!opt) throw UsageError("unknown configuration key '" + name + "' for " + run.command);
    if (opt->count() > 0) continue;
    for (const auto& v : values) opt->add_result(v);
    try {
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw UsageError("configuration key '" + name + "': " + e.what());
    }
  }
}

json options_json(const Run& run) {
  json j = json::object();
  for (const auto* opt : run.app->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config" || name == "manifest" || opt->count() == 0) continue;
    const auto& r = opt->results();
    j[name] = r.size() == 1 ? json(r.front()) : json(r);
  }
  return j;
}

void emit(Run& run, const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    std::cout.flush();
    return;
  }
  msmcal::io::write_file(path, text);
  run.outputs.push_back(path);
}

msmcal::LongitudinalDataset load_data(const Options& o) {
  require(o.data, "--data");
  msmcal::Schema schema;
  schema.treatment = msmcal::parse_treatment_kind(o.treatment_kind);
  return msmcal::load_long(o.data, schema);
}

// Pipeline config whose visit range follows the weights unless given explicitly.
msmcal::PipelineConfig pipeline_for(const Run& run, const Options& o, const msmcal::WeightMatrix* w) {
  auto cfg = msmcal::pipeline_config_from_json(pipeline_json(run, o));
  if (w) {
    if (!is_set(run.app, "first_visit")) cfg.range.first = w->range.first;
    if (!is_set(run.app, "last_visit")) cfg.range.last = w->range.last;
  }
  return cfg;
}

void resolve_range(msmcal::PipelineConfig& cfg, const msmcal::LongitudinalDataset& data) {
  if (cfg.range.last <= 0) cfg.range.last = data.last_visit();
  cfg.msm.range = cfg.range;
}

msmcal::WeightMatrix load_weights(const Options& o, const msmcal::LongitudinalDataset& data) {
  require(o.weights, "--weights");
  auto w = msmcal::read_weights(o.weights);
  msmcal::require_same_subjects(w, data);
  return w;
}

void check_range(const msmcal::PipelineConfig& cfg, const msmcal::WeightMatrix& w) {
  if (cfg.range != w.range) {
    throw msmcal::DataError("weights cover visits " + std::to_string(w.range.first) + ".." +
                            std::to_string(w.range.last) + " but the analysis range is " +
                            std::to_string(cfg.range.first) + ".." + std::to_string(cfg.range.last));
  }
}

void report_warnings(const msmcal::WeightMatrix& w) {
  for (const auto& warning : w.provenance.warnings) std::cerr << "warning: " << warning << "\n";
}

std::string with_suffix(const std::string& path, const std::string& suffix) {
  return path.empty() || path == "-" ? std::string() : path + suffix;
}

void run_simulate(Run& run, const Options& o) {
  msmcal::ScenarioConfig c;
  c.n = o.n;
  c.T = o.T;
  c.censoring = msmcal::parse_censoring_scenario(o.scenario);
  c.covariates = msmcal::parse_covariate_set(o.covariates);
  c.seed = o.seed;
  c.replicates = o.study_replicates;
  c.noise_sd = o.noise_sd;
  c.jobs = o.jobs;
  c.validate();
  run.extra["scenario"] = msmcal::to_json(c);
  run.extra["outcome_noise"] = "noise_sd is the standard deviation of the outcome error";

  if (!o.cohort_out.empty()) {
    auto data = msmcal::generate_cohort(c, o.replicate);
    if (c.covariates == msmcal::CovariateSet::transformed) data = msmcal::misspecify_transform(data);
    emit(run, o.cohort_out, msmcal::format_long(data));
    return;
  }
  std::vector<msmcal::Estimator> estimators;
  std::stringstream list(o.estimators);
  for (std::string item; std::getline(list, item, ',');) {
    const auto t = msmcal::io::trim(item);
    if (!t.empty()) estimators.push_back(msmcal::parse_estimator(std::string(t)));
  }
  if (estimators.empty()) throw UsageError("--estimators lists no estimator");
  const auto result = msmcal::run_study(c, estimators);
  for (const auto& m : result.failure_messages) std::cerr << "replicate failure: " << m << "\n";
  emit(run, o.out, msmcal::format_study_csv(result));
  if (!o.table.empty()) emit(run, o.table, msmcal::format_study_table(result));
  if (!o.json_out.empty()) emit(run, o.json_out, msmcal::to_json(result).dump(2) + "\n");
}

void run_fit_weights(Run& run, const Options& o) {
  require(o.out, "--out");
  const auto data = load_data(o);
  auto cfg = pipeline_for(run, o, nullptr);
  resolve_range(cfg, data);
  const auto fitted = msmcal::fit_initial_weights(data, cfg);
  report_warnings(fitted.initial);
  emit(run, o.out, msmcal::format_weights(fitted.initial));
  run.extra["pipeline"] = msmcal::to_json(cfg);
  if (!o.json_out.empty()) {
    const json summary = {{"rows", fitted.initial.rows().size()},
                          {"kind", msmcal::to_string(fitted.initial.kind)},
                          {"provenance", msmcal::to_json(fitted.initial.provenance)}};
    emit(run, o.json_out, summary.dump(2) + "\n");
  }
}

// Fits the models the restrictions depend on and builds them for the rows of `w`.
msmcal::RestrictionSystem restrictions_for(const msmcal::LongitudinalDataset& data, const msmcal::PipelineConfig& cfg,
                                           const msmcal::WeightMatrix& w) {
  auto fitted = msmcal::fit_initial_weights(data, cfg);
  fitted.initial = w;
  return msmcal::build_restrictions(data, cfg, fitted);
}

void run_calibrate(Run& run, const Options& o) {
  require(o.out, "--out");
  const auto data = load_data(o);
  const auto w = load_weights(o, data);
  auto cfg = pipeline_for(run, o, &w);
  resolve_range(cfg, data);
  check_range(cfg, w);
  run.extra["pipeline"] = msmcal::to_json(cfg);
  const auto system = restrictions_for(data, cfg, w);
  for (const auto& line : system.pruning_report) std::cerr << line << "\n";
  const Eigen::VectorXd w0 = w.flatten(system.rows);
  const auto sol = msmcal::solve(w0, system, cfg.calibration);
  json sj = msmcal::to_json(sol);
  sj["restrictions"] = system.width();
  sj["rows"] = system.size();
  sj["pruning"] = system.pruning_report;
  const std::string solution_path = o.solution.empty() ? with_suffix(o.out, ".solution.json") : o.solution;
  emit(run, solution_path, sj.dump(2) + "\n");
  if (!sol.converged) throw msmcal::NumericalError("calibration failed: " + sol.message);
  const auto calibrated = msmcal::apply(w, system, sol.lambda);
  emit(run, o.out, msmcal::format_weights(calibrated));
  if (!o.report.empty()) {
    emit(run, o.report,
         msmcal::format_restriction_report(system, w0, Eigen::VectorXd(calibrated.flatten(system.rows))));
  }
}

void run_fit_msm(Run& run, const Options& o) {
  const auto data = load_data(o);
  std::optional<msmcal::WeightMatrix> w;
  if (!o.weights.empty()) w = load_weights(o, data);
  auto cfg = pipeline_for(run, o, w ? &*w : nullptr);
  resolve_range(cfg, data);
  if (!w) w = msmcal::unit_weights(data, cfg.range);
  const auto estimate = msmcal::fit_msm(data, cfg.msm, *w);
  run.extra["pipeline"] = msmcal::to_json(cfg);
  emit(run, o.out, msmcal::format_estimate_csv(estimate));
  if (!o.json_out.empty()) emit(run, o.json_out, msmcal::to_json(estimate).dump(2) + "\n");
}

void run_bootstrap(Run& run, const Options& o) {
  const auto data = load_data(o);
  auto cfg = pipeline_for(run, o, nullptr);
  resolve_range(cfg, data);
  const std::string method = lower(o.method);
  if (method != "mle" && method != "cmle") throw UsageError("--method must be mle or cmle");
  const auto wm = method == "mle" ? msmcal::WeightMethod::mle : msmcal::WeightMethod::cmle;
  run.extra["pipeline"] = msmcal::to_json(cfg);

  auto estimate = msmcal::estimate_msm(data, cfg, wm);
  msmcal::BootstrapOptions bo;
  bo.replicates = o.boot_replicates;
  bo.seed = o.seed;
  bo.jobs = o.jobs;
  bo.max_failure_rate = o.max_failure_rate;
  const auto result = msmcal::bootstrap(
      data, [&](const msmcal::LongitudinalDataset& d) { return msmcal::estimate_msm(d, cfg, wm); }, bo);
  for (const auto& m : result.failures) std::cerr << "bootstrap failure: " << m << "\n";
  estimate.bootstrap_se = result.se;
  estimate.replicates_used = result.used;
  estimate.failed_replicates = result.failed;
  estimate.failures = result.failures;
  emit(run, o.out, msmcal::format_estimate_csv(estimate));
  if (!o.json_out.empty()) emit(run, o.json_out, msmcal::to_json(estimate).dump(2) + "\n");
}

void run_diagnose(Run& run, const Options& o) {
  const auto data = load_data(o);
  const auto w = load_weights(o, data);
  auto cfg = pipeline_for(run, o, &w);
  resolve_range(cfg, data);
  check_range(cfg, w);
  run.extra["pipeline"] = msmcal::to_json(cfg);
  const auto system = restrictions_for(data, cfg, w);
  const Eigen::VectorXd wv = w.flatten(system.rows);
  const Eigen::VectorXd residual = system.residual(wv);
  const double max_abs = residual.size() ? residual.cwiseAbs().maxCoeff() : 0.0;
  const double scale = std::max(1.0, system.l.size() ? system.l.cwiseAbs().maxCoeff() : 0.0);
  json j = msmcal::to_json(msmcal::imbalance(w, system));
  j["max_abs_residual"] = max_abs;
  j["residual_scale"] = scale;
  j["relative_max_residual"] = max_abs / scale;
  j["pruning"] = system.pruning_report;
  emit(run, o.out, j.dump(2) + "\n");
  if (!o.report.empty()) emit(run, o.report, msmcal::format_restriction_report(system, wv, std::nullopt));
}

std::string manifest_path(const Run& run, const Options& o) {
  if (!o.manifest.empty()) return o.manifest;
  for (const auto* primary : {&o.out, &o.cohort_out}) {
    if (!primary->empty() && *primary != "-") return *primary + ".manifest.json";
  }
  return "msmcal-" + run.command + ".manifest.json";
}

void write_manifest(const Run& run, const Options& o, const std::vector<std::string>& argv, const json& status) {
  json m = {{"tool", "msmcal"},
            {"version", msmcal::kVersion},
            {"command", run.command},
            {"arguments", argv},
            {"options", options_json(run)},
            {"seed", o.seed},
            {"jobs", o.jobs},
            {"outputs", run.outputs},
            {"build",
             {{"compiler", __VERSION__},
              {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                            std::to_string(EIGEN_MINOR_VERSION)}}},
            {"status", status}};
  m.update(run.extra);
  msmcal::io::write_file(manifest_path(run, o), m.dump(2) + "\n");
}

int fail(const std::string& category, const std::string& message, int code) {
  std::cerr << json{{"error", {{"category", category}, {"message", message}, {"exit_code", code}}}}.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibrated weights for marginal structural models with longitudinal ordinal treatment"};
  app.set_version_flag("--version", msmcal::kVersion);
  app.require_subcommand(1);
  Options o;

  auto* simulate = app.add_subcommand("simulate", "Run the simulation study or write one simulated cohort");
  add_common(simulate, o);
  simulate->add_option("--scenario", o.scenario, "1 (no censoring) or 2 (covariate-dependent censoring)")
      ->capture_default_str();
  simulate->add_option("--covariates", o.covariates, "correct or transformed")->capture_default_str();
  simulate->add_option("--n", o.n, "Subjects per cohort")->capture_default_str();
  simulate->add_option("--T", o.T, "Follow-up visits")->capture_default_str();
  simulate->add_option("--replicates", o.study_replicates, "Simulated cohorts")->capture_default_str();
  simulate->add_option("--noise-sd", o.noise_sd, "Standard deviation of the outcome error")->capture_default_str();
  simulate->add_option("--estimators", o.estimators, "Comma-separated subset of mle, cmle, truth")
      ->capture_default_str();
  simulate->add_option("--out", o.out, "Summary CSV (default: standard output)");
  simulate->add_option("--table", o.table, "Formatted summary table");
  simulate->add_option("--json", o.json_out, "Summary JSON with failures");
  simulate->add_option("--cohort-out", o.cohort_out, "Write one simulated cohort here instead of running the study");
  simulate->add_option("--replicate", o.replicate, "Replicate index used with --cohort-out")->capture_default_str();

  auto* fit_weights = app.add_subcommand("fit-weights", "Fit weight models and write initial weights");
  add_common(fit_weights, o);
  add_data(fit_weights, o);
  add_pipeline(fit_weights, o);
  fit_weights->add_option("--out", o.out, "Weights CSV");
  fit_weights->add_option("--json", o.json_out, "Fit summary JSON");

  auto* calibrate = app.add_subcommand("calibrate", "Calibrate weights to the configured restrictions");
  add_common(calibrate, o);
  add_data(calibrate, o);
  add_pipeline(calibrate, o);
  calibrate->add_option("--weights", o.weights, "Initial weights CSV");
  calibrate->add_option("--out", o.out, "Calibrated weights CSV");
  calibrate->add_option("--solution", o.solution, "Solution JSON (default: <out>.solution.json)");
  calibrate->add_option("--report", o.report, "Per-restriction residual CSV");

  auto* fit_msm = app.add_subcommand("fit-msm", "Fit the marginal structural model by weighted least squares");
  add_common(fit_msm, o);
  add_data(fit_msm, o);
  add_pipeline(fit_msm, o);
  fit_msm->add_option("--weights", o.weights, "Weights CSV (default: unit weights)");
  fit_msm->add_option("--out", o.out, "Estimate CSV (default: standard output)");
  fit_msm->add_option("--json", o.json_out, "Estimate JSON");

  auto* bootstrap = app.add_subcommand("bootstrap", "Subject-level bootstrap of the full pipeline");
  add_common(bootstrap, o);
  add_data(bootstrap, o);
  add_pipeline(bootstrap, o);
  bootstrap->add_option("--method", o.method, "mle or cmle")->capture_default_str();
  bootstrap->add_option("--replicates", o.boot_replicates, "Bootstrap replicates")->capture_default_str();
  bootstrap->add_option("--max-failure-rate", o.max_failure_rate, "Abort above this failed-replicate fraction")
      ->capture_default_str();
  bootstrap->add_option("--out", o.out, "Estimate CSV with standard errors (default: standard output)");
  bootstrap->add_option("--json", o.json_out, "Estimate JSON");

  auto* diagnose = app.add_subcommand("diagnose", "Report restriction residuals of a weight file");
  add_common(diagnose, o);
  add_data(diagnose, o);
  add_pipeline(diagnose, o);
  diagnose->add_option("--weights", o.weights, "Weights CSV");
  diagnose->add_option("--out", o.out, "Imbalance JSON (default: standard output)");
  diagnose->add_option("--report", o.report, "Per-restriction residual CSV");

  for (auto* sub : {simulate, bootstrap}) {
    sub->add_option("--seed", o.seed, "Random seed")->capture_default_str();
    sub->add_option("--jobs", o.jobs, "Worker threads")->capture_default_str();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == static_cast<int>(CLI::ExitCodes::Success)) return app.exit(e);
    return fail("usage", e.what(), 2);
  }

  Run run;
  for (auto* sub : app.get_subcommands()) {
    run.command = sub->get_name();
    run.app = sub;
  }
  const std::vector<std::string> args(argv, argv + argc);
  auto finish = [&](const json& status) {
    try {
      write_manifest(run, o, args, status);
    } catch (const std::exception& e) {
      std::cerr << "warning: manifest not written: " << e.what() << "\n";
    }
  };
  try {
    if (!o.config.empty()) apply_config(run, o.config);
    if (o.jobs < 1) throw UsageError("--jobs must be at least 1");
    if (run.command == "simulate") run_simulate(run, o);
    if (run.command == "fit-weights") run_fit_weights(run, o);
    if (run.command == "calibrate") run_calibrate(run, o);
    if (run.command == "fit-msm") run_fit_msm(run, o);
    if (run.command == "bootstrap") run_bootstrap(run, o);
    if (run.command == "diagnose") run_diagnose(run, o);
  } catch (const UsageError& e) {
    finish({{"category", "usage"}, {"message", e.what()}});
    return fail("usage", e.what(), 2);
  } catch (const msmcal::Error& e) {
    const bool data = e.category() == msmcal::ErrorCategory::data;
    finish({{"category", msmcal::category_name(e.category())}, {"message", e.what()}});
    return fail(msmcal::category_name(e.category()), e.what(), data ? 3 : 4);
  } catch (const std::exception& e) {
    finish({{"category", "internal"}, {"message", e.what()}});
    return fail("internal", e.what(), 1);
  }
  finish("ok");
  return 0;
}
