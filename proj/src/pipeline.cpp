#include "msmcal/pipeline.hpp"

#include <algorithm>

#include "msmcal/error.hpp"

namespace msmcal {

namespace {

PipelineConfig resolve(const PipelineConfig& config, const LongitudinalDataset& data) {
  PipelineConfig c = config;
  if (c.range.last <= 0) c.range.last = data.last_visit();
  c.msm.range = c.range;
  if (c.denominator.formula0.empty()) throw DataError("a denominator treatment model is required");
  if (c.numerator.formula0.empty()) throw DataError("a numerator treatment model is required");
  return c;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto end = std::min(s.find(',', start), s.size());
    std::string item = s.substr(start, end - start);
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
    start = end + 1;
  }
  return out;
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw DataError(std::string("configuration key '") + key + "' has the wrong type");
  }
}

void read_optional(const nlohmann::json& j, const char* key, std::optional<std::string>& out) {
  std::string s;
  read(j, key, s);
  if (!s.empty()) out = s;
}

}  // namespace

PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {
      "first_visit", "last_visit", "numerator0", "numerator1", "denominator0", "denominator1", "probe0", "probe1",
      "treatment_restrictions", "censoring", "censoring_stabilizer", "censoring_probe", "normalization",
      "per_visit_normalization", "drop_normalization_with_censoring", "target", "scaling", "max_clamp_fraction",
      "calibration_tolerance", "calibration_max_iterations", "msm", "msm_outcome", "msm_treatment_terms"};
  if (!j.is_object()) throw DataError("pipeline configuration must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw DataError("unknown configuration key '" + k + "'");
    }
  }
  PipelineConfig c;
  c.range = {1, 0};
  read(j, "first_visit", c.range.first);
  read(j, "last_visit", c.range.last);
  read(j, "numerator0", c.numerator.formula0);
  read(j, "numerator1", c.numerator.formula1);
  read(j, "denominator0", c.denominator.formula0);
  read(j, "denominator1", c.denominator.formula1);
  TreatmentModelSpec probe;
  read(j, "probe0", probe.formula0);
  read(j, "probe1", probe.formula1);
  if (!probe.formula0.empty() || !probe.formula1.empty()) {
    if (probe.formula0.empty()) probe.formula0 = c.denominator.formula0;
    if (probe.formula1.empty()) probe.formula1 = c.denominator.formula1;
    c.treatment_probe = probe;
  }
  read(j, "treatment_restrictions", c.treatment_restrictions);
  read_optional(j, "censoring", c.censoring);
  read_optional(j, "censoring_stabilizer", c.censoring_stabilizer);
  read_optional(j, "censoring_probe", c.censoring_probe);
  read(j, "normalization", c.normalization);
  read(j, "per_visit_normalization", c.per_visit_normalization);
  read(j, "drop_normalization_with_censoring", c.drop_normalization_with_censoring);
  std::string text;
  read(j, "target", text);
  if (!text.empty()) c.target = parse_restriction_target(text);
  text.clear();
  read(j, "scaling", text);
  if (!text.empty()) c.scaling = parse_scaling(text);
  read(j, "max_clamp_fraction", c.weight_options.max_clamp_fraction);
  read(j, "calibration_tolerance", c.calibration.tolerance);
  read(j, "calibration_max_iterations", c.calibration.max_iterations);
  read(j, "msm", c.msm.formula);
  read(j, "msm_outcome", c.msm.outcome);
  text.clear();
  read(j, "msm_treatment_terms", text);
  if (!text.empty()) c.msm.treatment_terms = split_list(text);
  return c;
}

nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json j = {{"first_visit", c.range.first},
                      {"last_visit", c.range.last},
                      {"numerator0", c.numerator.formula0},
                      {"numerator1", c.numerator.formula1},
                      {"denominator0", c.denominator.formula0},
                      {"denominator1", c.denominator.formula1},
                      {"treatment_restrictions", c.treatment_restrictions},
                      {"normalization", c.normalization},
                      {"per_visit_normalization", c.per_visit_normalization},
                      {"drop_normalization_with_censoring", c.drop_normalization_with_censoring},
                      {"target", to_string(c.target)},
                      {"scaling", to_string(c.scaling)},
                      {"max_clamp_fraction", c.weight_options.max_clamp_fraction},
                      {"calibration_tolerance", c.calibration.tolerance},
                      {"calibration_max_iterations", c.calibration.max_iterations},
                      {"msm", c.msm.formula},
                      {"msm_outcome", c.msm.outcome}};
  if (c.treatment_probe) {
    j["probe0"] = c.treatment_probe->formula0;
    j["probe1"] = c.treatment_probe->formula1;
  }
  if (c.censoring) j["censoring"] = *c.censoring;
  if (c.censoring_stabilizer) j["censoring_stabilizer"] = *c.censoring_stabilizer;
  if (c.censoring_probe) j["censoring_probe"] = *c.censoring_probe;
  if (!c.msm.treatment_terms.empty()) {
    std::string terms;
    for (const auto& t : c.msm.treatment_terms) terms += (terms.empty() ? "" : ",") + t;
    j["msm_treatment_terms"] = terms;
  }
  return j;
}

WeightingResult fit_initial_weights(const LongitudinalDataset& data, const PipelineConfig& config) {
  const PipelineConfig c = resolve(config, data);
  WeightingResult r{fit_treatment_model(data, c.numerator, c.range),
                    fit_treatment_model(data, c.denominator, c.range),
                    std::nullopt,
                    std::nullopt,
                    {},
                    std::nullopt,
                    {}};
  r.treatment = treatment_weights(data, r.numerator, r.denominator, c.weight_options);
  if (c.censoring) {
    r.censoring = fit_censoring_model(data, *c.censoring, c.range);
    if (c.censoring_stabilizer) r.stabilizer = fit_censoring_model(data, *c.censoring_stabilizer, c.range);
    r.censoring_weights = censoring_weights(data, *r.censoring, r.stabilizer, c.weight_options);
  }
  r.initial = combine_and_scale(r.treatment, r.censoring_weights, c.scaling);
  return r;
}

RestrictionSystem build_restrictions(const LongitudinalDataset& data, const PipelineConfig& config,
                                     const WeightingResult& fitted) {
  const PipelineConfig c = resolve(config, data);
  const auto rows = fitted.initial.rows();
  std::vector<RestrictionSystem> systems;
  if (c.treatment_restrictions) {
    systems.push_back(treatment_restrictions(data, rows, fitted.numerator,
                                             c.treatment_probe.value_or(c.denominator), c.target));
  }
  if (c.normalization) {
    systems.push_back(normalization_restrictions(rows, c.range, c.per_visit_normalization, c.target));
  }
  if (c.censoring) {
    systems.push_back(censoring_restrictions(data, rows, c.censoring_probe.value_or(*c.censoring), c.range, c.target,
                                             fitted.stabilizer));
  }
  if (systems.empty()) throw DataError("no calibration restrictions are configured");
  return assemble_joint(systems, c.drop_normalization_with_censoring);
}

CalibrationResult calibrate_weights(const LongitudinalDataset& data, const PipelineConfig& config,
                                    const WeightingResult& fitted) {
  CalibrationResult r;
  r.system = build_restrictions(data, config, fitted);
  r.solution = solve(fitted.initial.flatten(r.system.rows), r.system, config.calibration);
  if (!r.solution.converged) throw NumericalError("calibration failed: " + r.solution.message);
  r.calibrated = apply(fitted.initial, r.system, r.solution.lambda);
  return r;
}

MsmEstimate estimate_msm(const LongitudinalDataset& data, const PipelineConfig& config, WeightMethod method) {
  const PipelineConfig c = resolve(config, data);
  const auto fitted = fit_initial_weights(data, c);
  if (method == WeightMethod::mle) return fit_msm(data, c.msm, fitted.initial);
  return fit_msm(data, c.msm, calibrate_weights(data, c, fitted).calibrated);
}

}  // namespace msmcal
