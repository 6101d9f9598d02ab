#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>

#include "json.hpp"
#include "msmcal/calibrate.hpp"
#include "msmcal/dataset.hpp"
#include "msmcal/error.hpp"
#include "msmcal/msm.hpp"
#include "msmcal/pipeline.hpp"
#include "msmcal/simulate.hpp"
#include "msmcal/version.hpp"
#include "msmcal/weights.hpp"

namespace py = pybind11;
using namespace msmcal;
using nlohmann::json;

namespace {

// Python dicts cross the boundary as JSON text; the wrapper in __init__.py does the (de)serialisation.
PipelineConfig resolved(const std::string& text, const LongitudinalDataset& data,
                        const WeightMatrix* weights = nullptr) {
  const json j = json::parse(text);
  PipelineConfig c = pipeline_config_from_json(j);
  if (weights) {
    if (!j.contains("first_visit")) c.range.first = weights->range.first;
    if (!j.contains("last_visit")) c.range.last = weights->range.last;
  }
  if (c.range.last <= 0) c.range.last = data.last_visit();
  c.msm.range = c.range;
  return c;
}

RestrictionSystem restrictions_for(const LongitudinalDataset& data, const PipelineConfig& c, const WeightMatrix& w) {
  auto fitted = fit_initial_weights(data, c);
  fitted.initial = w;
  return build_restrictions(data, c, fitted);
}

std::string calibrate_json(const LongitudinalDataset& data, const std::string& config, const WeightMatrix& w,
                           WeightMatrix& out) {
  const auto c = resolved(config, data, &w);
  const auto system = restrictions_for(data, c, w);
  const auto sol = solve(w.flatten(system.rows), system, c.calibration);
  json j = to_json(sol);
  j["pruning"] = system.pruning_report;
  if (!sol.converged) throw NumericalError("calibration failed: " + sol.message);
  out = apply(w, system, sol.lambda);
  return j.dump();
}

ScenarioConfig scenario(Index n, int T, const std::string& censoring, const std::string& covariates,
                        std::uint64_t seed, int replicates, double noise_sd, int jobs) {
  ScenarioConfig c;
  c.n = n;
  c.T = T;
  c.censoring = parse_censoring_scenario(censoring);
  c.covariates = parse_covariate_set(covariates);
  c.seed = seed;
  c.replicates = replicates;
  c.noise_sd = noise_sd;
  c.jobs = jobs;
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Calibrated weights for marginal structural models";
  m.attr("__version__") = kVersion;

  static py::exception<DataError> data_error(m, "DataError", PyExc_ValueError);
  static py::exception<NumericalError> numerical_error(m, "NumericalError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const DataError& e) {
      py::set_error(data_error, e.what());
    } catch (const NumericalError& e) {
      py::set_error(numerical_error, e.what());
    } catch (const json::exception& e) {
      py::set_error(data_error, e.what());
    }
  });

  py::class_<LongitudinalDataset>(m, "Dataset")
      .def_property_readonly("subjects", &LongitudinalDataset::subjects)
      .def_property_readonly("last_visit", &LongitudinalDataset::last_visit)
      .def_property_readonly("ids", &LongitudinalDataset::ids)
      .def_property_readonly("covariates", &LongitudinalDataset::covariates)
      .def_property_readonly("treatment_kind",
                             [](const LongitudinalDataset& d) { return std::string(to_string(d.treatment_kind())); })
      .def("column", &LongitudinalDataset::column, py::arg("name"),
           "Subjects x (last_visit + 1) matrix; NaN where the subject is out of follow-up")
      .def("has_column", &LongitudinalDataset::has_column, py::arg("name"))
      .def("to_csv", [](const LongitudinalDataset& d) { return format_long(d); });

  py::class_<WeightMatrix>(m, "Weights")
      .def_readonly("ids", &WeightMatrix::ids)
      .def_property_readonly("first_visit", [](const WeightMatrix& w) { return w.range.first; })
      .def_property_readonly("last_visit", [](const WeightMatrix& w) { return w.range.last; })
      .def_property_readonly("kind", [](const WeightMatrix& w) { return std::string(to_string(w.kind)); })
      .def_readonly("values", &WeightMatrix::values)
      .def_readonly("factors", &WeightMatrix::factors)
      .def_readonly("mask", &WeightMatrix::mask)
      .def_property_readonly("warnings", [](const WeightMatrix& w) { return w.provenance.warnings; })
      .def("flatten", py::overload_cast<>(&WeightMatrix::flatten, py::const_),
           "Masked-in weights in subject-major order")
      .def("to_csv", [](const WeightMatrix& w) { return format_weights(w); });

  m.def("parse_long", [](const std::string& text, const std::string& treatment) {
    return parse_long(text, {parse_treatment_kind(treatment), {}});
  }, py::arg("text"), py::arg("treatment") = "ordinal3");
  m.def("load_long", [](const std::string& path, const std::string& treatment) {
    return load_long(path, {parse_treatment_kind(treatment), {}});
  }, py::arg("path"), py::arg("treatment") = "ordinal3");
  m.def("parse_weights", &parse_weights, py::arg("text"));

  m.def("_generate_cohort", [](Index n, int T, const std::string& censoring, const std::string& covariates,
                               std::uint64_t seed, int replicate, double noise_sd) {
    const auto c = scenario(n, T, censoring, covariates, seed, 1, noise_sd, 1);
    auto d = generate_cohort(c, replicate);
    if (c.covariates == CovariateSet::transformed) d = misspecify_transform(d);
    return d;
  });
  m.def("_run_study", [](Index n, int T, const std::string& censoring, const std::string& covariates,
                         std::uint64_t seed, int replicates, double noise_sd, int jobs,
                         const std::vector<std::string>& estimators) {
    std::vector<Estimator> e;
    for (const auto& s : estimators) e.push_back(parse_estimator(s));
    StudyResult r;
    {
      py::gil_scoped_release release;
      r = run_study(scenario(n, T, censoring, covariates, seed, replicates, noise_sd, jobs), e);
    }
    json j = to_json(r);
    j["lambda_inf"] = std::vector<double>(r.lambda_inf.begin(), r.lambda_inf.end());
    return j.dump();
  });
  m.def("_scenario_config", [](Index n, int T, const std::string& censoring, const std::string& covariates) {
    return to_json(scenario_pipeline(scenario(n, T, censoring, covariates, 1, 1, 20.0, 1))).dump();
  });

  m.def("_fit_weights", [](const LongitudinalDataset& data, const std::string& config) {
    return fit_initial_weights(data, resolved(config, data)).initial;
  });
  m.def("_calibrate", [](const LongitudinalDataset& data, const std::string& config, const WeightMatrix& w) {
    WeightMatrix out;
    std::string solution = calibrate_json(data, config, w, out);
    return py::make_tuple(out, solution);
  });
  m.def("_diagnose", [](const LongitudinalDataset& data, const std::string& config, const WeightMatrix& w) {
    const auto c = resolved(config, data, &w);
    const auto system = restrictions_for(data, c, w);
    const Eigen::VectorXd residual = system.residual(w.flatten(system.rows));
    json j = to_json(imbalance(w, system));
    j["max_abs_residual"] = residual.size() ? residual.cwiseAbs().maxCoeff() : 0.0;
    j["residual_scale"] = std::max(1.0, system.l.size() ? system.l.cwiseAbs().maxCoeff() : 0.0);
    return j.dump();
  });
  m.def("_fit_msm", [](const LongitudinalDataset& data, const std::string& config, const WeightMatrix* w) {
    const auto c = resolved(config, data, w);
    return to_json(fit_msm(data, c.msm, w ? *w : unit_weights(data, c.range))).dump();
  }, py::arg("data"), py::arg("config"), py::arg("weights").none(true));
  m.def("_bootstrap", [](const LongitudinalDataset& data, const std::string& config, const std::string& method,
                         int replicates, std::uint64_t seed, int jobs, double max_failure_rate) {
    if (method != "mle" && method != "cmle") throw DataError("method must be mle or cmle");
    const auto wm = method == "mle" ? WeightMethod::mle : WeightMethod::cmle;
    const auto c = resolved(config, data);
    MsmEstimate estimate;
    {
      py::gil_scoped_release release;
      estimate = estimate_msm(data, c, wm);
      const auto r = bootstrap(
          data, [&](const LongitudinalDataset& d) { return estimate_msm(d, c, wm); },
          {replicates, seed, jobs, max_failure_rate});
      estimate.bootstrap_se = r.se;
      estimate.replicates_used = r.used;
      estimate.failed_replicates = r.failed;
      estimate.failures = r.failures;
    }
    return to_json(estimate).dump();
  });

  m.def("calibration_objective", [](const Eigen::VectorXd& w0, const Eigen::MatrixXd& K, const Eigen::VectorXd& l,
                                    const Eigen::VectorXd& lam) {
    const auto t = objective_grad_hess(w0, K, l, lam);
    return py::make_tuple(t.value, t.gradient, t.hessian);
  }, py::arg("w0"), py::arg("K"), py::arg("l"), py::arg("lam"),
        "Value, gradient and Hessian of sum(w0 * exp(K lam)) - l'lam");
  m.def("solve_calibration", [](const Eigen::VectorXd& w0, const Eigen::MatrixXd& K, const Eigen::VectorXd& l,
                                double tolerance, int max_iterations) {
    RestrictionSystem s;
    s.K = K;
    s.l = l;
    for (Index i = 0; i < K.rows(); ++i) s.rows.push_back({i, 1});
    for (Index c = 0; c < K.cols(); ++c) s.labels.push_back("c" + std::to_string(c));
    CalibrationOptions o;
    o.tolerance = tolerance;
    o.max_iterations = max_iterations;
    const auto sol = solve(w0, s, o);
    py::dict d;
    d["lambda"] = sol.lambda;
    d["converged"] = sol.converged;
    d["infeasible"] = sol.infeasible;
    d["iterations"] = sol.iterations;
    d["final_residual_inf"] = sol.final_residual_inf;
    d["message"] = sol.message;
    return d;
  }, py::arg("w0"), py::arg("K"), py::arg("l"), py::arg("tolerance") = 1e-8, py::arg("max_iterations") = 100,
        "Minimise sum(w0 * exp(K lam)) - l'lam; calibrated weights are w0 * exp(K lam)");
}
