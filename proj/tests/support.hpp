#pragma once

#include <Eigen/Core>

#include <cmath>
#include <string>

#include "msmcal/dataset.hpp"
#include "msmcal/simulate.hpp"

namespace testing {

inline msmcal::LongitudinalDataset parse(const std::string& csv,
                                         msmcal::TreatmentKind kind = msmcal::TreatmentKind::ordinal3) {
  return msmcal::parse_long(csv, {kind, {}});
}

// Small simulated cohort; scenario 2 gives dropout.
inline msmcal::LongitudinalDataset cohort(std::uint64_t seed, msmcal::Index n, int T, bool censored,
                                          int replicate = 0) {
  msmcal::ScenarioConfig c;
  c.n = n;
  c.T = T;
  c.seed = seed;
  c.censoring = censored ? msmcal::CensoringScenario::covariate_dependent : msmcal::CensoringScenario::none;
  return msmcal::generate_cohort(c, replicate);
}

inline double max_abs(const Eigen::MatrixXd& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

}  // namespace testing
