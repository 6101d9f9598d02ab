#include "msmcal/linalg.hpp"

namespace msmcal::linalg {

std::vector<Eigen::Index> dependent_columns(const Eigen::MatrixXd& A, double relative_tolerance,
                                            double zero_tolerance) {
  std::vector<Eigen::Index> dependent;
  std::vector<Eigen::VectorXd> basis;
  for (Eigen::Index c = 0; c < A.cols(); ++c) {
    const double max_abs = A.col(c).cwiseAbs().maxCoeff();
    const double norm = A.col(c).norm();
    if (max_abs <= zero_tolerance || norm == 0.0) {
      dependent.push_back(c);
      continue;
    }
    Eigen::VectorXd v = A.col(c) / norm;
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& q : basis) v -= q.dot(v) * q;
    }
    const double residual = v.norm();
    if (residual <= relative_tolerance) {
      dependent.push_back(c);
    } else {
      basis.push_back(v / residual);
    }
  }
  return dependent;
}

}  // namespace msmcal::linalg
