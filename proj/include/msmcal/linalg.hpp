#pragma once

#include <Eigen/Core>

#include <vector>

namespace msmcal::linalg {

/// Columns of `A` that are (numerically) in the span of earlier columns.
///
/// Columns are visited left to right and orthogonalized against the kept ones
/// (modified Gram-Schmidt, two passes). A column is dependent when its
/// residual norm is at most `relative_tolerance` times its own norm, or when
/// its max-abs entry is below `zero_tolerance`.
std::vector<Eigen::Index> dependent_columns(const Eigen::MatrixXd& A, double relative_tolerance,
                                            double zero_tolerance = 0.0);

}  // namespace msmcal::linalg
