#pragma once

#include <Eigen/Core>

namespace refrec {

/// Row-major dense matrix used throughout the project. Point clouds are N x 3,
/// batched per-point features are (B*N) x C.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace refrec
