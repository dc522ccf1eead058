#pragma once

// Central finite-difference checks shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "refrec/autodiff.hpp"
#include "refrec/rng.hpp"

namespace refrec::testing {

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

using LossFn = std::function<ad::Value(const std::vector<ad::Value>&)>;

struct GradCheck {
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double abs_error = 0.0;
};

/// Compares backward() with central differences of step h over every entry
/// of every leaf. Leaves are parameters; their data is restored afterwards.
inline GradCheck gradcheck(const LossFn& f, std::vector<ad::Value> leaves, double h = 1e-6) {
  ad::zero_grads(leaves);
  ad::backward(f(leaves));
  double diff2 = 0.0, an2 = 0.0, nu2 = 0.0, worst = 0.0;
  for (auto& leaf : leaves) {
    const Matrix analytic = leaf.grad();
    Matrix& d = leaf.mutable_data();
    for (Eigen::Index i = 0; i < d.rows(); ++i)
      for (Eigen::Index j = 0; j < d.cols(); ++j) {
        const double x = d(i, j);
        d(i, j) = x + h;
        const double up = f(leaves).item();
        d(i, j) = x - h;
        const double down = f(leaves).item();
        d(i, j) = x;
        const double num = (up - down) / (2.0 * h);
        const double a = analytic(i, j);
        diff2 += (a - num) * (a - num);
        an2 += a * a;
        nu2 += num * num;
        worst = std::max(worst, std::abs(a - num));
      }
  }
  const double scale = std::max({std::sqrt(an2), std::sqrt(nu2), 1e-12});
  return {std::sqrt(diff2) / scale, worst};
}

}  // namespace refrec::testing
