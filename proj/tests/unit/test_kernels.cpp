#include "doctest.h"
#include "gradcheck.hpp"
#include "refrec/kernels.hpp"

using namespace refrec;
using refrec::testing::random_matrix;

TEST_SUITE("kernels") {
  TEST_CASE("gemm variants match the serial reference bit for bit") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
      const auto m = static_cast<Eigen::Index>(1 + rng.below(300));
      const auto k = static_cast<Eigen::Index>(1 + rng.below(40));
      const auto n = static_cast<Eigen::Index>(1 + rng.below(40));
      Matrix a = random_matrix(m, k, rng), b = random_matrix(k, n, rng);
      if (trial % 3 == 0) a = a.cwiseMax(0.0);  // exercise the zero skip
      Matrix c1, c2;
      kernels::gemm_nn(a, b, c1);
      kernels::reference::gemm_nn(a, b, c2);
      CHECK(c1 == c2);

      const Matrix at = random_matrix(m, k, rng), bt = random_matrix(m, n, rng);
      kernels::gemm_tn(at, bt, c1);
      kernels::reference::gemm_tn(at, bt, c2);
      CHECK((c1 - c2).cwiseAbs().maxCoeff() < 1e-12);

      const Matrix bn = random_matrix(n, k, rng);
      kernels::gemm_nt(a, bn, c1);
      kernels::reference::gemm_nt(a, bn, c2);
      CHECK((c1 - c2).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((c1 - a * bn.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  TEST_CASE("segment_max agrees with reference, ties go to the lowest row") {
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
      const int group = 1 + static_cast<int>(rng.below(30));
      const auto groups = static_cast<Eigen::Index>(1 + rng.below(10));
      Matrix x = random_matrix(group * groups, 5, rng);
      if (trial % 2) x = (x * 3).array().round();  // many ties
      Matrix o1, o2;
      std::vector<int> a1, a2;
      kernels::segment_max(x, group, o1, a1);
      kernels::reference::segment_max(x, group, o2, a2);
      CHECK(o1 == o2);
      CHECK(a1 == a2);
    }
    Matrix x(3, 1);
    x << 2, 2, 1;
    Matrix out;
    std::vector<int> arg;
    kernels::segment_max(x, 3, out, arg);
    CHECK(arg[0] == 0);
  }

  TEST_CASE("pairwise_l2 and nearest_rows agree with reference") {
    Rng rng(13);
    for (int trial = 0; trial < 20; ++trial) {
      const auto n = static_cast<Eigen::Index>(1 + rng.below(120));
      const auto m = static_cast<Eigen::Index>(1 + rng.below(120));
      const Matrix q = random_matrix(n, 3, rng), r = random_matrix(m, 3, rng);
      Matrix d1, d2;
      kernels::pairwise_l2(q, r, d1);
      kernels::reference::pairwise_l2(q, r, d2);
      CHECK((d1 - d2).cwiseAbs().maxCoeff() < 1e-12);
      std::vector<int> i1, i2;
      Vector s1, s2;
      kernels::nearest_rows(q, r, i1, s1);
      kernels::reference::nearest_rows(q, r, i2, s2);
      CHECK(i1 == i2);
      CHECK((s1 - s2).cwiseAbs().maxCoeff() < 1e-12);
    }
    Matrix q(1, 3), r(2, 3);
    q << 0, 0, 0;
    r << 1, 0, 0, -1, 0, 0;
    std::vector<int> idx;
    Vector sq;
    kernels::nearest_rows(q, r, idx, sq);
    CHECK(idx[0] == 0);
  }

  TEST_CASE("kernels are deterministic across calls") {
    Rng rng(14);
    const Matrix a = random_matrix(513, 64, rng), b = random_matrix(64, 32, rng);
    Matrix c1, c2;
    kernels::gemm_nn(a, b, c1);
    kernels::gemm_nn(a, b, c2);
    CHECK(c1 == c2);
    CHECK(kernels::thread_count() >= 1);
  }
}
