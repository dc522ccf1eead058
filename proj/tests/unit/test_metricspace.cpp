#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "gradcheck.hpp"
#include "refrec/metricspace.hpp"

using namespace refrec;
using testing::random_matrix;

namespace {

double brute_chamfer(const Matrix& a, const Matrix& b) {
  auto one_way = [](const Matrix& x, const Matrix& y) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      double best = 1e300;
      for (Eigen::Index j = 0; j < y.rows(); ++j) best = std::min(best, (x.row(i) - y.row(j)).squaredNorm());
      s += best;
    }
    return s / static_cast<double>(x.rows());
  };
  return one_way(a, b) + one_way(b, a);
}

double brute_emd(const Matrix& a, const Matrix& b) {
  std::vector<int> p(static_cast<size_t>(a.rows()));
  std::iota(p.begin(), p.end(), 0);
  double best = 1e300;
  do {
    double c = 0.0;
    for (size_t i = 0; i < p.size(); ++i) c += (a.row(static_cast<Eigen::Index>(i)) - b.row(p[i])).norm();
    best = std::min(best, c);
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

}  // namespace

TEST_SUITE("metricspace") {
  TEST_CASE("chamfer matches brute force and is symmetric") {
    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
      const Matrix a = random_matrix(1 + static_cast<int>(rng.below(30)), 3, rng);
      const Matrix b = random_matrix(1 + static_cast<int>(rng.below(30)), 3, rng);
      CHECK(metric::chamfer(a, b) == doctest::Approx(brute_chamfer(a, b)).epsilon(1e-12));
      CHECK(metric::chamfer(a, b) == doctest::Approx(metric::chamfer(b, a)).epsilon(1e-12));
      CHECK(metric::chamfer(ad::Value::constant(a), ad::Value::constant(b)).item() ==
            doctest::Approx(brute_chamfer(a, b)).epsilon(1e-12));
    }
    const Matrix a = random_matrix(10, 3, rng);
    CHECK(metric::chamfer(a, a) == 0.0);
  }

  TEST_CASE("exact EMD equals the permutation minimum") {
    Rng rng(2);
    for (int i = 0; i < 20; ++i) {
      const int n = 1 + static_cast<int>(rng.below(6));
      const Matrix a = random_matrix(n, 3, rng), b = random_matrix(n, 3, rng);
      const auto r = metric::emd_exact(a, b);
      CHECK(r.cost == doctest::Approx(brute_emd(a, b)).epsilon(1e-12));
      std::vector<int> perm = r.permutation;
      std::sort(perm.begin(), perm.end());
      for (int k = 0; k < n; ++k) CHECK(perm[k] == k);
    }
    CHECK_THROWS(metric::emd_exact(random_matrix(3, 3, rng), random_matrix(4, 3, rng)));
    CHECK_THROWS(metric::emd_exact(random_matrix(5, 3, rng), random_matrix(5, 3, rng), 4));
  }

  TEST_CASE("solve_assignment handles ties and integer costs") {
    Matrix c(3, 3);
    c << 1, 1, 1, 1, 1, 1, 1, 1, 1;
    CHECK(metric::solve_assignment(c).cost == 3.0);
    c << 4, 1, 3, 2, 0, 5, 3, 2, 2;
    CHECK(metric::solve_assignment(c).cost == 5.0);
  }

  TEST_CASE("auction EMD is within N * eps of exact") {
    Rng rng(3);
    for (int i = 0; i < 10; ++i) {
      const Matrix a = random_matrix(16, 3, rng), b = random_matrix(16, 3, rng);
      const double eps = 1e-3;
      const double exact = metric::emd_exact(a, b).cost;
      const double auc = metric::emd_auction(a, b, eps).cost;
      CHECK(auc >= exact - 1e-9);
      CHECK(auc <= exact + 16 * eps + 1e-9);
    }
  }

  TEST_CASE("emd_loss is cost / N and identical sets give zero") {
    Rng rng(4);
    const Matrix a = random_matrix(6, 3, rng), b = random_matrix(6, 3, rng);
    CHECK(metric::emd_loss(ad::Value::constant(a), ad::Value::constant(b)).item() ==
          doctest::Approx(brute_emd(a, b) / 6).epsilon(1e-12));
    auto p = ad::Value::parameter(a);
    const auto l = metric::emd_loss(p, ad::Value::constant(a));
    CHECK(l.item() == 0.0);
    ad::backward(l);
    CHECK(p.grad().cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("nearest matches brute force, ties by id") {
    Rng rng(5);
    Matrix v = random_matrix(40, 4, rng);
    v.row(7) = v.row(3);  // exact tie
    std::vector<std::int64_t> ids(40);
    for (int i = 0; i < 40; ++i) ids[i] = 100 - i;
    const metric::EmbeddingTable t(v, ids);
    const RowVector q = v.row(3);
    const auto nn = metric::nearest(q, t, 5);
    REQUIRE(nn.size() == 5);
    CHECK(nn[0].distance == 0.0);
    CHECK(nn[1].distance == 0.0);
    CHECK(nn[0].id == 93);  // id of row 7 (100 - 7) sorts before row 3 (97)
    for (size_t i = 1; i < nn.size(); ++i) CHECK(nn[i - 1].distance <= nn[i].distance);
    CHECK_THROWS(metric::nearest(q, t, 41));
    CHECK_THROWS(metric::EmbeddingTable(v, std::vector<std::int64_t>(40, 1)));
    CHECK(t.row_of(93) == 7);
    CHECK_THROWS(t.row_of(5));
  }
}
