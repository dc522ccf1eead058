#include <string>
#include <set>

#include "doctest.h"
#include "refrec/rng.hpp"

using refrec::Rng;

TEST_SUITE("rng") {
  TEST_CASE("same seed gives the same stream") {
    Rng a(5), b(5), c(6);
    for (int i = 0; i < 100; ++i) {
      const auto x = a.next_u64();
      CHECK(x == b.next_u64());
      CHECK(x != c.next_u64());
    }
  }

  TEST_CASE("split streams do not depend on parent consumption") {
    Rng a(9), b(9);
    for (int i = 0; i < 17; ++i) b.next_u64();
    Rng sa = a.split(3), sb = b.split(3);
    for (int i = 0; i < 10; ++i) CHECK(sa.next_u64() == sb.next_u64());
    CHECK(a.split(3).next_u64() != a.split(4).next_u64());
  }

  TEST_CASE("uniform and below stay in range with sane moments") {
    Rng r(1);
    double sum = 0.0;
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 100000; ++i) {
      const double u = r.uniform();
      CHECK_UNARY(u >= 0.0);
      CHECK_UNARY(u < 1.0);
      sum += u;
      const auto k = r.below(7);
      CHECK(k < 7);
      seen.insert(k);
    }
    CHECK(sum / 100000 == doctest::Approx(0.5).epsilon(0.01));
    CHECK(seen.size() == 7);
    double s1 = 0, s2 = 0;
    for (int i = 0; i < 100000; ++i) {
      const double z = r.normal();
      s1 += z;
      s2 += z * z;
    }
    CHECK(std::abs(s1 / 1e5) < 0.02);
    CHECK(s2 / 1e5 == doctest::Approx(1.0).epsilon(0.02));
  }

  TEST_CASE("shuffle is a permutation") {
    Rng r(3);
    std::vector<int> v(50);
    for (int i = 0; i < 50; ++i) v[i] = i;
    r.shuffle(std::span<int>(v));
    std::set<int> s(v.begin(), v.end());
    CHECK(s.size() == 50);
  }

  TEST_CASE("fnv1a64 known value") {
    const std::string a = "a";
    CHECK(refrec::fnv1a64(a) == 0xAF63DC4C8601EC8CULL);
  }
}
