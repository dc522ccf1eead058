#include <cmath>

#include "doctest.h"
#include "primitives.hpp"
#include "refrec/autodiff.hpp"

using namespace refrec;
using refrec::testing::random_matrix;

TEST_SUITE("autodiff") {
  TEST_CASE("every primitive matches central differences") {
    Rng root(101);
    for (const auto& [name, make] : testing::primitive_cases()) {
      Rng rng = root.split(std::hash<std::string>{}(name));
      for (int i = 0; i < 10; ++i) {
        auto c = make(rng);
        const auto r = testing::gradcheck(c.loss, c.leaves);
        INFO(name << " instance " << i << " rel " << r.rel_error);
        CHECK(r.rel_error < 1e-4);
      }
    }
  }

  TEST_CASE("gradients accumulate and zero_grads clears them") {
    auto p = ad::Value::parameter(Matrix::Constant(1, 1, 2.0));
    ad::backward(ad::square(p));
    ad::backward(ad::square(p));
    CHECK(p.grad()(0, 0) == 8.0);
    std::vector<ad::Value> ps = {p};
    ad::zero_grads(ps);
    CHECK(p.grad()(0, 0) == 0.0);
  }

  TEST_CASE("constants never receive gradient") {
    auto c = ad::Value::constant(Matrix::Constant(2, 2, 1.0));
    auto p = ad::Value::parameter(Matrix::Constant(2, 2, 3.0));
    ad::backward(ad::sum(ad::mul(c, p)));
    CHECK(c.grad().size() == 0);
    CHECK(p.grad()(1, 1) == 1.0);
  }

  TEST_CASE("shape violations throw") {
    auto a = ad::Value::parameter(Matrix::Zero(2, 3));
    auto b = ad::Value::parameter(Matrix::Zero(2, 3));
    CHECK_THROWS_AS(ad::matmul(a, b), std::invalid_argument);
    CHECK_THROWS_AS(ad::add(a, ad::Value::constant(Matrix::Zero(3, 3))), std::invalid_argument);
    CHECK_THROWS_AS(ad::backward(a), std::invalid_argument);
    CHECK_THROWS_AS(ad::max_over_points(a, 4), std::invalid_argument);
  }

  TEST_CASE("log_softmax is stable for large logits") {
    Matrix x(1, 3);
    x << 1000, 0, -1000;
    const auto ls = ad::log_softmax(ad::Value::constant(x));
    CHECK(std::isfinite(ls.data()(0, 2)));
    CHECK(ls.data()(0, 0) == doctest::Approx(0.0));
    const auto s = ad::softmax(ad::Value::constant(x));
    CHECK(s.data().sum() == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("AdamW follows the decoupled recurrence") {
    // One step on f(p) = p^2 from p = 1 with lr = 0.1, wd = 0.
    auto p = ad::Value::parameter(Matrix::Constant(1, 1, 1.0));
    std::vector<ad::Value> ps = {p};
    ad::AdamW opt({0.1, 0.0});
    ad::backward(ad::square(p));
    opt.step(ps);
    // m = 0.1*2, v = 0.001*4, bias corrected m_hat = 2, v_hat = 4 -> step lr * 2 / (2 + eps).
    const double expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
    CHECK(p.data()(0, 0) == doctest::Approx(expected).epsilon(1e-14));
    CHECK(p.data()(0, 0) < 1.0);

    // Weight decay alone shrinks by (1 - lr * wd) when the gradient is zero.
    auto q = ad::Value::parameter(Matrix::Constant(1, 1, 2.0));
    std::vector<ad::Value> qs = {q};
    ad::AdamW decay({0.5, 0.1});
    decay.step(qs);
    CHECK(q.data()(0, 0) == doctest::Approx(2.0 * (1 - 0.05)).epsilon(1e-15));

    ad::AdamW frozen({0.0, 0.1});
    auto r = ad::Value::parameter(Matrix::Constant(2, 2, 3.0));
    std::vector<ad::Value> rs = {r};
    ad::backward(ad::sum(ad::square(r)));
    frozen.step(rs);
    CHECK(r.data() == Matrix::Constant(2, 2, 3.0));
  }

  TEST_CASE("AdamW defaults") {
    ad::AdamWOptions o;
    CHECK(o.lr == 1e-4);
    CHECK(o.weight_decay == 1e-4);
  }

  TEST_CASE("cosine_lr endpoints and monotonicity") {
    CHECK(ad::cosine_lr(0, 100, 0.5) == 0.5);
    CHECK(ad::cosine_lr(100, 100, 0.5) == doctest::Approx(0.0));
    CHECK(ad::cosine_lr(50, 100, 0.5) == doctest::Approx(0.25));
    double prev = 1e9;
    for (long i = 0; i <= 100; ++i) {
      const double v = ad::cosine_lr(i, 100, 1.0);
      CHECK(v <= prev);
      prev = v;
    }
    CHECK_THROWS(ad::cosine_lr(101, 100, 1.0));
  }
}
