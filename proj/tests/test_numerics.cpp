#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "hide/numerics.hpp"

using namespace hide;

namespace {

double sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

TEST_CASE("softmax: analytic values and stability") {
  auto p = softmax(std::vector<double>{0.0, 0.0});
  CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(0.5).epsilon(1e-15));

  p = softmax(std::vector<double>{std::log(2.0), 0.0});
  CHECK(std::abs(p[0] - 2.0 / 3.0) < 1e-15);
  CHECK(std::abs(p[1] - 1.0 / 3.0) < 1e-15);

  p = softmax(std::vector<double>{1000.0, 1000.0});
  CHECK(p[0] == 0.5);
  CHECK(p[1] == 0.5);

  CHECK_THROWS_AS(softmax(std::vector<double>{}), DimensionError);
}

TEST_CASE("softmax: sums to one and ignores additive shifts") {
  Rng rng(11);
  std::normal_distribution<double> n(0.0, 5.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(1 + trial % 9);
    for (auto& v : logits) v = n(rng);
    const auto p = softmax(logits);
    CHECK(std::abs(sum(p) - 1.0) <= 1e-9);
    for (double v : p) CHECK((v > 0.0 && v <= 1.0));

    std::vector<double> shifted = logits;
    for (auto& v : shifted) v += 37.25;
    const auto q = softmax(shifted);
    CHECK(argmax(p) == argmax(q));
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p[i] - q[i]) < 1e-12);
  }
}

TEST_CASE("cross_entropy: uniform and certain cases") {
  CHECK(cross_entropy(std::vector<double>{0.0, 0.0}, 0) == doctest::Approx(std::log(2.0)));
  CHECK(std::abs(cross_entropy(std::vector<double>{0.0, 0.0}, 0) - 0.693147) < 1e-6);
  for (std::size_t t = 0; t < 4; ++t) {
    CHECK(cross_entropy(std::vector<double>(4, 1.5), t) == doctest::Approx(std::log(4.0)));
  }
  // Probabilities [1, 0] to double precision.
  CHECK(cross_entropy(std::vector<double>{0.0, -1e4}, 0) == 0.0);
  CHECK_THROWS_AS(cross_entropy(std::vector<double>{0.0, 1.0}, 2), IndexError);
}

TEST_CASE("cross_entropy is non-negative") {
  Rng rng(5);
  std::uniform_real_distribution<double> u(-20.0, 20.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> logits(6);
    for (auto& v : logits) v = u(rng);
    CHECK(cross_entropy(logits, trial % 6) >= 0.0);
  }
}

TEST_CASE("argmax ties resolve to the lowest index") {
  CHECK(argmax(std::vector<double>{1.0, 3.0, 3.0, 2.0}) == 1);
  CHECK(argmax(std::vector<double>{0.0, 0.0}) == 0);
  CHECK_THROWS_AS(argmax(std::vector<double>{}), DimensionError);
}

TEST_CASE("matmul family agrees with hand results") {
  Tensor2 a(2, 3);
  a.data = {1, 2, 3, 4, 5, 6};
  Tensor2 b(3, 2);
  b.data = {7, 8, 9, 10, 11, 12};
  const Tensor2 c = matmul(a, b);
  CHECK(c.data == std::vector<double>{58, 64, 139, 154});

  Tensor2 at(3, 2);
  at.data = {1, 4, 2, 5, 3, 6};
  CHECK(matmul_tn(at, b) == c);

  Tensor2 bt(2, 3);
  bt.data = {7, 9, 11, 8, 10, 12};
  CHECK(matmul_nt(a, bt) == c);

  CHECK_THROWS_AS(matmul(a, a), DimensionError);
}

TEST_CASE("adam_step") {
  SUBCASE("zero gradient is a fixed point") {
    Tensor2 p(2, 2);
    p.data = {1.0, -2.0, 3.0, 0.5};
    const Tensor2 before = p;
    AdamState st = AdamState::with_learning_rate(0.1);
    GradBundle g;
    g.grads[0] = Tensor2(2, 2);
    Tensor2* params[] = {&p};
    adam_step(st, params, g);
    CHECK(p == before);
    CHECK(st.step == 1);
  }
  SUBCASE("first step with unit gradient moves by the learning rate") {
    Tensor2 p(1, 1, 2.0);
    AdamState st = AdamState::with_learning_rate(0.1);
    GradBundle g;
    g.grads[0] = Tensor2(1, 1, 1.0);
    Tensor2* params[] = {&p};
    adam_step(st, params, g);
    CHECK(p(0, 0) == doctest::Approx(1.9).epsilon(1e-6));
  }
  SUBCASE("deterministic") {
    auto run = [] {
      Tensor2 p(1, 3);
      p.data = {0.1, 0.2, 0.3};
      AdamState st = AdamState::with_learning_rate(0.01);
      Tensor2* params[] = {&p};
      for (int i = 0; i < 5; ++i) {
        GradBundle g;
        g.grads[0] = Tensor2(1, 3);
        g.grads[0].data = {0.5 * i, -1.0, 3.0 / (i + 1)};
        adam_step(st, params, g);
      }
      return p;
    };
    const Tensor2 a = run();
    const Tensor2 b = run();
    CHECK(a == b);
  }
  SUBCASE("step counter increases by one per update") {
    Tensor2 p(1, 1);
    AdamState st;
    Tensor2* params[] = {&p};
    for (std::uint64_t i = 1; i <= 4; ++i) {
      GradBundle g;
      g.grads[0] = Tensor2(1, 1, 0.3);
      adam_step(st, params, g);
      CHECK(st.step == i);
    }
  }
  SUBCASE("shape mismatch") {
    Tensor2 p(2, 2);
    AdamState st;
    GradBundle g;
    g.grads[0] = Tensor2(1, 4);
    Tensor2* params[] = {&p};
    CHECK_THROWS_AS(adam_step(st, params, g), DimensionError);
  }
}

TEST_CASE("finite_diff_check") {
  SUBCASE("quadratic") {
    const std::vector<double> x{3.0};
    const std::vector<double> g{6.0};
    const double err = finite_diff_check([](std::span<const double> p) { return p[0] * p[0]; }, x, g);
    CHECK(err < 1e-6);
  }
  SUBCASE("constant loss") {
    const std::vector<double> x{1.0, -2.0};
    const std::vector<double> g{0.0, 0.0};
    CHECK(finite_diff_check([](std::span<const double>) { return 4.0; }, x, g) < 1e-12);
  }
  SUBCASE("cross entropy over random logits") {
    Rng rng(3);
    std::normal_distribution<double> n(0.0, 2.0);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<double> logits(5);
      for (auto& v : logits) v = n(rng);
      const std::size_t target = trial % 5;
      const auto grad = cross_entropy_grad(logits, target);
      const double err = finite_diff_check(
          [&](std::span<const double> p) { return cross_entropy(p, target); }, logits, grad);
      CHECK(err < 1e-4);
    }
  }
  SUBCASE("errors") {
    const std::vector<double> x{1.0};
    const std::vector<double> g{0.0};
    CHECK_THROWS_AS(finite_diff_check(
                        [](std::span<const double>) {
                          return std::numeric_limits<double>::quiet_NaN();
                        },
                        x, g),
                    NumericError);
    FiniteDiffOptions bad;
    bad.epsilon = 1e-1;
    CHECK_THROWS_AS(finite_diff_check([](std::span<const double>) { return 0.0; }, x, g, bad),
                    ConfigError);
  }
}

TEST_CASE("flatten and unflatten round trip") {
  Tensor2 a(2, 2);
  a.data = {1, 2, 3, 4};
  Tensor2 b(1, 3);
  b.data = {5, 6, 7};
  const Tensor2* in[] = {&a, &b};
  const auto flat = flatten(in);
  CHECK(flat == std::vector<double>{1, 2, 3, 4, 5, 6, 7});
  Tensor2 a2(2, 2), b2(1, 3);
  Tensor2* out[] = {&a2, &b2};
  unflatten(flat, out);
  CHECK(a2 == a);
  CHECK(b2 == b);
  CHECK_THROWS_AS(unflatten(std::vector<double>(6), out), DimensionError);
}
