#include <cmath>

#include "doctest.h"
#include "regdiff/schedule.hpp"
#include "support.hpp"

using namespace regdiff;

TEST_CASE("linear schedule hits its endpoints") {
  const auto s = NoiseSchedule::linear(1000, 1e-4, 0.02);
  CHECK(s.steps() == 1000);
  CHECK(s.beta(1) == 1e-4);
  CHECK(s.beta(1000) == doctest::Approx(0.02).epsilon(1e-15));
  const auto two = NoiseSchedule::linear(2, 1e-4, 0.02);
  CHECK(two.beta(1) == 1e-4);
  CHECK(two.beta(2) == doctest::Approx(0.02).epsilon(1e-15));
}

TEST_CASE("cumulative products match an independent product") {
  const auto s = NoiseSchedule::linear();
  // Computed separately as prod_t (1 - beta_t) in Python double precision.
  CHECK(s.alpha_bar(500) == doctest::Approx(7.858724288178e-02).epsilon(1e-10));
  CHECK(s.alpha_bar(1000) == doctest::Approx(4.035829765376e-05).epsilon(1e-9));
  CHECK(std::abs(s.alpha_bar(1000) - 4.0e-5) < 0.1 * 4.0e-5);
  double prod = 1.0;
  for (int t = 1; t <= 1000; ++t) {
    prod *= 1.0 - s.beta(t);
    CHECK(std::abs(s.alpha_bar(t) - prod) < 1e-12);
  }
}

TEST_CASE("schedule is monotone and bounded") {
  const auto s = NoiseSchedule::linear();
  for (int t = 1; t <= s.steps(); ++t) {
    CHECK(s.beta(t) > 0.0);
    CHECK(s.beta(t) < 1.0);
    CHECK(s.alpha_bar(t) > 0.0);
    CHECK(s.alpha_bar(t) < 1.0);
    CHECK(s.sigma(t) == doctest::Approx(std::sqrt(1.0 - s.alpha_bar(t))).epsilon(1e-14));
    if (t > 1) {
      CHECK(s.beta(t) >= s.beta(t - 1));
      CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
      CHECK(s.sigma(t) > s.sigma(t - 1));
    }
  }
}

TEST_CASE("invalid schedules and steps are rejected") {
  CHECK_THROWS_AS(NoiseSchedule::linear(1), std::invalid_argument);
  CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.0, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.03, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(NoiseSchedule::linear(10, 1e-4, 1.0), std::invalid_argument);
  const auto s = NoiseSchedule::linear(10);
  const Tensor x({2, 3});
  CHECK_THROWS(diffuse(s, x, x, 0));
  CHECK_THROWS(diffuse(s, x, x, 11));
  CHECK_THROWS_AS(diffuse(s, x, Tensor({3, 2}), 1), ShapeError);
}

TEST_CASE("closed forms at the trivial corners") {
  const auto s = NoiseSchedule::linear();
  std::mt19937_64 rng(5);
  const Tensor x0 = testing::random_tensor({4, 3}, rng), eps = testing::random_tensor({4, 3}, rng);
  const Tensor zero({4, 3});
  for (int t : {1, 250, 1000}) {
    const Tensor xt = diffuse(s, zero, eps, t);
    const Tensor v0 = v_target(s, zero, eps, t);
    const Tensor ve = v_target(s, x0, zero, t);
    const Tensor r = recover_x0(s, zero, x0, t);
    for (std::size_t i = 0; i < eps.size(); ++i) {
      CHECK(xt[i] == s.sigma(t) * eps[i]);
      CHECK(v0[i] == s.sqrt_alpha_bar(t) * eps[i]);
      CHECK(ve[i] == -s.sigma(t) * x0[i]);
      CHECK(r[i] == -s.sigma(t) * x0[i]);
    }
  }
  // t = 1: |x_t - x0| <= sqrt(beta_1) |eps| + (1 - sqrt(abar_1)) |x0|, the second term O(beta_1)
  const Tensor x1 = diffuse(s, x0, eps, 1);
  double d2 = 0, e2 = 0, x2 = 0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    d2 += (x1[i] - x0[i]) * (x1[i] - x0[i]);
    e2 += eps[i] * eps[i];
    x2 += x0[i] * x0[i];
  }
  CHECK(std::sqrt(d2) <= std::sqrt(s.beta(1)) * std::sqrt(e2) + (1.0 - s.sqrt_alpha_bar(1)) * std::sqrt(x2) + 1e-15);
  CHECK(1.0 - s.sqrt_alpha_bar(1) < s.beta(1));
}

TEST_CASE("parameterization round trips over random points") {
  const auto s = NoiseSchedule::linear();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const int t = static_cast<int>(testing::pick(rng, 1, 1000));
    const Tensor x0 = testing::random_tensor({3, 16, 4}, rng), eps = testing::random_tensor({3, 16, 4}, rng);
    const Tensor xt = diffuse(s, x0, eps, t);
    const Tensor v = v_target(s, x0, eps, t);
    const Tensor x0r = recover_x0(s, xt, v, t), epsr = recover_eps(s, xt, v, t);
    const Tensor vr = v_from_eps(s, xt, eps, t);
    const Tensor rv = testing::random_tensor({3, 16, 4}, rng);
    const Tensor a = recover_x0(s, xt, rv, t), b = recover_eps(s, xt, rv, t);
    for (std::size_t i = 0; i < x0.size(); ++i) {
      CHECK(std::abs(x0r[i] - x0[i]) < 1e-10);
      CHECK(std::abs(epsr[i] - eps[i]) < 1e-10);
      CHECK(std::abs(vr[i] - v[i]) < 1e-10);
      CHECK(std::abs(s.sqrt_alpha_bar(t) * a[i] + s.sigma(t) * b[i] - xt[i]) < 1e-10);
    }
  }
}
