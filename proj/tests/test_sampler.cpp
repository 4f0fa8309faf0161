#include <cmath>

#include "doctest.h"
#include "gradcheck_cases.hpp"
#include "regdiff/sampler.hpp"

using namespace regdiff;

namespace {

// Velocity that points every state at a fixed clean latent.
VelocityFn oracle_velocity(const NoiseSchedule& s, const Tensor& x0) {
  return [&s, x0](const Tensor& z, int t) {
    Tensor v(z.shape());
    const double a = s.sqrt_alpha_bar(t), sg = s.sigma(t);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double eps = (z[i] - a * x0[i]) / sg;
      v[i] = a * eps - sg * x0[i];
    }
    return v;
  };
}

DenoiserConfig small_denoiser() {
  DenoiserConfig c;
  c.latent_dim = 4;
  c.seq_len = 6;
  c.hidden = 16;
  c.heads = 2;
  c.layers = 1;
  c.ffn_dim = 32;
  return c;
}

VaeModel small_classifier() {
  VaeConfig c;
  c.latent_dim = 4;
  c.seq_len = 6;
  c.model_dim = 8;
  c.ffn_dim = 16;
  c.cls_hidden = 8;
  c.layers = 1;
  VaeModel m = VaeModel::init(c, 12);
  m.freeze();
  return m;
}

}  // namespace

TEST_CASE("cfg combination") {
  const Tensor c({1}, {1.0}), u({1}, {0.5});
  CHECK(cfg_combine(c, u, 2.0)[0] == 2.0);
  CHECK(cfg_combine(c, u, 0.0) == c);
  std::mt19937_64 rng(1);
  const Tensor vc = testing::random_tensor({2, 3, 4}, rng);
  for (double g : {0.5, 2.0, 7.0}) {
    const Tensor same = cfg_combine(vc, vc, g);
    for (std::size_t i = 0; i < vc.size(); ++i) CHECK(same[i] == doctest::Approx(vc[i]).epsilon(1e-14));
  }
  CHECK_THROWS_AS(cfg_combine(vc, Tensor({2, 4, 3}), 1.0), ShapeError);
}

TEST_CASE("combining in v space equals combining in eps space") {
  const auto s = NoiseSchedule::linear();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const int t = static_cast<int>(testing::pick(rng, 1, 1000));
    const double gamma = std::uniform_real_distribution<double>(0.0, 10.0)(rng);
    const Tensor z = testing::random_tensor({2, 6, 4}, rng), vc = testing::random_tensor({2, 6, 4}, rng),
                 vu = testing::random_tensor({2, 6, 4}, rng);
    const Tensor via_v = recover_eps(s, z, cfg_combine(vc, vu, gamma), t);
    const Tensor via_eps = cfg_combine(recover_eps(s, z, vc, t), recover_eps(s, z, vu, t), gamma);
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(std::abs(via_v[i] - via_eps[i]) < 1e-10);
  }
}

TEST_CASE("classifier guidance adjustment") {
  std::mt19937_64 rng(2);
  const Tensor eps = testing::random_tensor({2, 3}, rng), g = testing::random_tensor({2, 3}, rng);
  CHECK(cg_adjust(eps, g, 0.0, 0.7) == eps);
  CHECK(cg_adjust(eps, Tensor({2, 3}), 3.0, 0.7) == eps);
  const Tensor out = cg_adjust(eps, g, 2.0, 0.5);
  for (std::size_t i = 0; i < eps.size(); ++i) CHECK(out[i] == doctest::Approx(eps[i] - g[i]).epsilon(1e-14));
  Tensor bad = g;
  bad[0] = std::nan("");
  CHECK_THROWS_AS(cg_adjust(eps, bad, 1.0, 0.5), NumericError);
}

TEST_CASE("classifier log-probability gradient matches finite differences") {
  const VaeModel cls = small_classifier();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor x = testing::random_tensor({3, 6, 4}, rng, 2.0);
    const std::vector<int> labels{static_cast<int>(seed % 2), 1, 0};
    const Tensor analytic = classifier_grad_logp(cls, x, labels);
    // sum_b log p(label_b | pool(x_b)) = -B * mean CE
    worst = std::max(worst, grad_check(
                                [&](Graph& g, Var v) {
                                  ParamBinder p(g, cls.params(), false);
                                  Var logits = cls.classifier_logits(p, pool(reshape(v, {18, 4}), 3));
                                  return scale(cross_entropy(logits, labels), -3.0);
                                },
                                x));
    // The returned tensor is exactly that analytic gradient.
    Graph g;
    Var v = g.leaf(x);
    ParamBinder p(g, cls.params(), false);
    g.backward(scale(cross_entropy(cls.classifier_logits(p, pool(reshape(v, {18, 4}), 3)), labels), -3.0));
    CHECK(g.grad(v) == analytic);
  }
  INFO("worst relative error " << worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("ddim timesteps") {
  CHECK(ddim_timesteps(10, 4) == std::vector<int>{10, 7, 4, 1});
  CHECK(ddim_timesteps(1000, 2) == std::vector<int>{1000, 1});
  CHECK(ddim_timesteps(1000, 1) == std::vector<int>{1000});
  const auto all = ddim_timesteps(1000, 1000);
  for (int i = 0; i < 1000; ++i) CHECK(all[static_cast<std::size_t>(i)] == 1000 - i);
  const auto fifty = ddim_timesteps(1000, 50);
  CHECK(fifty.front() == 1000);
  CHECK(fifty.back() == 1);
  CHECK(std::is_sorted(fifty.rbegin(), fifty.rend()));
  CHECK_THROWS_AS(ddim_timesteps(1000, 0), std::invalid_argument);
  CHECK_THROWS_AS(ddim_timesteps(1000, 1001), std::invalid_argument);
}

TEST_CASE("ddim step boundaries") {
  const auto s = NoiseSchedule::linear();
  std::mt19937_64 rng(3);
  const Tensor z = testing::random_tensor({1, 6, 4}, rng), v = testing::random_tensor({1, 6, 4}, rng);
  CHECK(ddim_step(z, v, 400, 0, s) == recover_x0(s, z, v, 400));
  CHECK(ddim_step(z, v, 400, 200, s) == ddim_step(z, v, 400, 200, s));
  CHECK_THROWS_AS(ddim_step(z, v, 400, 400, s), std::invalid_argument);
  CHECK_THROWS_AS(ddim_step(z, v, 400, 500, s), std::invalid_argument);
}

TEST_CASE("an oracle velocity recovers the clean latent for any step count") {
  const auto s = NoiseSchedule::linear();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor x0 = testing::random_tensor({2, 6, 4}, rng);
    const std::vector<std::uint64_t> seeds{seed, seed + 100};
    for (int n : {1, 5, 50, 1000}) {
      const Tensor out = ddim_sample(initial_noise(seeds, 6, 4), oracle_velocity(s, x0), s, n);
      for (std::size_t i = 0; i < x0.size(); ++i) CHECK(std::abs(out[i] - x0[i]) < 1e-8);
    }
  }
}

TEST_CASE("ddim with every step follows the full-schedule trajectory") {
  const auto s = NoiseSchedule::linear(100);
  std::mt19937_64 rng(4);
  const Tensor a = testing::random_tensor({1, 6, 4}, rng);
  // A velocity field that is not an oracle, so the path depends on every step.
  const VelocityFn fn = [&a](const Tensor& z, int t) {
    Tensor v = z;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(z[i] + a[i] * t / 100.0);
    return v;
  };
  const std::vector<std::uint64_t> seeds{9};
  Tensor z = initial_noise(seeds, 6, 4);
  const Tensor sampled = ddim_sample(z, fn, s, 100);
  for (int t = 100; t >= 1; --t) z = ddim_step(z, fn(z, t), t, t - 1, s);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(std::abs(sampled[i] - z[i]) < 1e-8);
}

TEST_CASE("non-finite states report the step") {
  const auto s = NoiseSchedule::linear();
  const std::vector<std::uint64_t> seeds{1};
  const VelocityFn bad = [](const Tensor& z, int t) {
    Tensor v = z;
    if (t < 600) v[0] = std::numeric_limits<double>::infinity();
    return v;
  };
  try {
    ddim_sample(initial_noise(seeds, 6, 4), bad, s, 10);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    // timesteps 1000, 889, 778, 667, 556, ...: the first one below 600 is index 4
    CHECK(std::string(e.what()).find("sampling step 4 (t=556)") != std::string::npos);
  }
}

TEST_CASE("initial noise is per-row seeded") {
  const std::vector<std::uint64_t> ab{1, 2}, ba{2, 1};
  const Tensor x = initial_noise(ab, 6, 4), y = initial_noise(ba, 6, 4);
  for (std::size_t i = 0; i < 24; ++i) {
    CHECK(x[i] == y[24 + i]);
    CHECK(x[24 + i] == y[i]);
  }
}

TEST_CASE("guided sampling with a model") {
  const auto s = NoiseSchedule::linear();
  const DenoiserModel m = DenoiserModel::init(small_denoiser(), 5);
  const VaeModel cls = small_classifier();
  Rng rng(6);
  const std::vector<Condition> conds{Condition::source(standard_normal({6, 4}, rng), 0),
                                     Condition::source(standard_normal({6, 4}, rng), 1)};
  const std::vector<std::uint64_t> seeds{11, 12};
  GuidanceConfig g;
  g.ddim_steps = 10;

  SUBCASE("fixed seeds reproduce bitwise") {
    for (GuidanceMode mode : {GuidanceMode::kCfg, GuidanceMode::kCg, GuidanceMode::kNone}) {
      g.mode = mode;
      CHECK(sample(m, &cls, conds, s, g, seeds) == sample(m, &cls, conds, s, g, seeds));
    }
  }
  SUBCASE("gamma = 0 cfg is the conditional trajectory") {
    g.gamma = 0.0;
    const Tensor cfg = sample(m, nullptr, conds, s, g, seeds);
    g.mode = GuidanceMode::kNone;
    const Tensor none = sample(m, nullptr, conds, s, g, seeds);
    for (std::size_t i = 0; i < cfg.size(); ++i) CHECK(std::abs(cfg[i] - none[i]) < 1e-10);
    g.mode = GuidanceMode::kCg;
    const Tensor cg = sample(m, &cls, conds, s, g, seeds);
    for (std::size_t i = 0; i < cfg.size(); ++i) CHECK(std::abs(cg[i] - none[i]) < 1e-10);
  }
  SUBCASE("cg leaves the classifier alone and needs it") {
    g.mode = GuidanceMode::kCg;
    const auto sum = cls.params().checksum();
    SamplingStats stats;
    sample(m, &cls, conds, s, g, seeds, &stats);
    CHECK(cls.params().checksum() == sum);
    CHECK(stats.steps == 10);
    CHECK(stats.seconds >= 0.0);
    CHECK_THROWS_AS(sample(m, nullptr, conds, s, g, seeds), std::invalid_argument);
  }
  SUBCASE("invalid requests") {
    const std::vector<Condition> null{Condition::null(), Condition::null()};
    CHECK_THROWS_AS(sample(m, nullptr, null, s, g, seeds), std::invalid_argument);
    const std::vector<std::uint64_t> one{1};
    CHECK_THROWS_AS(sample(m, nullptr, conds, s, g, one), std::invalid_argument);
    g.ddim_steps = 0;
    CHECK_THROWS_AS(sample(m, nullptr, conds, s, g, seeds), std::invalid_argument);
    g.ddim_steps = 10;
    g.eta = 0.5;
    CHECK_THROWS_AS(sample(m, nullptr, conds, s, g, seeds), std::invalid_argument);
  }
}

TEST_CASE("guidance mode names") {
  for (GuidanceMode mode : {GuidanceMode::kCfg, GuidanceMode::kCg, GuidanceMode::kNone})
    CHECK(parse_guidance_mode(to_string(mode)) == mode);
  CHECK_THROWS_AS(parse_guidance_mode("ddpm"), std::invalid_argument);
}
