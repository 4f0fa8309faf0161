#include <cmath>
#include <numeric>

#include "doctest.h"
#include "gradcheck_cases.hpp"
#include "regdiff/vae.hpp"

using namespace regdiff;

namespace {

std::vector<Tokens> random_sentences(std::size_t n, const VaeConfig& cfg, std::mt19937_64& rng) {
  std::vector<Tokens> out(n, Tokens(static_cast<std::size_t>(cfg.seq_len)));
  for (auto& t : out)
    for (auto& tok : t) tok = static_cast<int>(testing::pick(rng, 0, static_cast<std::size_t>(cfg.vocab) - 1));
  return out;
}

}  // namespace

TEST_CASE("encoding is deterministic and finite, padding included") {
  const VaeConfig cfg;
  const VaeModel m = VaeModel::init(cfg, 3);
  std::mt19937_64 rng(1);
  auto batch = random_sentences(2, cfg, rng);
  batch.push_back(Tokens(16, 0));
  batch[1] = batch[0];
  const auto [mu, lv] = m.encode(batch);
  CHECK(mu.shape() == Shape{3, 16, 16});
  for (std::size_t i = 0; i < 16 * 16; ++i) {
    CHECK(mu[i] == mu[16 * 16 + i]);
    CHECK(lv[i] == lv[16 * 16 + i]);
  }
  for (std::size_t i = 0; i < mu.size(); ++i) {
    CHECK(std::isfinite(mu[i]));
    CHECK(lv[i] >= kLogvarMin);
    CHECK(lv[i] <= kLogvarMax);
  }
  std::vector<Tokens> bad{Tokens(16, cfg.vocab)};
  CHECK_THROWS(m.encode(bad));
}

TEST_CASE("reparameterization corners and Monte Carlo mean") {
  const Tensor mu({1, 2}, {0.7, -1.2}), lv({1, 2}, {0.0, std::log(4.0)});
  CHECK(reparameterize(mu, lv, Tensor({1, 2})) == mu);
  const Tensor n({1, 2}, {0.5, -0.25});
  const Tensor z = reparameterize(mu, Tensor({1, 2}), n);
  CHECK(z[0] == 0.7 + 0.5);
  CHECK(z[1] == -1.2 - 0.25);
  CHECK_THROWS_AS(reparameterize(mu, lv, Tensor({2, 1})), ShapeError);

  constexpr int kDraws = 100000;
  Rng rng(17);
  const Tensor noise = standard_normal({kDraws, 2}, rng);
  Tensor mus({kDraws, 2}), lvs({kDraws, 2});
  for (std::size_t i = 0; i < kDraws; ++i)
    for (std::size_t d = 0; d < 2; ++d) {
      mus.at(i, d) = mu[d];
      lvs.at(i, d) = lv[d];
    }
  const Tensor zs = reparameterize(mus, lvs, noise);
  for (std::size_t d = 0; d < 2; ++d) {
    double mean = 0;
    for (std::size_t i = 0; i < kDraws; ++i) mean += zs.at(i, d);
    mean /= kDraws;
    const double sd = std::exp(0.5 * lv[d]);
    CHECK(std::abs(mean - mu[d]) < 3.0 * sd / std::sqrt(static_cast<double>(kDraws)));
  }
}

TEST_CASE("pool averages the sequence axis") {
  CHECK(pool(Tensor({1, 2, 2}, {1, 2, 3, 4})) == Tensor({1, 2}, {2, 3}));
  std::mt19937_64 rng(2);
  const Tensor z = testing::random_tensor({2, 5, 3}, rng);
  const Tensor p = pool(z);
  Tensor scaled = z;
  for (double& v : scaled.data()) v *= -2.5;
  const Tensor ps = pool(scaled);
  Tensor rev({2, 5, 3});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t s = 0; s < 5; ++s)
      for (std::size_t d = 0; d < 3; ++d) rev.data()[(b * 5 + s) * 3 + d] = z.data()[(b * 5 + 4 - s) * 3 + d];
  const Tensor pr = pool(rev);
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(ps[i] == doctest::Approx(-2.5 * p[i]).epsilon(1e-14));
    CHECK(pr[i] == doctest::Approx(p[i]).epsilon(1e-14));
  }
}

TEST_CASE("a single refinement step is a direct decode") {
  const VaeConfig cfg;
  const VaeModel m = VaeModel::init(cfg, 4);
  Rng rng(4);
  const Tensor z = standard_normal({2, 16, 16}, rng);
  Graph g(false);
  ParamBinder p(g, m.params(), false);
  Var zr = g.constant(z.reshaped({32, 16}));
  const std::vector<int> masked(32, m.mask_token());
  CHECK(m.decode_nar(p, zr, 2, 1).value() == m.decode_step(p, zr, masked, 2).value());
  CHECK(m.decode_logits(z, 5) == m.decode_logits(z, 5));
  CHECK_THROWS_AS(m.decode_logits(z, 0), std::invalid_argument);
  CHECK_THROWS_AS(m.decode_logits(z, 11), std::invalid_argument);
}

TEST_CASE("classifier probabilities") {
  const VaeConfig cfg;
  VaeModel m = VaeModel::init(cfg, 5);
  Rng rng(5);
  const Tensor probs = m.classify(standard_normal({4, 16}, rng));
  for (std::size_t r = 0; r < 4; ++r) CHECK(std::abs(probs.at(r, 0) + probs.at(r, 1) - 1.0) < 1e-12);
  auto& ps = m.mutable_params();
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (ps.name(i).rfind("cls.", 0) == 0)
      for (double& v : ps.value(i).data()) v = 0.0;
  const Tensor flat = m.classify(standard_normal({3, 16}, rng));
  for (double v : flat.data()) CHECK(v == 0.5);
}

TEST_CASE("kl term at analytic points and beta = 0") {
  Graph g;
  CHECK(kl_diag_gaussian(g.constant(Tensor({3, 4}, 1.0)), g.constant(Tensor({3, 4}, 0.0))).value().item() ==
        doctest::Approx(0.5 * 4));
  const VaeConfig cfg = testing::tiny_vae_config();
  const VaeModel m = VaeModel::init(cfg, 6);
  std::mt19937_64 rng(6);
  const auto toks = random_sentences(3, cfg, rng);
  const std::vector<int> labels{0, 1, 1};
  const Tensor noise = testing::random_tensor({12, 2}, rng);
  Graph h(false);
  ParamBinder p(h, m.params(), false);
  const auto t = vae_loss(m, p, toks, labels, VaeLossWeights{0.3, 0.0}, noise);
  CHECK(t.kl.value().item() >= 0.0);
  CHECK(t.total.value().item() == t.recon.value().item() + 0.3 * t.kl.value().item());
}

TEST_CASE("vae objective gradient matches finite differences") {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) worst = std::max(worst, testing::vae_loss_grad_error(seed));
  INFO("worst relative error " << worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("training: zero epochs, determinism, freezing and progress") {
  VaeConfig cfg;
  cfg.model_dim = 16;
  cfg.ffn_dim = 32;
  cfg.cls_hidden = 16;
  cfg.latent_dim = 8;
  CorpusConfig cc;
  cc.train_size = 200;
  cc.val_size = cc.test_size = 0;
  const auto corpus = vae_corpus(generate_corpus(cc).train);

  VaeTrainConfig zero;
  zero.epochs = 0;
  const VaeModel z0 = train_vae(corpus, cfg, zero, 9);
  CHECK(z0.params() == VaeModel::init(cfg, 9).params());
  CHECK(z0.frozen());
  VaeModel copy = z0;
  CHECK_THROWS_AS(copy.mutable_params(), FrozenModelError);

  VaeTrainConfig tc;
  tc.epochs = 4;
  std::vector<double> totals;
  const VaeModel a = train_vae(corpus, cfg, tc, 9, [&](const VaeEpochLog& l) { totals.push_back(l.total); });
  const VaeModel b = train_vae(corpus, cfg, tc, 9);
  CHECK(a.params().checksum() == b.params().checksum());
  REQUIRE(totals.size() == 4);
  CHECK(totals.back() < totals.front());
  CHECK_THROWS_AS(train_vae({}, cfg, tc, 9), std::invalid_argument);
}
