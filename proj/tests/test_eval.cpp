#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "regdiff/eval.hpp"
#include "support.hpp"

using namespace regdiff;
namespace fs = std::filesystem;

namespace {

struct Trained {
  CorpusConfig corpus_cfg;
  CorpusSplits splits;
  Grammar grammar;
  VaeModel vae;
  OracleClassifier oracle;

  Trained()
      : corpus_cfg(make_corpus_cfg()),
        splits(generate_corpus(corpus_cfg)),
        grammar(corpus_cfg),
        vae(make_vae(splits)),
        oracle(OracleClassifier::train(vae_corpus(splits.train), corpus_cfg.vocab)) {}

  static CorpusConfig make_corpus_cfg() {
    CorpusConfig c;
    c.train_size = 300;
    c.val_size = 0;
    c.test_size = 200;
    return c;
  }
  static VaeModel make_vae(const CorpusSplits& s) {
    VaeConfig c;
    c.latent_dim = 8;
    c.model_dim = 16;
    c.ffn_dim = 32;
    c.cls_hidden = 16;
    VaeTrainConfig t;
    t.epochs = 4;
    return train_vae(vae_corpus(s.train), c, t, 3);
  }
};

const Trained& trained() {
  static const Trained t;
  return t;
}

std::vector<LabeledTokens> labeled(const Dataset& d) { return vae_corpus(d); }

}  // namespace

TEST_CASE("oracle classifier separates held-out styles") {
  const auto& t = trained();
  const auto test = labeled(t.splits.test);
  CHECK(t.oracle.accuracy(test) >= 0.99);
  std::vector<Tokens> sources, targets;
  std::vector<int> target_labels;
  for (const auto& ex : t.splits.test.examples) {
    sources.push_back(ex.src);
    targets.push_back(*ex.tgt);
    target_labels.push_back(ex.tgt_label);
  }
  // Perfect transfer scores 1, the identity map about 0.
  CHECK(style_accuracy(targets, target_labels, t.oracle) == 1.0);
  CHECK(style_accuracy(sources, target_labels, t.oracle) <= 0.01);
  CHECK_THROWS_AS(style_accuracy({}, {}, t.oracle), std::invalid_argument);
}

TEST_CASE("cosine corner cases") {
  const std::vector<double> a{1, 2, 3}, b{-2, 1, 0}, z{0, 0, 0};
  CHECK(cosine(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cosine(a, b) == 0.0);
  bool degenerate = false;
  CHECK(cosine(a, z, &degenerate) == 0.0);
  CHECK(degenerate);
}

TEST_CASE("semantic similarity on pooled means") {
  const auto& t = trained();
  const auto& ex = t.splits.test.examples;
  CHECK(std::abs(semantic_similarity(ex[0].src, ex[0].src, t.vae) - 1.0) < 1e-9);
  CHECK(semantic_similarity(ex[0].src, ex[1].src, t.vae) == semantic_similarity(ex[1].src, ex[0].src, t.vae));

}

TEST_CASE("validity rate") {
  const auto& t = trained();
  std::vector<Tokens> s;
  for (const auto& ex : t.splits.test.examples) s.push_back(ex.src);
  CHECK(validity_rate(s, t.grammar) == 1.0);
  s.push_back(Tokens(16, 0));
  CHECK(validity_rate(s, t.grammar) == doctest::Approx(200.0 / 201.0));
}

TEST_CASE("silhouette against hand computation and null cases") {
  const Tensor x({4, 2}, {0, 0, 0, 1, 10, 0, 10, 1});
  const std::vector<int> labels{0, 0, 1, 1};
  // Each point: a = 1, b = (10 + sqrt(101)) / 2; s = 1 - a / b.
  CHECK(silhouette(x, labels) == doctest::Approx(0.900248757758).epsilon(1e-10));

  const Tensor same({4, 2}, 1.0);
  CHECK(silhouette(same, labels) <= 0.0);

  std::mt19937_64 rng(4);
  const Tensor pts = testing::random_tensor({1000, 3}, rng);
  std::vector<int> random_labels(1000);
  for (auto& l : random_labels) l = static_cast<int>(testing::pick(rng, 0, 1));
  CHECK(std::abs(silhouette(pts, random_labels)) < 0.1);

  const Tensor three({3, 1}, {0, 1, 5});
  const std::vector<int> singleton{0, 0, 1};
  // Point 2 is alone and scores 0; points 0 and 1: a = 1, b = 5 and 4.
  CHECK(silhouette(three, singleton) == doctest::Approx((0.8 + 0.75 + 0.0) / 3.0));
  const std::vector<int> one_cluster{0, 0, 0};
  CHECK_THROWS_AS(silhouette(three, one_cluster), std::invalid_argument);
}

TEST_CASE("pca keeps planar point distances") {
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 5; ++rep) {
    // Points in a random 2-D plane of 5-D space, off-origin.
    const Tensor coeff = testing::random_tensor({30, 2}, rng, 3.0), basis = testing::random_tensor({2, 5}, rng);
    const Tensor shift = testing::random_tensor({5}, rng);
    Tensor x({30, 5});
    for (std::size_t i = 0; i < 30; ++i)
      for (std::size_t d = 0; d < 5; ++d)
        x.at(i, d) = coeff.at(i, 0) * basis.at(0, d) + coeff.at(i, 1) * basis.at(1, d) + shift[d];
    const Tensor p = pca_2d(x);
    CHECK(p.shape() == Shape{30, 2});
    for (std::size_t i = 0; i < 30; ++i)
      for (std::size_t j = i + 1; j < 30; ++j) {
        double dx = 0, dp = 0;
        for (std::size_t d = 0; d < 5; ++d) dx += (x.at(i, d) - x.at(j, d)) * (x.at(i, d) - x.at(j, d));
        for (std::size_t d = 0; d < 2; ++d) dp += (p.at(i, d) - p.at(j, d)) * (p.at(i, d) - p.at(j, d));
        CHECK(std::abs(std::sqrt(dx) - std::sqrt(dp)) < 1e-8);
      }
  }
}

TEST_CASE("embedding export line counts") {
  const fs::path dir = fs::temp_directory_path() / "regdiff_export";
  fs::create_directories(dir);
  std::mt19937_64 rng(7);
  const Tensor x = testing::random_tensor({12, 4}, rng);
  const std::vector<int> labels(12, 1);
  const std::vector<std::string> tags(12, "test");
  export_embeddings(x, labels, tags, dir / "emb.csv");
  std::ifstream in(dir / "emb.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 13);
  CHECK(lines[0] == "pc1,pc2,label,split");
  CHECK(lines[1].substr(lines[1].size() - 7) == ",1,test");

  std::ofstream(dir / "empty.csv") << "stale\n";
  export_embeddings(Tensor(), std::vector<int>{}, std::vector<std::string>{}, dir / "empty.csv");
  std::ifstream empty(dir / "empty.csv");
  std::string header, rest;
  std::getline(empty, header);
  CHECK(header == "pc1,pc2,label,split");
  CHECK_FALSE(std::getline(empty, rest));
  fs::remove_all(dir);
}

TEST_CASE("transfer items in both corpus modes") {
  const auto& t = trained();
  const auto items = transfer_items(t.splits.test);
  CHECK(items.size() == 400);
  CHECK(items[0].source == t.splits.test.examples[0].src);
  CHECK(items[0].reference == *t.splits.test.examples[0].tgt);
  CHECK(items[1].source == *t.splits.test.examples[0].tgt);
  CHECK(items[1].target_label == t.splits.test.examples[0].src_label);
  Dataset np;
  np.mode = PairMode::kNonParallel;
  np.examples.push_back(StyledExample{Tokens{1, 13}, std::nullopt, 1, 1});
  const auto self = transfer_items(np);
  REQUIRE(self.size() == 1);
  CHECK(self[0].reference == self[0].source);
  CHECK(self[0].target_label == 0);
}

TEST_CASE("evaluation reports are reproducible and in range") {
  const auto& t = trained();
  DenoiserConfig dc;
  dc.latent_dim = 8;
  dc.hidden = 16;
  dc.heads = 2;
  dc.layers = 1;
  dc.ffn_dim = 32;
  const DenoiserModel den = DenoiserModel::init(dc, 1);
  const NoiseSchedule sched = NoiseSchedule::linear();
  const EvalModels models{t.vae, den, t.oracle, t.grammar, sched};
  EvalOptions opt;
  opt.guidance.ddim_steps = 4;
  opt.max_per_direction = 10;
  opt.batch_size = 7;
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  SamplingStats timing;
  const EvalReport a = evaluate_run(models, t.splits.test, seeds, opt, &timing);
  const EvalReport b = evaluate_run(models, t.splits.test, seeds, opt);
  CHECK(a == b);
  CHECK(timing.steps > 0);
  a.validate();
  REQUIRE(a.per_seed.size() == 3);
  CHECK(a.per_seed[0].a_to_b.count == 10);
  CHECK(a.per_seed[0].b_to_a.count == 10);
  CHECK(a.guidance == "cfg");
  CHECK(a.silhouette >= -1.0);
  CHECK(a.silhouette <= 1.0);
  const auto m = a.mean_a_to_b();
  CHECK(m.style_accuracy ==
        doctest::Approx((a.per_seed[0].a_to_b.style_accuracy + a.per_seed[1].a_to_b.style_accuracy +
                         a.per_seed[2].a_to_b.style_accuracy) / 3.0));

  std::ostringstream os;
  a.write(os);
  CHECK(os.str().find("seeds=1,2,3\n") != std::string::npos);
  CHECK(os.str().find("mean.b_to_a.validity_rate=") != std::string::npos);

  EvalReport broken = a;
  broken.per_seed[1].b_to_a.validity_rate = 1.5;
  CHECK_THROWS_AS(broken.validate(), std::logic_error);

  opt.batch_size = 64;
  CHECK(evaluate_run(models, t.splits.test, seeds, opt) == a);
}
