// Measured property of the pooled-latent similarity: a sentence should be
// closer to its parallel partner than to an unrelated sentence. Uses the
// default VAE configuration and budget.

#include "doctest.h"
#include "regdiff/pipeline.hpp"

using namespace regdiff;

TEST_CASE("parallel partner beats an unrelated sentence on 95% of 1000 triples") {
  const RunConfig rc;
  const auto splits = generate_corpus(rc.corpus());
  const VaeModel vae = train_vae(vae_corpus(splits.train), rc.vae(), rc.vae_train(), 1);
  const auto& ex = splits.test.examples;
  Rng rng(8);
  std::uniform_int_distribution<std::size_t> pick(0, ex.size() - 1);
  std::vector<Tokens> anchors, partners, others, matched;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t a = pick(rng);
    std::size_t o = pick(rng), m = pick(rng);
    while (o == a) o = pick(rng);
    while (m == a || ex[m].src_label != ex[a].tgt_label) m = pick(rng);
    anchors.push_back(ex[a].src);
    partners.push_back(*ex[a].tgt);
    others.push_back(ex[o].src);
    matched.push_back(ex[m].src);
  }
  const auto near = semantic_similarity(anchors, partners, vae);
  const auto far = semantic_similarity(anchors, others, vae);
  const auto far_matched = semantic_similarity(anchors, matched, vae);
  int wins = 0, wins_matched = 0;
  for (std::size_t i = 0; i < near.size(); ++i) {
    wins += near[i] > far[i];
    wins_matched += near[i] > far_matched[i];
  }
  // The style-matched count controls for the style component of the latent.
  INFO("partner closer on " << wins << " of 1000 (unrelated with the partner's style: " << wins_matched << ")");
  CHECK(wins >= 950);
}
