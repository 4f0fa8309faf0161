#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "regdiff/data.hpp"

using namespace regdiff;
namespace fs = std::filesystem;

namespace {

CorpusConfig small(PairMode mode) {
  CorpusConfig c;
  c.mode = mode;
  c.train_size = 300;
  c.val_size = 50;
  c.test_size = 50;
  return c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("regdiff_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::multiset<int> content_of(const Grammar& g, const Tokens& t) {
  std::multiset<int> out;
  for (int tok : t)
    if (g.is_content(tok)) out.insert(tok);
  return out;
}

}  // namespace

TEST_CASE("same seed gives the same corpus") {
  const auto a = generate_corpus(small(PairMode::kParallel));
  const auto b = generate_corpus(small(PairMode::kParallel));
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.test == b.test);
  auto other = small(PairMode::kParallel);
  other.seed = 8;
  CHECK_FALSE(generate_corpus(other).train == a.train);
}

TEST_CASE("parallel pairs share content and swap every marker") {
  const auto cfg = small(PairMode::kParallel);
  const Grammar g(cfg);
  const auto splits = generate_corpus(cfg);
  for (const auto& ex : splits.train.examples) {
    REQUIRE(ex.tgt);
    CHECK(ex.tgt_label == 1 - ex.src_label);
    CHECK(content_of(g, ex.src) == content_of(g, *ex.tgt));
    REQUIRE(ex.src.size() == ex.tgt->size());
    int markers = 0;
    for (std::size_t i = 0; i < ex.src.size(); ++i) {
      if (g.is_marker(ex.src[i])) {
        ++markers;
        CHECK(g.marker_style(ex.src[i]) == ex.src_label);
        CHECK(g.marker_style((*ex.tgt)[i]) == ex.tgt_label);
      } else {
        CHECK(ex.src[i] == (*ex.tgt)[i]);
      }
    }
    CHECK(markers == cfg.markers_per_sentence);
  }
}

TEST_CASE("swapping twice restores labels, marker count and content") {
  const auto cfg = small(PairMode::kParallel);
  const Grammar g(cfg);
  Rng rng(3);
  for (const auto& ex : generate_corpus(cfg).test.examples) {
    const Tokens back = swap_style(g, swap_style(g, ex.src, rng), rng);
    int m0 = 0, m1 = 0;
    for (std::size_t i = 0; i < back.size(); ++i) {
      m0 += g.is_marker(ex.src[i]);
      m1 += g.is_marker(back[i]);
      if (g.is_marker(back[i]))
        CHECK(g.marker_style(back[i]) == ex.src_label);
      else
        CHECK(back[i] == ex.src[i]);
    }
    CHECK(m0 == m1);
  }
}

TEST_CASE("non-parallel corpora are unpaired and balanced") {
  const auto splits = generate_corpus(small(PairMode::kNonParallel));
  int counts[2] = {0, 0};
  for (const auto& ex : splits.train.examples) {
    CHECK_FALSE(ex.tgt);
    ++counts[ex.src_label];
  }
  CHECK(counts[0] == counts[1]);
}

TEST_CASE("splits are disjoint and every sentence is valid") {
  const auto cfg = small(PairMode::kParallel);
  const Grammar g(cfg);
  const auto splits = generate_corpus(cfg);
  std::set<Tokens> seen;
  std::size_t total = 0;
  for (const Dataset* d : {&splits.train, &splits.val, &splits.test})
    for (const auto& ex : d->examples) {
      seen.insert(ex.src);
      ++total;
      CHECK(ex.src.size() == static_cast<std::size_t>(cfg.seq_len));
      CHECK(grammar_validity(g, ex.src));
      CHECK(grammar_validity(g, *ex.tgt));
    }
  CHECK(seen.size() == total);
}

TEST_CASE("infeasible configs are rejected") {
  CorpusConfig c;
  c.markers_per_sentence = c.seq_len;
  CHECK_THROWS_AS(generate_corpus(c), std::invalid_argument);
}

TEST_CASE("validity rejects all-pad and malformed sequences") {
  const Grammar g{CorpusConfig{}};
  CHECK_FALSE(grammar_validity(g, Tokens(16, 0)));
  CHECK_FALSE(grammar_validity(g, Tokens{}));
  const int c = g.first_content();
  CHECK_FALSE(grammar_validity(g, Tokens{c, 0, c}));  // pad inside the sentence
  CHECK_FALSE(grammar_validity(g, Tokens{c}));        // no marker
  CHECK_FALSE(grammar_validity(g, Tokens{1, 2}));     // no content
  CHECK_FALSE(grammar_validity(g, Tokens(8, 1)));     // too many markers
}

TEST_CASE("licensed bigram density is successors over content count") {
  const Grammar g{CorpusConfig{}};
  CHECK(g.density() == doctest::Approx(6.0 / 19.0).epsilon(1e-12));
}

TEST_CASE("uniformly random sequences are valid at the closed-form rate") {
  // Tokens uniform over 1..31 (no pad). With p_m = 12/31 markers, p_c = 19/31
  // content and bigram density 6/19, the chance of validity at length L is
  // sum_{m=1}^{min(6, L-1)} C(L, m) p_m^m p_c^(L-m) (6/19)^(L-m-1).
  // Reference values computed separately in Python.
  const std::map<int, double> expected{{3, 0.413279178275}, {4, 0.284407176448}, {5, 0.180621493107},
                                       {16, 8.429707980849e-06}};
  const Grammar g{CorpusConfig{}};
  Rng rng(11);
  std::uniform_int_distribution<int> tok(1, 31);
  for (const auto& [len, p] : expected) {
    constexpr int kTrials = 40000;
    int ok = 0;
    for (int i = 0; i < kTrials; ++i) {
      Tokens t(static_cast<std::size_t>(len));
      for (int& x : t) x = tok(rng);
      ok += grammar_validity(g, t);
    }
    INFO("length " << len);
    CHECK(std::abs(static_cast<double>(ok) / kTrials - p) < 0.05);
  }
}

TEST_CASE("datasets survive a save and load") {
  const fs::path dir = temp_dir("data_io");
  for (PairMode mode : {PairMode::kParallel, PairMode::kNonParallel}) {
    const auto splits = generate_corpus(small(mode));
    save_splits(splits, dir, "corpus");
    const auto back = load_splits(dir, "corpus");
    CHECK(back.train == splits.train);
    CHECK(back.val == splits.val);
    CHECK(back.test == splits.test);
  }
  Dataset empty;
  save_dataset(empty, dir / "empty.jsonl");
  CHECK(fs::file_size(dir / "empty.jsonl") == 0);
  CHECK(load_dataset(dir / "empty.jsonl").size() == 0);
  fs::remove_all(dir);
}

TEST_CASE("a parallel file with a missing target reports its line") {
  const fs::path dir = temp_dir("data_bad");
  {
    std::ofstream out(dir / "bad.jsonl");
    out << R"({"src":[1,13],"tgt":[7,13],"src_label":0,"tgt_label":1})" << '\n'
        << R"({"src":[1,14],"tgt":[7,14],"src_label":0,"tgt_label":1})" << '\n'
        << R"({"src":[1,15],"src_label":0,"tgt_label":1})" << '\n';
  }
  try {
    load_dataset(dir / "bad.jsonl");
    FAIL("expected a format error");
  } catch (const DatasetFormatError& e) {
    CHECK(e.line() == 3);
  }
  {
    std::ofstream out(dir / "garbled.jsonl");
    out << R"({"src":[1,13],"src_label":0,"tgt_label":1})" << '\n' << "{not json" << '\n';
  }
  try {
    load_dataset(dir / "garbled.jsonl");
    FAIL("expected a format error");
  } catch (const DatasetFormatError& e) {
    CHECK(e.line() == 2);
  }
  fs::remove_all(dir);
}
