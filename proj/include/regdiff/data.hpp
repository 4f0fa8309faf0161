#pragma once

// Two-style synthetic token corpora with a known bigram grammar.
//
// Vocabulary layout: id 0 is padding, then `markers_per_style` style-A
// markers, then the same number of style-B markers, then content tokens.
// Every content token licenses exactly `successors` next content tokens;
// each style prefers a different half of that successor list.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "regdiff/params.hpp"

namespace regdiff {

using Tokens = std::vector<int>;

enum class PairMode { kParallel, kNonParallel };

struct CorpusConfig {
  int vocab = 32;
  int seq_len = 16;
  int markers_per_style = 6;
  int markers_per_sentence = 4;
  int min_len = 10;
  int successors = 6;
  double marker_overlap = 0.0;
  PairMode mode = PairMode::kParallel;
  int train_size = 2000;
  int val_size = 200;
  int test_size = 200;
  std::uint64_t seed = 7;
  std::uint64_t grammar_seed = 1234;

  void validate() const;
  int content_count() const { return vocab - 1 - 2 * markers_per_style; }
};

struct StyledExample {
  Tokens src;
  std::optional<Tokens> tgt;
  int src_label = 0;
  int tgt_label = 0;

  friend bool operator==(const StyledExample&, const StyledExample&) = default;
};

struct Dataset {
  PairMode mode = PairMode::kParallel;
  std::vector<StyledExample> examples;

  std::size_t size() const { return examples.size(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct CorpusSplits {
  Dataset train, val, test;
};

class Grammar {
 public:
  explicit Grammar(const CorpusConfig& config);

  static constexpr int kPad = 0;
  int vocab() const { return vocab_; }
  bool is_pad(int tok) const { return tok == kPad; }
  // 0 for style A markers, 1 for style B, -1 otherwise.
  int marker_style(int tok) const;
  bool is_marker(int tok) const { return marker_style(tok) >= 0; }
  bool is_content(int tok) const { return tok > 2 * markers_ && tok < vocab_; }
  int first_marker(int style) const { return 1 + style * markers_; }
  int markers_per_style() const { return markers_; }
  int first_content() const { return 1 + 2 * markers_; }
  int content_count() const { return vocab_ - first_content(); }

  bool licensed(int from, int to) const;
  const std::vector<int>& successors(int content_token) const;
  // Fraction of content bigrams that are licensed.
  double density() const;

  // Draws the next content token under the given style's preferences.
  int next_content(int prev, int style, Rng& rng) const;

 private:
  int vocab_, markers_, max_markers_;
  std::vector<std::vector<int>> successors_;  // indexed by token id
  std::vector<std::vector<bool>> licensed_;
  friend bool grammar_validity(const Grammar&, const Tokens&);
};

CorpusSplits generate_corpus(const CorpusConfig& config);
StyledExample generate_example(const CorpusConfig& config, const Grammar& grammar, int style, Rng& rng);

// Replaces every marker with a random marker of the opposite style.
Tokens swap_style(const Grammar& grammar, const Tokens& tokens, Rng& rng);

// True iff the sentence is pad-suffixed, has 1..k+2 markers, at least one
// content token, and every adjacent pair of content tokens is licensed.
bool grammar_validity(const Grammar& grammar, const Tokens& tokens);

class DatasetFormatError : public std::runtime_error {
 public:
  DatasetFormatError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// One JSON object per line: {"src":[..],"tgt":[..],"src_label":0,"tgt_label":1}
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
// When `mode` is empty it is inferred from the first record.
Dataset load_dataset(const std::filesystem::path& path, std::optional<PairMode> mode = std::nullopt);

// {dir}/{name}.train, .val, .test
void save_splits(const CorpusSplits& splits, const std::filesystem::path& dir, const std::string& name);
CorpusSplits load_splits(const std::filesystem::path& dir, const std::string& name);

}  // namespace regdiff
