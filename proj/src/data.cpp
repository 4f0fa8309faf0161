#include "regdiff/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"

namespace regdiff {

void CorpusConfig::validate() const {
  if (markers_per_sentence >= seq_len)
    throw std::invalid_argument("infeasible corpus: markers per sentence (" + std::to_string(markers_per_sentence) +
                                ") must be below sequence length (" + std::to_string(seq_len) + ")");
  if (markers_per_style < 1 || markers_per_sentence < 1) throw std::invalid_argument("need at least one marker");
  if (content_count() < 2) throw std::invalid_argument("vocabulary too small for marker sets plus content");
  if (successors < 1 || successors > content_count())
    throw std::invalid_argument("successors must be in [1, content token count]");
  if (min_len <= markers_per_sentence || min_len > seq_len)
    throw std::invalid_argument("min_len must be in (markers per sentence, seq_len]");
  if (!(marker_overlap >= 0.0 && marker_overlap < 1.0)) throw std::invalid_argument("marker_overlap must be in [0, 1)");
  if (train_size < 0 || val_size < 0 || test_size < 0) throw std::invalid_argument("split sizes must be >= 0");
}

Grammar::Grammar(const CorpusConfig& config)
    : vocab_(config.vocab), markers_(config.markers_per_style), max_markers_(config.markers_per_sentence + 2) {
  config.validate();
  Rng rng(config.grammar_seed);
  std::vector<int> content(static_cast<std::size_t>(content_count()));
  std::iota(content.begin(), content.end(), first_content());
  successors_.assign(static_cast<std::size_t>(vocab_), {});
  licensed_.assign(static_cast<std::size_t>(vocab_), std::vector<bool>(static_cast<std::size_t>(vocab_), false));
  for (int c : content) {
    std::vector<int> pool = content;
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(static_cast<std::size_t>(config.successors));
    for (int s : pool) licensed_[static_cast<std::size_t>(c)][static_cast<std::size_t>(s)] = true;
    successors_[static_cast<std::size_t>(c)] = std::move(pool);
  }
}

int Grammar::marker_style(int tok) const {
  if (tok >= 1 && tok <= markers_) return 0;
  if (tok > markers_ && tok <= 2 * markers_) return 1;
  return -1;
}

bool Grammar::licensed(int from, int to) const {
  if (!is_content(from) || !is_content(to)) return false;
  return licensed_[static_cast<std::size_t>(from)][static_cast<std::size_t>(to)];
}

const std::vector<int>& Grammar::successors(int content_token) const {
  if (!is_content(content_token)) throw std::out_of_range("not a content token: " + std::to_string(content_token));
  return successors_[static_cast<std::size_t>(content_token)];
}

double Grammar::density() const {
  const double c = content_count();
  return static_cast<double>(successors_[static_cast<std::size_t>(first_content())].size()) / c;
}

int Grammar::next_content(int prev, int style, Rng& rng) const {
  const auto& succ = successors(prev);
  const std::size_t half = (succ.size() + 1) / 2;
  std::vector<double> w(succ.size());
  for (std::size_t j = 0; j < succ.size(); ++j) w[j] = ((j < half) == (style == 0)) ? 3.0 : 1.0;
  std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
  return succ[pick(rng)];
}

Tokens swap_style(const Grammar& grammar, const Tokens& tokens, Rng& rng) {
  std::uniform_int_distribution<int> pick(0, grammar.markers_per_style() - 1);
  Tokens out = tokens;
  for (auto& t : out) {
    const int style = grammar.marker_style(t);
    if (style >= 0) t = grammar.first_marker(1 - style) + pick(rng);
  }
  return out;
}

StyledExample generate_example(const CorpusConfig& config, const Grammar& grammar, int style, Rng& rng) {
  std::uniform_int_distribution<int> len_dist(config.min_len, config.seq_len);
  const int len = len_dist(rng);
  std::vector<int> positions(static_cast<std::size_t>(len));
  std::iota(positions.begin(), positions.end(), 0);
  std::shuffle(positions.begin(), positions.end(), rng);
  std::vector<bool> is_marker(static_cast<std::size_t>(len), false);
  for (int i = 0; i < config.markers_per_sentence; ++i) is_marker[static_cast<std::size_t>(positions[static_cast<std::size_t>(i)])] = true;

  std::uniform_int_distribution<int> marker_pick(0, grammar.markers_per_style() - 1);
  std::uniform_int_distribution<int> content_pick(grammar.first_content(), grammar.vocab() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Tokens src(static_cast<std::size_t>(config.seq_len), Grammar::kPad);
  int prev = -1;
  for (int p = 0; p < len; ++p) {
    if (is_marker[static_cast<std::size_t>(p)]) {
      int s = style;
      if (config.marker_overlap > 0.0 && unit(rng) < config.marker_overlap) s = 1 - style;
      src[static_cast<std::size_t>(p)] = grammar.first_marker(s) + marker_pick(rng);
    } else {
      prev = prev < 0 ? content_pick(rng) : grammar.next_content(prev, style, rng);
      src[static_cast<std::size_t>(p)] = prev;
    }
  }
  StyledExample ex;
  ex.src_label = style;
  if (config.mode == PairMode::kParallel) {
    ex.tgt = swap_style(grammar, src, rng);
    ex.tgt_label = 1 - style;
  } else {
    ex.tgt_label = style;
  }
  ex.src = std::move(src);
  return ex;
}

CorpusSplits generate_corpus(const CorpusConfig& config) {
  config.validate();
  Grammar grammar(config);
  Rng rng(config.seed);
  const int total = config.train_size + config.val_size + config.test_size;
  std::set<Tokens> seen;
  std::vector<StyledExample> all;
  all.reserve(static_cast<std::size_t>(total));
  constexpr int kMaxAttempts = 1000;
  for (int i = 0; i < total; ++i) {
    int attempts = 0;
    for (;;) {
      StyledExample ex = generate_example(config, grammar, i % 2, rng);
      if (seen.insert(ex.src).second) {
        all.push_back(std::move(ex));
        break;
      }
      if (++attempts >= kMaxAttempts)
        throw std::runtime_error("corpus generation could not find enough distinct sentences");
    }
  }
  CorpusSplits splits;
  for (Dataset* d : {&splits.train, &splits.val, &splits.test}) d->mode = config.mode;
  auto begin = all.begin();
  auto take = [&begin](Dataset& d, int n) {
    d.examples.assign(std::make_move_iterator(begin), std::make_move_iterator(begin + n));
    begin += n;
  };
  take(splits.train, config.train_size);
  take(splits.val, config.val_size);
  take(splits.test, config.test_size);
  return splits;
}

bool grammar_validity(const Grammar& grammar, const Tokens& tokens) {
  std::size_t end = tokens.size();
  while (end > 0 && grammar.is_pad(tokens[end - 1])) --end;
  if (end == 0) return false;
  int markers = 0, content = 0, prev = -1;
  for (std::size_t i = 0; i < end; ++i) {
    const int t = tokens[i];
    if (grammar.is_pad(t) || t < 0 || t >= grammar.vocab()) return false;
    if (grammar.is_marker(t)) {
      ++markers;
      continue;
    }
    if (prev >= 0 && !grammar.licensed(prev, t)) return false;
    prev = t;
    ++content;
  }
  return content >= 1 && markers >= 1 && markers <= grammar.max_markers_;
}

// ---- IO -------------------------------------------------------------------

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write dataset " + path.string());
  for (const auto& ex : ds.examples) {
    nlohmann::json j;
    j["src"] = ex.src;
    if (ex.tgt) j["tgt"] = *ex.tgt;
    j["src_label"] = ex.src_label;
    j["tgt_label"] = ex.tgt_label;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path, std::optional<PairMode> mode) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read dataset " + path.string());
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  auto read_tokens = [&lineno](const nlohmann::json& v, const char* field) {
    if (!v.is_array()) throw DatasetFormatError(std::string("field '") + field + "' must be an int list", lineno);
    Tokens t;
    for (const auto& x : v) {
      if (!x.is_number_integer()) throw DatasetFormatError(std::string("field '") + field + "' has a non-integer", lineno);
      t.push_back(x.get<int>());
    }
    return t;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DatasetFormatError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    if (!j.is_object()) throw DatasetFormatError("record is not an object", lineno);
    for (const char* f : {"src", "src_label", "tgt_label"})
      if (!j.contains(f)) throw DatasetFormatError(std::string("missing field '") + f + "'", lineno);
    StyledExample ex;
    ex.src = read_tokens(j["src"], "src");
    if (!j["src_label"].is_number_integer() || !j["tgt_label"].is_number_integer())
      throw DatasetFormatError("labels must be integers", lineno);
    ex.src_label = j["src_label"].get<int>();
    ex.tgt_label = j["tgt_label"].get<int>();
    if (j.contains("tgt")) ex.tgt = read_tokens(j["tgt"], "tgt");
    if (!mode) mode = ex.tgt ? PairMode::kParallel : PairMode::kNonParallel;
    if (*mode == PairMode::kParallel && !ex.tgt) throw DatasetFormatError("parallel record missing 'tgt'", lineno);
    if (*mode == PairMode::kNonParallel && ex.tgt) throw DatasetFormatError("non-parallel record has 'tgt'", lineno);
    ds.examples.push_back(std::move(ex));
  }
  ds.mode = mode.value_or(PairMode::kParallel);
  return ds;
}

void save_splits(const CorpusSplits& splits, const std::filesystem::path& dir, const std::string& name) {
  std::filesystem::create_directories(dir);
  save_dataset(splits.train, dir / (name + ".train"));
  save_dataset(splits.val, dir / (name + ".val"));
  save_dataset(splits.test, dir / (name + ".test"));
}

CorpusSplits load_splits(const std::filesystem::path& dir, const std::string& name) {
  CorpusSplits s;
  s.train = load_dataset(dir / (name + ".train"));
  s.val = load_dataset(dir / (name + ".val"), s.train.mode);
  s.test = load_dataset(dir / (name + ".test"), s.train.mode);
  return s;
}

}  // namespace regdiff
