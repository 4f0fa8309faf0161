#include "regdiff/pipeline.hpp"

#include <charconv>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace regdiff {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <typename T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || s.empty())
    throw std::invalid_argument("bad value for " + key + ": '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>)
      out += fmt(xs[i]);
    else
      out += std::to_string(xs[i]);
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  for (const auto& part : split(s, ',')) out.push_back(parse_number<double>("list", part));
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& part : split(s, ',')) out.push_back(parse_number<std::uint64_t>("seeds", part));
  if (out.empty()) throw std::invalid_argument("empty seed list");
  return out;
}

void parse_dims(const std::string& s, RunConfig& cfg) {
  const auto parts = split(s, ',');
  if (parts.size() != 3) throw std::invalid_argument("--dims expects latent,vae,denoiser (e.g. 16,32,64)");
  cfg.latent_dim = parse_number<int>("dims", parts[0]);
  cfg.vae_dim = parse_number<int>("dims", parts[1]);
  cfg.denoiser_dim = parse_number<int>("dims", parts[2]);
}

std::string format_lambda(double lambda) { return fmt(lambda); }

// ---- RunConfig --------------------------------------------------------------

void RunConfig::validate() const {
  corpus().validate();
  vae().validate();
  denoiser().validate();
  if (vae_epochs < 0 || diff_epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (!(vae_lr >= 0) || !(diff_lr >= 0)) throw std::invalid_argument("learning rates must be >= 0");
  if (!(vae_alpha >= 0) || !(vae_beta >= 0)) throw std::invalid_argument("VAE loss weights must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (lambdas.empty()) throw std::invalid_argument("at least one lambda required");
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    diff_train(lambdas[i], 1).validate();
    for (std::size_t j = 0; j < i; ++j)
      if (lambdas[j] == lambdas[i]) throw std::invalid_argument("duplicate lambda " + fmt(lambdas[i]));
  }
  if (seeds.empty()) throw std::invalid_argument("at least one seed required");
  if (eval_max < 0) throw std::invalid_argument("eval_max must be >= 0");
  (void)schedule();
  guidance_config().validate(steps);
}

void RunConfig::set(const std::string& key, const std::string& v) {
  if (key == "pairing") {
    if (v == "parallel") pairing = PairMode::kParallel;
    else if (v == "nonparallel") pairing = PairMode::kNonParallel;
    else throw std::invalid_argument("pairing must be parallel or nonparallel");
  } else if (key == "pairs") pairs = parse_number<int>(key, v);
  else if (key == "val_pairs") val_pairs = parse_number<int>(key, v);
  else if (key == "test_pairs") test_pairs = parse_number<int>(key, v);
  else if (key == "data_seed") data_seed = parse_number<std::uint64_t>(key, v);
  else if (key == "grammar_seed") grammar_seed = parse_number<std::uint64_t>(key, v);
  else if (key == "marker_overlap") marker_overlap = parse_number<double>(key, v);
  else if (key == "latent_dim") latent_dim = parse_number<int>(key, v);
  else if (key == "vae_dim") vae_dim = parse_number<int>(key, v);
  else if (key == "denoiser_dim") denoiser_dim = parse_number<int>(key, v);
  else if (key == "vae_epochs") vae_epochs = parse_number<int>(key, v);
  else if (key == "vae_lr") vae_lr = parse_number<double>(key, v);
  else if (key == "vae_alpha") vae_alpha = parse_number<double>(key, v);
  else if (key == "vae_beta") vae_beta = parse_number<double>(key, v);
  else if (key == "steps") steps = parse_number<int>(key, v);
  else if (key == "beta_start") beta_start = parse_number<double>(key, v);
  else if (key == "beta_end") beta_end = parse_number<double>(key, v);
  else if (key == "diff_epochs") diff_epochs = parse_number<int>(key, v);
  else if (key == "diff_lr") diff_lr = parse_number<double>(key, v);
  else if (key == "p_drop") p_drop = parse_number<double>(key, v);
  else if (key == "batch_size") batch_size = parse_number<int>(key, v);
  else if (key == "lambdas") lambdas = parse_double_list(v);
  else if (key == "guidance") guidance = parse_guidance_mode(v);
  else if (key == "gamma") gamma = parse_number<double>(key, v);
  else if (key == "ddim_steps") ddim_steps = parse_number<int>(key, v);
  else if (key == "eval_max") eval_max = parse_number<int>(key, v);
  else if (key == "seeds") seeds = parse_seed_list(v);
  else throw std::invalid_argument("unknown config key '" + key + "'");
}

void RunConfig::write(std::ostream& os) const {
  os << "pairing=" << (pairing == PairMode::kParallel ? "parallel" : "nonparallel") << '\n'
     << "pairs=" << pairs << '\n'
     << "val_pairs=" << val_pairs << '\n'
     << "test_pairs=" << test_pairs << '\n'
     << "data_seed=" << data_seed << '\n'
     << "grammar_seed=" << grammar_seed << '\n'
     << "marker_overlap=" << fmt(marker_overlap) << '\n'
     << "latent_dim=" << latent_dim << '\n'
     << "vae_dim=" << vae_dim << '\n'
     << "denoiser_dim=" << denoiser_dim << '\n'
     << "vae_epochs=" << vae_epochs << '\n'
     << "vae_lr=" << fmt(vae_lr) << '\n'
     << "vae_alpha=" << fmt(vae_alpha) << '\n'
     << "vae_beta=" << fmt(vae_beta) << '\n'
     << "steps=" << steps << '\n'
     << "beta_start=" << fmt(beta_start) << '\n'
     << "beta_end=" << fmt(beta_end) << '\n'
     << "diff_epochs=" << diff_epochs << '\n'
     << "diff_lr=" << fmt(diff_lr) << '\n'
     << "p_drop=" << fmt(p_drop) << '\n'
     << "batch_size=" << batch_size << '\n'
     << "lambdas=" << join(lambdas) << '\n'
     << "guidance=" << to_string(guidance) << '\n'
     << "gamma=" << fmt(gamma) << '\n'
     << "ddim_steps=" << ddim_steps << '\n'
     << "eval_max=" << eval_max << '\n'
     << "seeds=" << join(seeds) << '\n';
}

void RunConfig::save(const fs::path& path) const {
  std::ostringstream os;
  write(os);
  write_text(path, os.str());
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read config " + path.string());
  RunConfig cfg;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(path.string() + ":" + std::to_string(n) + ": expected key=value");
    try {
      cfg.set(line.substr(0, eq), line.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return cfg;
}

CorpusConfig RunConfig::corpus() const {
  CorpusConfig c;
  c.mode = pairing;
  c.train_size = pairs;
  c.val_size = val_pairs;
  c.test_size = test_pairs;
  c.seed = data_seed;
  c.grammar_seed = grammar_seed;
  c.marker_overlap = marker_overlap;
  return c;
}

VaeConfig RunConfig::vae() const {
  VaeConfig c;
  const CorpusConfig cc = corpus();
  c.vocab = cc.vocab;
  c.seq_len = cc.seq_len;
  c.latent_dim = latent_dim;
  c.model_dim = vae_dim;
  c.ffn_dim = 2 * vae_dim;
  c.cls_hidden = vae_dim;
  return c;
}

VaeTrainConfig RunConfig::vae_train() const {
  VaeTrainConfig t;
  t.epochs = vae_epochs;
  t.batch_size = batch_size;
  t.lr = vae_lr;
  t.weights = {vae_alpha, vae_beta};
  return t;
}

DenoiserConfig RunConfig::denoiser() const {
  DenoiserConfig c;
  c.latent_dim = latent_dim;
  c.seq_len = corpus().seq_len;
  c.hidden = denoiser_dim;
  c.ffn_dim = 2 * denoiser_dim;
  c.steps = steps;
  return c;
}

DiffTrainConfig RunConfig::diff_train(double lambda, std::uint64_t seed) const {
  DiffTrainConfig d;
  d.lambda = lambda;
  d.p_drop = p_drop;
  d.epochs = diff_epochs;
  d.batch_size = batch_size;
  d.lr = diff_lr;
  d.seed = seed;
  return d;
}

GuidanceConfig RunConfig::guidance_config() const {
  GuidanceConfig g;
  g.mode = guidance;
  g.gamma = gamma;
  g.ddim_steps = ddim_steps;
  return g;
}

EvalOptions RunConfig::eval_options() const {
  EvalOptions o;
  o.guidance = guidance_config();
  o.max_per_direction = static_cast<std::size_t>(eval_max);
  return o;
}

NoiseSchedule RunConfig::schedule() const { return NoiseSchedule::linear(steps, beta_start, beta_end); }

// ---- stages -----------------------------------------------------------------

CorpusSplits stage_gen_data(const RunConfig& cfg, const fs::path& dir) {
  cfg.validate();
  fs::create_directories(dir);
  CorpusSplits splits = generate_corpus(cfg.corpus());
  save_splits(splits, dir, kCorpusName);
  cfg.save(dir / kConfigFile);
  return splits;
}

LoadedData load_data(const fs::path& dir) {
  RunConfig cfg = RunConfig::load(dir / kConfigFile);
  CorpusSplits splits = load_splits(dir, kCorpusName);
  Grammar grammar(cfg.corpus());
  return {cfg, std::move(splits), std::move(grammar)};
}

namespace {

// Stages may override training knobs but not the corpus definition.
void check_same_corpus(const RunConfig& cfg, const LoadedData& data) {
  if (!(cfg.corpus().mode == data.config.corpus().mode) || cfg.grammar_seed != data.config.grammar_seed ||
      cfg.marker_overlap != data.config.marker_overlap)
    throw std::invalid_argument("corpus settings differ from those the data was generated with");
}

}  // namespace

VaeModel stage_train_vae(const RunConfig& cfg, const LoadedData& data, const fs::path& dir, std::uint64_t seed) {
  cfg.validate();
  check_same_corpus(cfg, data);
  fs::create_directories(dir);
  const auto corpus = vae_corpus(data.splits.train);
  std::ostringstream log;
  log << "epoch\ttotal\trecon\tkl\tcls\n";
  const VaeModel model = train_vae(corpus, cfg.vae(), cfg.vae_train(), seed, [&log](const VaeEpochLog& e) {
    log << e.epoch << '\t' << fmt(e.total) << '\t' << fmt(e.recon) << '\t' << fmt(e.kl) << '\t' << fmt(e.cls) << '\n';
  });
  write_text(dir / "vae_log.tsv", log.str());
  save_vae(model, dir / "vae.ckpt");
  RunConfig echo = cfg;
  echo.seeds = {seed};
  echo.save(dir / kConfigFile);
  return load_vae(dir / "vae.ckpt");
}

DenoiserModel stage_train_diff(const RunConfig& cfg, const LoadedData& data, const VaeModel& vae, const fs::path& dir,
                               double lambda, std::uint64_t seed) {
  cfg.validate();
  check_same_corpus(cfg, data);
  fs::create_directories(dir);
  const LatentPairs pairs = make_latent_pairs(data.splits.train, vae);
  std::ostringstream log;
  write_loss_header(log);
  const DenoiserModel model = train_diffusion(pairs, &vae, cfg.denoiser(), cfg.diff_train(lambda, seed),
                                              cfg.schedule(), [&log](const DiffEpochLog& e) { write_loss_line(log, e); });
  write_text(dir / "loss.tsv", log.str());
  save_denoiser(model, dir / "denoiser.ckpt");
  RunConfig echo = cfg;
  echo.seeds = {seed};
  echo.lambdas = {lambda};
  echo.save(dir / kConfigFile);
  return load_denoiser(dir / "denoiser.ckpt");
}

namespace {

std::vector<TransferItem> capped_items(const RunConfig& cfg, const Dataset& test) {
  std::vector<TransferItem> out;
  std::size_t per_dir[2] = {0, 0};
  for (auto& it : transfer_items(test)) {
    auto& n = per_dir[it.source_label == 0 ? 0 : 1];
    if (cfg.eval_max == 0 || n < static_cast<std::size_t>(cfg.eval_max)) {
      ++n;
      out.push_back(std::move(it));
    }
  }
  return out;
}

}  // namespace

void stage_sample(const RunConfig& cfg, const LoadedData& data, const VaeModel& vae, const DenoiserModel& denoiser,
                  const fs::path& path, std::uint64_t seed, SamplingStats* timing) {
  cfg.validate();
  const auto oracle = OracleClassifier::train(vae_corpus(data.splits.train), cfg.corpus().vocab);
  const NoiseSchedule schedule = cfg.schedule();
  const EvalModels models{vae, denoiser, oracle, data.grammar, schedule};
  const auto items = capped_items(cfg, data.splits.test);
  const auto out = transfer(models, items, seed, cfg.eval_options(), timing);
  std::ostringstream os;
  for (std::size_t i = 0; i < items.size(); ++i) {
    nlohmann::json j;
    j["source"] = items[i].source;
    j["reference"] = items[i].reference;
    j["target_label"] = items[i].target_label;
    j["output"] = out[i];
    os << j.dump() << '\n';
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_text(path, os.str());
}

EvalReport stage_eval(const RunConfig& cfg, const LoadedData& data, const VaeModel& vae,
                      const DenoiserModel& denoiser, const fs::path& dir, SamplingStats* timing) {
  cfg.validate();
  fs::create_directories(dir);
  const auto oracle = OracleClassifier::train(vae_corpus(data.splits.train), cfg.corpus().vocab);
  const NoiseSchedule schedule = cfg.schedule();
  const EvalModels models{vae, denoiser, oracle, data.grammar, schedule};
  const EvalReport report = evaluate_run(models, data.splits.test, cfg.seeds, cfg.eval_options(), timing);
  report.save(dir / "report.txt");
  return report;
}

void stage_export(const LoadedData& data, const VaeModel& vae, const fs::path& path) {
  std::vector<Tokens> sentences;
  std::vector<int> labels;
  std::vector<std::string> tags;
  const std::pair<const Dataset*, const char*> parts[] = {
      {&data.splits.train, "train"}, {&data.splits.val, "val"}, {&data.splits.test, "test"}};
  for (const auto& [ds, tag] : parts)
    for (const auto& lt : vae_corpus(*ds)) {
      sentences.push_back(lt.tokens);
      labels.push_back(lt.label);
      tags.emplace_back(tag);
    }
  Tensor pooled = sentences.empty() ? Tensor() : pool(vae.encode_mean(sentences));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  export_embeddings(pooled, labels, tags, path);
}

void write_summary(const std::vector<SummaryRow>& rows, const fs::path& path) {
  std::ostringstream os;
  os << "lambda\tdirection\tstyle_accuracy\tsemantic_similarity\tvalidity_rate\n";
  for (const auto& r : rows)
    os << format_lambda(r.lambda) << '\t' << r.direction << '\t' << fmt(r.metrics.style_accuracy) << '\t'
       << fmt(r.metrics.semantic_similarity) << '\t' << fmt(r.metrics.validity_rate) << '\n';
  write_text(path, os.str());
}

std::vector<SummaryRow> run_pipeline(const RunConfig& cfg, const fs::path& dir, std::ostream& log) {
  cfg.validate();
  fs::create_directories(dir);
  cfg.save(dir / kConfigFile);
  log << "[gen-data] " << (dir / "data").string() << std::endl;
  stage_gen_data(cfg, dir / "data");
  const LoadedData data = load_data(dir / "data");

  std::map<double, std::vector<SeedMetrics>> by_lambda;
  for (std::uint64_t seed : cfg.seeds) {
    const fs::path seed_dir = dir / ("seed" + std::to_string(seed));
    log << "[train-vae] seed " << seed << std::endl;
    const VaeModel vae = stage_train_vae(cfg, data, seed_dir, seed);
    for (double lambda : cfg.lambdas) {
      const fs::path run_dir = seed_dir / ("lambda" + format_lambda(lambda));
      log << "[train-diff] seed " << seed << " lambda " << format_lambda(lambda) << std::endl;
      const DenoiserModel den = stage_train_diff(cfg, data, vae, run_dir, lambda, seed);
      RunConfig one = cfg;
      one.seeds = {seed};
      log << "[eval] seed " << seed << " lambda " << format_lambda(lambda) << std::endl;
      const EvalReport r = stage_eval(one, data, vae, den, run_dir);
      by_lambda[lambda].push_back(r.per_seed.at(0));
    }
  }

  std::vector<SummaryRow> rows;
  for (double lambda : cfg.lambdas) {
    EvalReport agg;
    agg.per_seed = by_lambda[lambda];
    rows.push_back({lambda, "a_to_b", agg.mean_a_to_b()});
    rows.push_back({lambda, "b_to_a", agg.mean_b_to_a()});
  }
  write_summary(rows, dir / "summary.tsv");
  log << "[done] " << (dir / "summary.tsv").string() << std::endl;
  return rows;
}

}  // namespace regdiff
