#pragma once

// Run configuration and the stage functions behind the command-line tool.
// Every stage writes its resolved config next to its outputs.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "regdiff/checkpoint.hpp"
#include "regdiff/diffusion_train.hpp"
#include "regdiff/eval.hpp"

namespace regdiff {

struct RunConfig {
  // corpus
  PairMode pairing = PairMode::kParallel;
  int pairs = 2000;
  int val_pairs = 200;
  int test_pairs = 200;
  std::uint64_t data_seed = 7;
  std::uint64_t grammar_seed = 1234;
  double marker_overlap = 0.0;
  // model sizes
  int latent_dim = 16;
  int vae_dim = 32;
  int denoiser_dim = 64;
  // VAE training
  int vae_epochs = 5;
  double vae_lr = 2e-3;
  double vae_alpha = 0.1;
  double vae_beta = 1.0;
  // diffusion
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int diff_epochs = 8;
  double diff_lr = 1e-3;
  double p_drop = 0.2;
  int batch_size = 32;
  std::vector<double> lambdas{0, 1, 3, 5, 10};
  // sampling and evaluation
  GuidanceMode guidance = GuidanceMode::kCfg;
  double gamma = 2.0;
  int ddim_steps = 50;
  int eval_max = 0;  // per direction, 0 = whole test split
  std::vector<std::uint64_t> seeds{1, 2, 3};

  void validate() const;
  // Applies one key=value setting; throws std::invalid_argument.
  void set(const std::string& key, const std::string& value);
  void write(std::ostream& os) const;
  void save(const std::filesystem::path& path) const;
  static RunConfig load(const std::filesystem::path& path);

  CorpusConfig corpus() const;
  VaeConfig vae() const;
  VaeTrainConfig vae_train() const;
  DenoiserConfig denoiser() const;
  DiffTrainConfig diff_train(double lambda, std::uint64_t seed) const;
  GuidanceConfig guidance_config() const;
  EvalOptions eval_options() const;
  NoiseSchedule schedule() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// "16,32,64" -> latent, VAE and denoiser widths.
void parse_dims(const std::string& s, RunConfig& cfg);
std::vector<double> parse_double_list(const std::string& s);
std::vector<std::uint64_t> parse_seed_list(const std::string& s);
// Directory-safe rendering of a lambda value ("3", "0.5").
std::string format_lambda(double lambda);

inline constexpr const char* kConfigFile = "config.txt";
inline constexpr const char* kCorpusName = "corpus";

// Writes {dir}/corpus.train|val|test and {dir}/config.txt.
CorpusSplits stage_gen_data(const RunConfig& cfg, const std::filesystem::path& dir);
// The corpus together with the config it was generated under.
struct LoadedData {
  RunConfig config;
  CorpusSplits splits;
  Grammar grammar;
};
LoadedData load_data(const std::filesystem::path& dir);

// Writes vae.ckpt and vae_log.tsv; returns the model as reloaded from disk.
VaeModel stage_train_vae(const RunConfig& cfg, const LoadedData& data, const std::filesystem::path& dir,
                         std::uint64_t seed);
// Writes denoiser.ckpt and loss.tsv; returns the reloaded model.
DenoiserModel stage_train_diff(const RunConfig& cfg, const LoadedData& data, const VaeModel& vae,
                               const std::filesystem::path& dir, double lambda, std::uint64_t seed);
// Writes one JSON line per transfer item of the test split.
void stage_sample(const RunConfig& cfg, const LoadedData& data, const VaeModel& vae, const DenoiserModel& denoiser,
                  const std::filesystem::path& path, std::uint64_t seed, SamplingStats* timing = nullptr);
// Writes report.txt into `dir`.
EvalReport stage_eval(const RunConfig& cfg, const LoadedData& data, const VaeModel& vae,
                      const DenoiserModel& denoiser, const std::filesystem::path& dir,
                      SamplingStats* timing = nullptr);
// Pooled posterior means of every sentence, PCA-projected to CSV.
void stage_export(const LoadedData& data, const VaeModel& vae, const std::filesystem::path& path);

// One row per (lambda, direction), metrics averaged over seeds.
struct SummaryRow {
  double lambda;
  std::string direction;
  DirectionMetrics metrics;
};
void write_summary(const std::vector<SummaryRow>& rows, const std::filesystem::path& path);

// gen-data -> per seed: train-vae -> per lambda: train-diff -> eval.
// Progress lines go to `log`.
std::vector<SummaryRow> run_pipeline(const RunConfig& cfg, const std::filesystem::path& dir, std::ostream& log);

}  // namespace regdiff
