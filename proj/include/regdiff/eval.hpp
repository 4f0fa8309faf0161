#pragma once

// Evaluation: oracle style accuracy, latent cosine similarity, grammar
// validity (a fluency stand-in), silhouette of pooled latents, and a PCA
// embedding export for plotting.

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "regdiff/data.hpp"
#include "regdiff/sampler.hpp"

namespace regdiff {

// Logistic regression on normalized token counts of raw sentences. Trained
// independently of the VAE so that it can judge the VAE's outputs.
class OracleClassifier {
 public:
  static OracleClassifier train(std::span<const LabeledTokens> data, int vocab, int iterations = 400,
                                double lr = 2.0);

  double prob_b(const Tokens& tokens) const;  // P(label = 1)
  int predict(const Tokens& tokens) const { return prob_b(tokens) >= 0.5 ? 1 : 0; }
  double accuracy(std::span<const LabeledTokens> data) const;

 private:
  std::vector<double> features(const Tokens& tokens) const;
  std::vector<double> w_;
  double b_ = 0.0;
};

double style_accuracy(std::span<const Tokens> generated, std::span<const int> target_labels,
                      const OracleClassifier& oracle);

// Cosine of two vectors; a zero vector yields 0 and sets `*degenerate`.
double cosine(std::span<const double> a, std::span<const double> b, bool* degenerate = nullptr);
// Cosine of pooled posterior means. Zero embeddings give 0 with a warning.
double semantic_similarity(const Tokens& a, const Tokens& b, const VaeModel& vae);
// Row-wise version for equally sized lists.
std::vector<double> semantic_similarity(std::span<const Tokens> a, std::span<const Tokens> b, const VaeModel& vae);

double validity_rate(std::span<const Tokens> sentences, const Grammar& grammar);

// Mean silhouette (Euclidean) of the rows of x [N, D]. Points in singleton
// clusters score 0.
double silhouette(const Tensor& x, std::span<const int> labels);

// Projection onto the top two principal components, [N, 2]. Each axis is
// sign-normalized so its largest-magnitude loading is positive.
Tensor pca_2d(const Tensor& x);

// CSV "pc1,pc2,label,split" with one row per point of x [N, D].
void export_embeddings(const Tensor& x, std::span<const int> labels, std::span<const std::string> split_tags,
                       const std::filesystem::path& path);

struct DirectionMetrics {
  double style_accuracy = 0.0;
  double semantic_similarity = 0.0;
  double validity_rate = 0.0;
  std::size_t count = 0;

  friend bool operator==(const DirectionMetrics&, const DirectionMetrics&) = default;
};

struct SeedMetrics {
  std::uint64_t seed = 0;
  DirectionMetrics a_to_b, b_to_a;

  friend bool operator==(const SeedMetrics&, const SeedMetrics&) = default;
};

struct EvalReport {
  std::string guidance;
  double gamma = 0.0;
  int ddim_steps = 0;
  double silhouette = 0.0;
  std::vector<SeedMetrics> per_seed;

  DirectionMetrics mean_a_to_b() const;
  DirectionMetrics mean_b_to_a() const;
  // Throws std::logic_error if any value is outside its range.
  void validate() const;
  // Flat key=value lines.
  void write(std::ostream& os) const;
  void save(const std::filesystem::path& path) const;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct EvalModels {
  const VaeModel& vae;
  const DenoiserModel& denoiser;
  const OracleClassifier& oracle;
  const Grammar& grammar;
  const NoiseSchedule& schedule;
};

struct EvalOptions {
  GuidanceConfig guidance;
  std::size_t max_per_direction = 0;  // 0 = all
  std::size_t batch_size = 64;
};

// A source sentence to restyle, its reference and the two labels.
struct TransferItem {
  Tokens source, reference;
  int source_label, target_label;
};
// Parallel pairs give one item per orientation with the partner as
// reference; non-parallel sentences are their own reference.
std::vector<TransferItem> transfer_items(const Dataset& test);

// Restyles every item with the given sampling seed and decodes the result.
std::vector<Tokens> transfer(const EvalModels& models, std::span<const TransferItem> items, std::uint64_t seed,
                             const EvalOptions& options, SamplingStats* stats = nullptr);

// Wall-clock sampling time is accumulated into `timing`, never into the
// report, so reports stay reproducible.
EvalReport evaluate_run(const EvalModels& models, const Dataset& test, std::span<const std::uint64_t> seeds,
                        const EvalOptions& options, SamplingStats* timing = nullptr);

}  // namespace regdiff
