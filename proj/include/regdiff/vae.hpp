#pragma once

// Sequence VAE with a non-autoregressive iterative decoder and an attribute
// classifier on mean-pooled latents. Latents are per-position: a sentence of
// S tokens maps to an S x D matrix.

#include <functional>
#include <span>
#include <vector>

#include "regdiff/data.hpp"
#include "regdiff/params.hpp"

namespace regdiff {

struct VaeConfig {
  int vocab = 32;
  int seq_len = 16;
  int latent_dim = 16;
  int model_dim = 32;
  int heads = 2;
  int layers = 2;
  int ffn_dim = 64;
  int cls_hidden = 32;
  int refine_steps = 5;

  void validate() const;
  friend bool operator==(const VaeConfig&, const VaeConfig&) = default;
};

struct VaeLossWeights {
  double alpha = 0.1;  // KL
  double beta = 1.0;   // classifier
};

struct VaeTrainConfig {
  int epochs = 12;
  int batch_size = 32;
  double lr = 2e-3;
  VaeLossWeights weights;
};

struct VaeEpochLog {
  int epoch;
  double total, recon, kl, cls;
};

class FrozenModelError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class VaeModel {
 public:
  static VaeModel init(const VaeConfig& config, std::uint64_t seed);
  VaeModel(VaeConfig config, ParameterSet params, bool frozen = false);

  const VaeConfig& config() const { return config_; }
  const ParameterSet& params() const { return params_; }
  // Throws FrozenModelError once the model is frozen.
  ParameterSet& mutable_params();
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  // ---- graph API: latents are [B*S, D] rows ------------------------------
  struct Encoded {
    Var mu, logvar;
  };
  Encoded encode(ParamBinder& p, std::span<const Tokens> batch) const;
  // One decoder pass given previous-token guesses ([B*S] ids; mask id = vocab).
  Var decode_step(ParamBinder& p, Var z, std::span<const int> prev, std::size_t batch) const;
  // Runs `steps` refinement passes, each conditioned on the previous argmax.
  Var decode_nar(ParamBinder& p, Var z, std::size_t batch, int steps) const;
  Var classifier_logits(ParamBinder& p, Var z_bar) const;

  // ---- tensor API (inference, never records gradients) -------------------
  // [B, S, D] posterior means and clamped log-variances.
  std::pair<Tensor, Tensor> encode(std::span<const Tokens> batch) const;
  Tensor encode_mean(std::span<const Tokens> batch) const { return encode(batch).first; }
  // z [B, S, D] -> logits [B*S, V]
  Tensor decode_logits(const Tensor& z, int steps) const;
  std::vector<Tokens> decode(const Tensor& z, int steps) const;
  std::vector<Tokens> decode(const Tensor& z) const { return decode(z, config_.refine_steps); }
  // z_bar [B, D] -> probabilities [B, 2]
  Tensor classify(const Tensor& z_bar) const;

  int mask_token() const { return config_.vocab; }

 private:
  VaeConfig config_;
  ParameterSet params_;
  bool frozen_ = false;
};

inline constexpr double kLogvarMin = -8.0;
inline constexpr double kLogvarMax = 8.0;

// z = mu + exp(logvar / 2) * noise
Var reparameterize(Var mu, Var logvar, Var noise);
Tensor reparameterize(const Tensor& mu, const Tensor& logvar, const Tensor& noise);

// Mean over the sequence axis: [B*S, D] rows (with batch size) or [B, S, D].
Var pool(Var z, std::size_t batch);
Tensor pool(const Tensor& z);

struct VaeLossTerms {
  Var total, recon, kl, cls;
};

// recon: mean token CE averaged over a direct decode and one refinement pass;
// kl: mean over positions; cls: mean CE of classify(pool(z)).
VaeLossTerms vae_loss(const VaeModel& model, ParamBinder& p, std::span<const Tokens> tokens,
                      std::span<const int> labels, const VaeLossWeights& weights, const Tensor& noise);

struct LabeledTokens {
  Tokens tokens;
  int label;
};

// Every sentence in the dataset (src and, when present, tgt) with its label.
std::vector<LabeledTokens> vae_corpus(const Dataset& ds);

using VaeEpochCallback = std::function<void(const VaeEpochLog&)>;

// Returns a frozen model. Deterministic given the seed.
VaeModel train_vae(std::span<const LabeledTokens> corpus, const VaeConfig& config, const VaeTrainConfig& train,
                   std::uint64_t seed, const VaeEpochCallback& on_epoch = {});

// Token accuracy of decode(encode_mean(x)) against x.
double reconstruction_accuracy(const VaeModel& model, std::span<const Tokens> sentences);
// Accuracy of the latent classifier on pooled posterior means.
double latent_classifier_accuracy(const VaeModel& model, std::span<const LabeledTokens> data);

}  // namespace regdiff
