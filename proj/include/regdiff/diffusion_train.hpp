#pragma once

// Training of the denoiser on frozen-VAE latents with the objective
//   L = mse(v_pred, v) + lambda * CE(classify(pool(x0_hat)), target label)
// where x0_hat is recovered from v_pred. Gradients of the second term reach
// the denoiser only; classifier parameters are bound as constants.

#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "regdiff/denoiser.hpp"
#include "regdiff/schedule.hpp"
#include "regdiff/vae.hpp"

namespace regdiff {

struct DiffTrainConfig {
  double lambda = 0.0;
  double p_drop = 0.2;
  int epochs = 10;
  int batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  // Apply the classifier term to rows whose condition was dropped as well.
  bool regularize_dropped = false;

  void validate() const;
};

// Frozen-encoder latents: z_src conditions, z_tgt is diffused, label is the
// target attribute.
struct LatentPairs {
  Tensor z_src;  // [N, S, D]
  Tensor z_tgt;  // [N, S, D]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

// Parallel data contributes each pair in both directions; non-parallel data
// conditions every sentence on itself with its own label.
LatentPairs make_latent_pairs(const Dataset& ds, const VaeModel& vae);

struct TrainBatch {
  Tensor z_src, z_tgt;  // [B, S, D]
  std::vector<int> labels;
};
TrainBatch gather_batch(const LatentPairs& pairs, std::span<const std::size_t> rows);

struct LossComponents {
  double diffusion = 0.0;
  double classifier = 0.0;
  double total = 0.0;
};

Var diffusion_loss(Var v_pred, Var v_target);

// CE of the frozen classifier on pool(recover_x0(z_t, v_pred, t)), averaged
// over `rows` (all rows when empty).
Var regularization_loss(Var v_pred, const Tensor& z_t, std::span<const int> t, std::span<const int> labels,
                        const NoiseSchedule& schedule, const VaeModel& classifier,
                        std::span<const int> rows = {});

// One optimizer update. `classifier` may be null (unregularized training);
// lambda = 0 skips the regularization branch entirely.
LossComponents train_step(const TrainBatch& batch, DenoiserModel& model, const DiffTrainConfig& config, Rng& rng,
                          Adam& optimizer, const NoiseSchedule& schedule, const VaeModel* classifier);

struct DiffEpochLog {
  int epoch;
  LossComponents loss;
};
using DiffEpochCallback = std::function<void(const DiffEpochLog&)>;

DenoiserModel train_diffusion(const LatentPairs& data, const VaeModel* vae, const DenoiserConfig& model_config,
                              const DiffTrainConfig& config, const NoiseSchedule& schedule,
                              const DiffEpochCallback& on_epoch = {});

// "epoch\tdiffusion_loss\tclassifier_loss\ttotal"
void write_loss_header(std::ostream& os);
void write_loss_line(std::ostream& os, const DiffEpochLog& log);

}  // namespace regdiff
