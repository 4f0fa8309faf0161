#pragma once

// Deterministic DDIM sampling in latent space with classifier-free guidance,
// classifier guidance (baseline), or no guidance.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "regdiff/denoiser.hpp"
#include "regdiff/schedule.hpp"
#include "regdiff/vae.hpp"

namespace regdiff {

enum class GuidanceMode { kCfg, kCg, kNone };

GuidanceMode parse_guidance_mode(const std::string& s);
std::string to_string(GuidanceMode m);

struct GuidanceConfig {
  GuidanceMode mode = GuidanceMode::kCfg;
  double gamma = 2.0;
  int ddim_steps = 50;
  double eta = 0.0;

  void validate(int steps) const;
};

// (1 + gamma) v_cond - gamma v_uncond
Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond, double gamma);
// eps_cond - gamma * sigma_t * grad_logp
Tensor cg_adjust(const Tensor& eps_cond, const Tensor& grad_logp, double gamma, double sigma_t);

// d/dx_t of sum_b log p(labels[b] | pool(x_t[b])) under the frozen latent
// classifier. x_t is [B, S, D]; the result has the same shape.
Tensor classifier_grad_logp(const VaeModel& classifier, const Tensor& x_t, std::span<const int> labels);

// One eta = 0 DDIM update from t to t_prev (t_prev = 0 returns x0_hat).
Tensor ddim_step(const Tensor& z_t, const Tensor& v_hat, int t, int t_prev, const NoiseSchedule& schedule);

// n evenly spaced timesteps over [1, T], descending: 1 + floor(i (T-1) / (n-1)).
std::vector<int> ddim_timesteps(int steps, int n);

// Runs DDIM from z_T with an arbitrary velocity function.
using VelocityFn = std::function<Tensor(const Tensor& z_t, int t)>;
Tensor ddim_sample(Tensor z_T, const VelocityFn& v_fn, const NoiseSchedule& schedule, int ddim_steps);

// Standard-normal [B, S, D] start state, row b drawn from its own seed.
Tensor initial_noise(std::span<const std::uint64_t> seeds, std::size_t seq_len, std::size_t latent_dim);

struct SamplingStats {
  int steps = 0;
  double seconds = 0.0;
  double seconds_per_step() const { return steps > 0 ? seconds / steps : 0.0; }
};

// Guided sampling of one latent per condition. Conditions must be non-null
// and carry the target label. `classifier` is required in cg mode only.
Tensor sample(const DenoiserModel& model, const VaeModel* classifier, std::span<const Condition> conds,
              const NoiseSchedule& schedule, const GuidanceConfig& guidance, std::span<const std::uint64_t> seeds,
              SamplingStats* stats = nullptr);

}  // namespace regdiff
