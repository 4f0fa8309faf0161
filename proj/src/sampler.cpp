#include "regdiff/sampler.hpp"

#include <chrono>
#include <cmath>

namespace regdiff {

GuidanceMode parse_guidance_mode(const std::string& s) {
  if (s == "cfg") return GuidanceMode::kCfg;
  if (s == "cg") return GuidanceMode::kCg;
  if (s == "none") return GuidanceMode::kNone;
  throw std::invalid_argument("unknown guidance mode '" + s + "' (expected cfg, cg or none)");
}

std::string to_string(GuidanceMode m) {
  switch (m) {
    case GuidanceMode::kCfg: return "cfg";
    case GuidanceMode::kCg: return "cg";
    case GuidanceMode::kNone: return "none";
  }
  return "?";
}

void GuidanceConfig::validate(int steps) const {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw std::invalid_argument("gamma must be a finite value >= 0");
  if (ddim_steps < 1 || ddim_steps > steps)
    throw std::invalid_argument("ddim_steps must be in [1, " + std::to_string(steps) + "]");
  if (eta != 0.0) throw std::invalid_argument("only deterministic sampling (eta = 0) is supported");
}

Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond, double gamma) {
  if (v_cond.shape() != v_uncond.shape()) throw ShapeError("cfg_combine: shape mismatch");
  Tensor out = v_cond;
  if (gamma == 0.0) return out;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 + gamma) * v_cond[i] - gamma * v_uncond[i];
  return out;
}

Tensor cg_adjust(const Tensor& eps_cond, const Tensor& grad_logp, double gamma, double sigma_t) {
  if (eps_cond.shape() != grad_logp.shape()) throw ShapeError("cg_adjust: shape mismatch");
  if (!grad_logp.all_finite()) throw NumericError("cg_adjust: non-finite classifier gradient");
  Tensor out = eps_cond;
  if (gamma == 0.0) return out;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= gamma * sigma_t * grad_logp[i];
  return out;
}

Tensor classifier_grad_logp(const VaeModel& classifier, const Tensor& x_t, std::span<const int> labels) {
  if (x_t.rank() != 3) throw ShapeError("classifier_grad_logp: x_t must be [B, S, D]");
  const std::size_t B = x_t.dim(0), S = x_t.dim(1), D = x_t.dim(2);
  if (labels.size() != B) throw ShapeError("classifier_grad_logp: one label per row required");
  Graph g;
  Var x = g.leaf(x_t);
  ParamBinder frozen(g, classifier.params(), false);
  Var logits = classifier.classifier_logits(frozen, pool(reshape(x, {B * S, D}), B));
  // sum_b log p = -B * mean CE
  g.backward(scale(cross_entropy(logits, labels), -static_cast<double>(B)));
  Tensor grad = g.grad(x);
  if (!grad.all_finite()) throw NumericError("classifier_grad_logp: non-finite gradient");
  return grad;
}

Tensor ddim_step(const Tensor& z_t, const Tensor& v_hat, int t, int t_prev, const NoiseSchedule& schedule) {
  schedule.check_step(t);
  if (t_prev < 0 || t_prev >= t)
    throw std::invalid_argument("ddim_step: need 0 <= t_prev < t, got t=" + std::to_string(t) +
                                " t_prev=" + std::to_string(t_prev));
  Tensor x0 = recover_x0(schedule, z_t, v_hat, t);
  if (t_prev == 0) return x0;
  Tensor eps = recover_eps(schedule, z_t, v_hat, t);
  const double a = schedule.sqrt_alpha_bar(t_prev), s = schedule.sigma(t_prev);
  for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = a * x0[i] + s * eps[i];
  return x0;
}

std::vector<int> ddim_timesteps(int steps, int n) {
  if (n < 1 || n > steps) throw std::invalid_argument("ddim_steps must be in [1, T]");
  if (n == 1) return {steps};
  std::vector<int> ts(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto k = static_cast<long long>(i) * (steps - 1) / (n - 1);
    ts[static_cast<std::size_t>(n - 1 - i)] = 1 + static_cast<int>(k);
  }
  return ts;
}

Tensor ddim_sample(Tensor z, const VelocityFn& v_fn, const NoiseSchedule& schedule, int ddim_steps) {
  const auto ts = ddim_timesteps(schedule.steps(), ddim_steps);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    Tensor v = v_fn(z, ts[i]);
    z = ddim_step(z, v, ts[i], t_prev, schedule);
    if (!z.all_finite())
      throw NumericError("non-finite latent at sampling step " + std::to_string(i) + " (t=" +
                         std::to_string(ts[i]) + ")");
  }
  return z;
}

Tensor initial_noise(std::span<const std::uint64_t> seeds, std::size_t seq_len, std::size_t latent_dim) {
  const std::size_t stride = seq_len * latent_dim;
  Tensor z({seeds.size(), seq_len, latent_dim});
  for (std::size_t b = 0; b < seeds.size(); ++b) {
    Rng rng(seeds[b]);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < stride; ++i) z[b * stride + i] = normal(rng);
  }
  return z;
}

namespace {

Tensor stack_twice(const Tensor& z) {
  Shape s = z.shape();
  s[0] *= 2;
  std::vector<double> data(z.storage());
  data.insert(data.end(), z.storage().begin(), z.storage().end());
  return Tensor(std::move(s), std::move(data));
}

std::pair<Tensor, Tensor> split_halves(const Tensor& v) {
  Shape s = v.shape();
  s[0] /= 2;
  const auto half = static_cast<std::ptrdiff_t>(v.size() / 2);
  return {Tensor(s, std::vector<double>(v.storage().begin(), v.storage().begin() + half)),
          Tensor(s, std::vector<double>(v.storage().begin() + half, v.storage().end()))};
}

}  // namespace

Tensor sample(const DenoiserModel& model, const VaeModel* classifier, std::span<const Condition> conds,
              const NoiseSchedule& schedule, const GuidanceConfig& guidance, std::span<const std::uint64_t> seeds,
              SamplingStats* stats) {
  guidance.validate(schedule.steps());
  const std::size_t B = conds.size();
  if (B == 0 || seeds.size() != B) throw std::invalid_argument("sample: need one seed per condition");
  if (model.config().steps != schedule.steps()) throw std::invalid_argument("denoiser T differs from schedule T");
  std::vector<int> labels(B);
  for (std::size_t b = 0; b < B; ++b) {
    if (conds[b].is_null()) throw std::invalid_argument("sample: conditions must carry a source latent");
    labels[b] = conds[b].label();
  }
  if (guidance.mode == GuidanceMode::kCg) {
    if (classifier == nullptr) throw std::invalid_argument("cg mode requires the latent classifier");
    if (!classifier->frozen()) throw std::logic_error("cg mode requires a frozen classifier");
  }

  std::vector<Condition> both(conds.begin(), conds.end());
  if (guidance.mode == GuidanceMode::kCfg) both.resize(2 * B, Condition::null());

  VelocityFn v_fn = [&](const Tensor& z, int t) -> Tensor {
    switch (guidance.mode) {
      case GuidanceMode::kCfg: {
        // Conditional and null branches share one batched forward pass.
        const std::vector<int> ts(2 * B, t);
        auto [v_c, v_u] = split_halves(model.predict_v(stack_twice(z), ts, both));
        return cfg_combine(v_c, v_u, guidance.gamma);
      }
      case GuidanceMode::kCg: {
        const std::vector<int> ts(B, t);
        Tensor v_c = model.predict_v(z, ts, conds);
        Tensor eps = recover_eps(schedule, z, v_c, t);
        Tensor grad = classifier_grad_logp(*classifier, z, labels);
        return v_from_eps(schedule, z, cg_adjust(eps, grad, guidance.gamma, schedule.sigma(t)), t);
      }
      case GuidanceMode::kNone: break;
    }
    const std::vector<int> ts(B, t);
    return model.predict_v(z, ts, conds);
  };

  const auto S = static_cast<std::size_t>(model.config().seq_len), D = static_cast<std::size_t>(model.config().latent_dim);
  const auto start = std::chrono::steady_clock::now();
  Tensor out = ddim_sample(initial_noise(seeds, S, D), v_fn, schedule, guidance.ddim_steps);
  if (stats) {
    stats->steps = guidance.ddim_steps;
    stats->seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  return out;
}

}  // namespace regdiff
