#pragma once

#include <vector>

#include "regdiff/tensor.hpp"

namespace regdiff {

// Precomputed variance schedule. Timesteps are 1-indexed: t in [1, T].
class NoiseSchedule {
 public:
  static constexpr double kDefaultBetaStart = 1e-4;
  static constexpr double kDefaultBetaEnd = 0.02;
  static constexpr int kDefaultSteps = 1000;

  // beta_t = start + (t-1)/(T-1) * (end - start).
  static NoiseSchedule linear(int steps = kDefaultSteps, double beta_start = kDefaultBetaStart,
                              double beta_end = kDefaultBetaEnd);

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_[index(t)]; }
  double alpha(int t) const { return alpha_[index(t)]; }
  double alpha_bar(int t) const { return alpha_bar_[index(t)]; }
  // Marginal noise std sqrt(1 - alpha_bar_t).
  double sigma(int t) const { return sigma_[index(t)]; }
  double sqrt_alpha_bar(int t) const { return sqrt_alpha_bar_[index(t)]; }

  void check_step(int t) const;

 private:
  std::size_t index(int t) const;
  std::vector<double> beta_, alpha_, alpha_bar_, sigma_, sqrt_alpha_bar_;
};

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
Tensor diffuse(const NoiseSchedule& s, const Tensor& x0, const Tensor& eps, int t);
// v = sqrt(abar_t) eps - sqrt(1 - abar_t) x0
Tensor v_target(const NoiseSchedule& s, const Tensor& x0, const Tensor& eps, int t);
// x0 = sqrt(abar_t) x_t - sqrt(1 - abar_t) v
Tensor recover_x0(const NoiseSchedule& s, const Tensor& x_t, const Tensor& v, int t);
// eps = sqrt(1 - abar_t) x_t + sqrt(abar_t) v
Tensor recover_eps(const NoiseSchedule& s, const Tensor& x_t, const Tensor& v, int t);
// Inverse of recover_eps at fixed (x_t, t).
Tensor v_from_eps(const NoiseSchedule& s, const Tensor& x_t, const Tensor& eps, int t);

}  // namespace regdiff
