#include "regdiff/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace regdiff {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 2) throw std::invalid_argument("noise schedule needs at least 2 steps");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument("noise schedule requires 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  const auto n = static_cast<std::size_t>(steps);
  s.beta_.resize(n);
  s.alpha_.resize(n);
  s.alpha_bar_.resize(n);
  s.sigma_.resize(n);
  s.sqrt_alpha_bar_.resize(n);
  double cumulative = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(n - 1);
    s.beta_[i] = i + 1 == n ? beta_end : beta_start + frac * (beta_end - beta_start);
    s.alpha_[i] = 1.0 - s.beta_[i];
    cumulative *= s.alpha_[i];
    s.alpha_bar_[i] = cumulative;
    s.sigma_[i] = std::sqrt(1.0 - cumulative);
    s.sqrt_alpha_bar_[i] = std::sqrt(cumulative);
  }
  return s;
}

void NoiseSchedule::check_step(int t) const {
  if (t < 1 || t > steps())
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
}

std::size_t NoiseSchedule::index(int t) const {
  check_step(t);
  return static_cast<std::size_t>(t - 1);
}

namespace {

// a * x + b * y, elementwise.
Tensor affine(const Tensor& x, double a, const Tensor& y, double b) {
  if (x.shape() != y.shape())
    throw ShapeError("latent shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x[i] + b * y[i];
  return out;
}

}  // namespace

Tensor diffuse(const NoiseSchedule& s, const Tensor& x0, const Tensor& eps, int t) {
  return affine(x0, s.sqrt_alpha_bar(t), eps, s.sigma(t));
}

Tensor v_target(const NoiseSchedule& s, const Tensor& x0, const Tensor& eps, int t) {
  return affine(eps, s.sqrt_alpha_bar(t), x0, -s.sigma(t));
}

Tensor recover_x0(const NoiseSchedule& s, const Tensor& x_t, const Tensor& v, int t) {
  return affine(x_t, s.sqrt_alpha_bar(t), v, -s.sigma(t));
}

Tensor recover_eps(const NoiseSchedule& s, const Tensor& x_t, const Tensor& v, int t) {
  return affine(x_t, s.sigma(t), v, s.sqrt_alpha_bar(t));
}

Tensor v_from_eps(const NoiseSchedule& s, const Tensor& x_t, const Tensor& eps, int t) {
  const double a = s.sqrt_alpha_bar(t);
  return affine(eps, 1.0 / a, x_t, -s.sigma(t) / a);
}

}  // namespace regdiff
