#pragma once

#include <random>

#include "regdiff/tensor.hpp"

namespace testing {

inline regdiff::Tensor random_tensor(const regdiff::Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  regdiff::Tensor t(shape);
  for (double& v : t.data()) v = n(rng);
  return t;
}

// Values bounded away from zero, for ops with a kink there.
inline regdiff::Tensor away_from_zero(const regdiff::Shape& shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.05, 2.0);
  std::bernoulli_distribution sign(0.5);
  regdiff::Tensor t(shape);
  for (double& v : t.data()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

// sum(w * y) with fixed random w, so every output coordinate is exercised.
inline regdiff::Var weighted_sum(regdiff::Var y, const regdiff::Tensor& w) {
  return regdiff::sum(regdiff::mul(y, y.graph->constant(w)));
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace testing
