#include "regdiff/params.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace regdiff {

Tensor& ParameterSet::add(const std::string& name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  index_[name] = values_.size();
  names_.push_back(name);
  values_.push_back(std::move(value));
  return values_.back();
}

std::size_t ParameterSet::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

std::uint64_t ParameterSet::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (std::size_t i = 0; i < values_.size(); ++i) {
    mix(names_[i].data(), names_[i].size());
    for (auto d : values_[i].shape()) mix(&d, sizeof d);
    mix(values_[i].data().data(), values_[i].size() * sizeof(double));
  }
  return h;
}

ParamBinder::ParamBinder(Graph& graph, const ParameterSet& params, bool trainable)
    : graph_(graph), params_(params), trainable_(trainable), node_of_(params.size(), -1) {}

Var ParamBinder::operator()(const std::string& name) {
  const std::size_t i = params_.index_of(name);
  if (node_of_[i] < 0) {
    Var v = trainable_ ? graph_.leaf(params_.value(i), true) : graph_.constant(params_.value(i));
    node_of_[i] = v.id;
  }
  return Var{&graph_, node_of_[i]};
}

std::vector<Tensor> ParamBinder::gradients() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (node_of_[i] < 0) {
      out.emplace_back(params_.value(i).shape(), 0.0);
    } else {
      out.push_back(graph_.grad(Var{&graph_, node_of_[i]}));
    }
  }
  return out;
}

Adam::Adam(const ParameterSet& params, AdamConfig config) : config_(config) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_.emplace_back(params.value(i).size(), 0.0);
    v_.emplace_back(params.value(i).size(), 0.0);
  }
}

void Adam::step(ParameterSet& params, const std::vector<Tensor>& grads) {
  if (grads.size() != params.size()) throw std::invalid_argument("Adam: gradient count mismatch");
  double scale = 1.0;
  if (config_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& g : grads)
      for (double x : g.data()) sq += x * x;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("Adam: non-finite gradient norm");
    if (norm > config_.clip_norm) scale = config_.clip_norm / norm;
  }
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params.value(i).data();
    auto g = grads[i].data();
    if (g.size() != p.size()) throw ShapeError("Adam: gradient shape mismatch for " + params.name(i));
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k] * scale;
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * gk;
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * gk * gk;
      p[k] -= config_.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + config_.eps);
    }
  }
}

Tensor init_normal(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& x : t.data()) x = dist(rng);
  return t;
}

Tensor standard_normal(Shape shape, Rng& rng) { return init_normal(std::move(shape), 1.0, rng); }

}  // namespace regdiff
