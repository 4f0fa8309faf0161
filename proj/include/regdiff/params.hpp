#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "regdiff/tensor.hpp"

namespace regdiff {

using Rng = std::mt19937_64;

// Ordered, named collection of parameter tensors.
class ParameterSet {
 public:
  Tensor& add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index_of(const std::string& name) const;

  Tensor& get(const std::string& name) { return values_[index_of(name)]; }
  const Tensor& get(const std::string& name) const { return values_[index_of(name)]; }

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& value(std::size_t i) { return values_[i]; }
  const Tensor& value(std::size_t i) const { return values_[i]; }
  std::size_t scalar_count() const;

  // FNV-1a over names, shapes and raw value bytes.
  std::uint64_t checksum() const;

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Inserts parameters into a Graph on first use. Trainable binders create
// grad-requiring leaves; frozen ones create constants that never receive
// gradient.
class ParamBinder {
 public:
  ParamBinder(Graph& graph, const ParameterSet& params, bool trainable);

  Var operator()(const std::string& name);
  Graph& graph() { return graph_; }
  bool trainable() const { return trainable_; }

  // Gradients indexed like the ParameterSet; zeros for unused parameters.
  std::vector<Tensor> gradients() const;

 private:
  Graph& graph_;
  const ParameterSet& params_;
  bool trainable_;
  std::vector<int> node_of_;  // -1 when not yet bound
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables
};

class Adam {
 public:
  Adam(const ParameterSet& params, AdamConfig config);
  void step(ParameterSet& params, const std::vector<Tensor>& grads);
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  long steps_ = 0;
};

Tensor init_normal(Shape shape, double stddev, Rng& rng);
Tensor standard_normal(Shape shape, Rng& rng);

}  // namespace regdiff
