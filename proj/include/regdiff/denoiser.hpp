#pragma once

// Conditional velocity-prediction network over S x D latent sequences.
//
// One parameter set serves both guidance branches: a dropped condition is
// replaced by a learned null latent and a reserved "no label" embedding, so
// the conditional and unconditional predictions differ only in the
// condition stream fed to cross-attention.

#include <span>
#include <vector>

#include "regdiff/params.hpp"

namespace regdiff {

struct DenoiserConfig {
  int latent_dim = 16;
  int seq_len = 16;
  int hidden = 64;
  int heads = 4;
  int layers = 2;
  int ffn_dim = 128;
  int num_labels = 2;
  int steps = 1000;  // T, for timestep validation

  void validate() const;
  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

class Condition {
 public:
  enum class Kind { kSource, kNull };

  // z_src is [S, D]; `label` is the attribute the output should carry.
  static Condition source(Tensor z_src, int label);
  static Condition null() { return Condition(); }

  Kind kind() const { return kind_; }
  bool is_null() const { return kind_ == Kind::kNull; }
  const Tensor& latent() const;
  int label() const;

 private:
  Condition() = default;
  Kind kind_ = Kind::kNull;
  Tensor source_;
  int label_ = -1;
};

// Null when u < p_drop, otherwise `cond` unchanged.
Condition drop_condition(const Condition& cond, double u, double p_drop);

// Sinusoidal embedding of timestep t in [1, T]: sin(t w_i) for the first
// half, cos(t w_i) for the second, w_i = 10000^(-i / (dim/2)).
std::vector<double> time_embedding(int t, int steps, std::size_t dim);

class DenoiserModel {
 public:
  static DenoiserModel init(const DenoiserConfig& config, std::uint64_t seed);
  DenoiserModel(DenoiserConfig config, ParameterSet params);

  const DenoiserConfig& config() const { return config_; }
  const ParameterSet& params() const { return params_; }
  ParameterSet& params() { return params_; }

  // z_t [B, S, D]; one timestep and condition per batch row. Returns [B, S, D].
  Var predict_v(ParamBinder& p, Var z_t, std::span<const int> t, std::span<const Condition> conds) const;
  Tensor predict_v(const Tensor& z_t, std::span<const int> t, std::span<const Condition> conds) const;

  // Cross-attention probabilities of layer `layer` ([B*heads, S, S]).
  Tensor cross_attention_weights(const Tensor& z_t, std::span<const int> t, std::span<const Condition> conds,
                                 int layer) const;

 private:
  struct Streams {
    Var x, c;
  };
  Streams embed(ParamBinder& p, Var z_t, std::span<const int> t, std::span<const Condition> conds) const;

  DenoiserConfig config_;
  ParameterSet params_;
};

}  // namespace regdiff
