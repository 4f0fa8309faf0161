#pragma once

// Building blocks shared by the VAE and the denoiser. Parameters live in a
// ParameterSet under dotted prefixes; forward functions pull them through a
// ParamBinder.

#include <string>

#include "regdiff/params.hpp"

namespace regdiff::nn {

void init_linear(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                 double gain = 1.0);
void init_layer_norm(ParameterSet& ps, const std::string& prefix, std::size_t dim);
void init_attention(ParameterSet& ps, const std::string& prefix, std::size_t dim, Rng& rng);
void init_ffn(ParameterSet& ps, const std::string& prefix, std::size_t dim, std::size_t hidden, Rng& rng);

// x [N, in] -> [N, out]
Var linear(ParamBinder& p, const std::string& prefix, Var x);
Var layer_norm(ParamBinder& p, const std::string& prefix, Var x);
// Two linears with ReLU between.
Var ffn(ParamBinder& p, const std::string& prefix, Var x);

// Multi-head scaled dot-product attention. queries [B*Sq, H], keys_values
// [B*Sk, H]; returns [B*Sq, H]. Self-attention passes the same Var twice.
Var attention(ParamBinder& p, const std::string& prefix, Var queries, Var keys_values, std::size_t batch,
              std::size_t q_len, std::size_t kv_len, std::size_t heads);

// Attention probabilities [B*heads, Sq, Sk] for inspection and tests.
Tensor attention_weights(ParamBinder& p, const std::string& prefix, Var queries, Var keys_values, std::size_t batch,
                         std::size_t q_len, std::size_t kv_len, std::size_t heads);

// Pre-norm encoder block: x + attn(ln(x)), then x + ffn(ln(x)).
void init_encoder_block(ParameterSet& ps, const std::string& prefix, std::size_t dim, std::size_t ffn_dim, Rng& rng);
Var encoder_block(ParamBinder& p, const std::string& prefix, Var x, std::size_t batch, std::size_t len,
                  std::size_t heads);

}  // namespace regdiff::nn
