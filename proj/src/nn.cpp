#include "regdiff/nn.hpp"

#include <cmath>

namespace regdiff::nn {

void init_linear(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                 double gain) {
  ps.add(prefix + ".w", init_normal({in, out}, gain / std::sqrt(static_cast<double>(in)), rng));
  ps.add(prefix + ".b", Tensor({out}, 0.0));
}

void init_layer_norm(ParameterSet& ps, const std::string& prefix, std::size_t dim) {
  ps.add(prefix + ".g", Tensor({dim}, 1.0));
  ps.add(prefix + ".b", Tensor({dim}, 0.0));
}

void init_attention(ParameterSet& ps, const std::string& prefix, std::size_t dim, Rng& rng) {
  for (const char* m : {".q", ".k", ".v"}) init_linear(ps, prefix + m, dim, dim, rng);
  init_linear(ps, prefix + ".o", dim, dim, rng, 0.5);
}

void init_ffn(ParameterSet& ps, const std::string& prefix, std::size_t dim, std::size_t hidden, Rng& rng) {
  init_linear(ps, prefix + ".l1", dim, hidden, rng, std::sqrt(2.0));
  init_linear(ps, prefix + ".l2", hidden, dim, rng, 0.5);
}

Var linear(ParamBinder& p, const std::string& prefix, Var x) {
  return add_row(matmul(x, p(prefix + ".w")), p(prefix + ".b"));
}

Var layer_norm(ParamBinder& p, const std::string& prefix, Var x) {
  return regdiff::layer_norm(x, p(prefix + ".g"), p(prefix + ".b"));
}

Var ffn(ParamBinder& p, const std::string& prefix, Var x) {
  return linear(p, prefix + ".l2", relu(linear(p, prefix + ".l1", x)));
}

namespace {

// [B*S, H] -> [B*heads, S, H/heads]
Var split_heads(Var x, std::size_t batch, std::size_t len, std::size_t heads) {
  const std::size_t dim = x.dim(1);
  Var r = reshape(x, {batch, len, heads, dim / heads});
  r = permute(r, {0, 2, 1, 3});
  return reshape(r, {batch * heads, len, dim / heads});
}

Var merge_heads(Var x, std::size_t batch, std::size_t len, std::size_t heads) {
  const std::size_t head_dim = x.dim(2);
  Var r = reshape(x, {batch, heads, len, head_dim});
  r = permute(r, {0, 2, 1, 3});
  return reshape(r, {batch * len, heads * head_dim});
}

Var attention_probs(ParamBinder& p, const std::string& prefix, Var q_in, Var kv_in, std::size_t batch,
                    std::size_t q_len, std::size_t kv_len, std::size_t heads, Var* values_out) {
  const std::size_t dim = q_in.dim(1);
  if (dim % heads != 0) throw ShapeError("attention: hidden size not divisible by head count");
  Var q = split_heads(linear(p, prefix + ".q", q_in), batch, q_len, heads);
  Var k = split_heads(linear(p, prefix + ".k", kv_in), batch, kv_len, heads);
  *values_out = split_heads(linear(p, prefix + ".v", kv_in), batch, kv_len, heads);
  Var scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dim / heads)));
  return softmax(scores);
}

}  // namespace

Var attention(ParamBinder& p, const std::string& prefix, Var queries, Var keys_values, std::size_t batch,
              std::size_t q_len, std::size_t kv_len, std::size_t heads) {
  Var values;
  Var probs = attention_probs(p, prefix, queries, keys_values, batch, q_len, kv_len, heads, &values);
  Var mixed = merge_heads(matmul(probs, values), batch, q_len, heads);
  return linear(p, prefix + ".o", mixed);
}

Tensor attention_weights(ParamBinder& p, const std::string& prefix, Var queries, Var keys_values, std::size_t batch,
                         std::size_t q_len, std::size_t kv_len, std::size_t heads) {
  Var values;
  return attention_probs(p, prefix, queries, keys_values, batch, q_len, kv_len, heads, &values).value();
}

void init_encoder_block(ParameterSet& ps, const std::string& prefix, std::size_t dim, std::size_t ffn_dim, Rng& rng) {
  init_layer_norm(ps, prefix + ".ln1", dim);
  init_attention(ps, prefix + ".attn", dim, rng);
  init_layer_norm(ps, prefix + ".ln2", dim);
  init_ffn(ps, prefix + ".ffn", dim, ffn_dim, rng);
}

Var encoder_block(ParamBinder& p, const std::string& prefix, Var x, std::size_t batch, std::size_t len,
                  std::size_t heads) {
  Var h = layer_norm(p, prefix + ".ln1", x);
  x = add(x, attention(p, prefix + ".attn", h, h, batch, len, len, heads));
  x = add(x, ffn(p, prefix + ".ffn", layer_norm(p, prefix + ".ln2", x)));
  return x;
}

}  // namespace regdiff::nn
