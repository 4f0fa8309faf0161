#include "regdiff/denoiser.hpp"

#include <cmath>

#include "regdiff/nn.hpp"

namespace regdiff {

void DenoiserConfig::validate() const {
  if (latent_dim < 1 || seq_len < 1 || hidden < 2 || heads < 1 || layers < 0 || ffn_dim < 1 || num_labels < 1 ||
      steps < 2)
    throw std::invalid_argument("denoiser dims must be positive");
  if (hidden % heads != 0) throw std::invalid_argument("denoiser hidden size must be divisible by heads");
  if (hidden % 2 != 0) throw std::invalid_argument("denoiser hidden size must be even");
}

Condition Condition::source(Tensor z_src, int label) {
  if (z_src.rank() != 2) throw ShapeError("condition latent must be [S, D], got " + shape_str(z_src.shape()));
  if (label < 0) throw std::invalid_argument("condition label must be >= 0");
  Condition c;
  c.kind_ = Kind::kSource;
  c.source_ = std::move(z_src);
  c.label_ = label;
  return c;
}

const Tensor& Condition::latent() const {
  if (is_null()) throw std::logic_error("null condition has no latent");
  return source_;
}

int Condition::label() const {
  if (is_null()) throw std::logic_error("null condition has no label");
  return label_;
}

Condition drop_condition(const Condition& cond, double u, double p_drop) {
  if (!(p_drop >= 0.0 && p_drop < 1.0)) throw std::invalid_argument("p_drop must be in [0, 1)");
  return u < p_drop ? Condition::null() : cond;
}

std::vector<double> time_embedding(int t, int steps, std::size_t dim) {
  if (t < 1 || t > steps) throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("time embedding dim must be even");
  const std::size_t half = dim / 2;
  std::vector<double> e(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double w = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    e[i] = std::sin(t * w);
    e[i + half] = std::cos(t * w);
  }
  return e;
}

DenoiserModel::DenoiserModel(DenoiserConfig config, ParameterSet params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
}

DenoiserModel DenoiserModel::init(const DenoiserConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed);
  ParameterSet ps;
  const auto D = static_cast<std::size_t>(c.latent_dim), S = static_cast<std::size_t>(c.seq_len),
             H = static_cast<std::size_t>(c.hidden), F = static_cast<std::size_t>(c.ffn_dim);
  nn::init_linear(ps, "in", D, H, rng);
  ps.add("pos", init_normal({S, H}, 0.5, rng));
  nn::init_linear(ps, "time.l1", H, H, rng, std::sqrt(2.0));
  nn::init_linear(ps, "time.l2", H, H, rng, 0.5);
  nn::init_linear(ps, "cond.in", D, H, rng);
  ps.add("cond.pos", init_normal({S, H}, 0.5, rng));
  // Row num_labels is the "no label" slot used by the null condition.
  ps.add("cond.label", init_normal({static_cast<std::size_t>(c.num_labels) + 1, H}, 0.5, rng));
  nn::init_layer_norm(ps, "cond.ln", H);
  ps.add("null", init_normal({S, D}, 1.0, rng));
  for (int i = 0; i < c.layers; ++i) {
    const std::string pre = "l" + std::to_string(i);
    nn::init_layer_norm(ps, pre + ".ln1", H);
    nn::init_attention(ps, pre + ".self", H, rng);
    nn::init_layer_norm(ps, pre + ".ln2", H);
    nn::init_attention(ps, pre + ".cross", H, rng);
    nn::init_layer_norm(ps, pre + ".ln3", H);
    nn::init_ffn(ps, pre + ".ffn", H, F, rng);
  }
  nn::init_layer_norm(ps, "out.ln", H);
  nn::init_linear(ps, "out", H, D, rng, 0.5);
  return DenoiserModel(c, std::move(ps));
}

DenoiserModel::Streams DenoiserModel::embed(ParamBinder& p, Var z_t, std::span<const int> t,
                                            std::span<const Condition> conds) const {
  const auto D = static_cast<std::size_t>(config_.latent_dim), S = static_cast<std::size_t>(config_.seq_len),
             H = static_cast<std::size_t>(config_.hidden);
  const std::size_t B = conds.size();
  if (B == 0) throw ShapeError("denoiser: empty batch");
  if (t.size() != B) throw ShapeError("denoiser: one timestep per batch row required");
  if (z_t.shape() != Shape{B, S, D}) throw ShapeError("denoiser: z_t must be " + shape_str({B, S, D}) + ", got " + shape_str(z_t.shape()));
  Graph& g = p.graph();

  Tensor temb({B, H});
  for (std::size_t b = 0; b < B; ++b) {
    auto e = time_embedding(t[b], config_.steps, H);
    std::copy(e.begin(), e.end(), temb.data().begin() + static_cast<std::ptrdiff_t>(b * H));
  }
  Var time = nn::linear(p, "time.l2", relu(nn::linear(p, "time.l1", g.constant(std::move(temb)))));

  Var x = nn::linear(p, "in", reshape(z_t, {B * S, D}));
  x = add(x, reshape(broadcast_axis(p("pos"), 0, B), {B * S, H}));
  x = add(x, reshape(broadcast_axis(time, 1, S), {B * S, H}));

  Tensor src({B * S, D}, 0.0), null_mask({B * S, D}, 0.0);
  std::vector<int> labels(B);
  bool any_null = false;
  for (std::size_t b = 0; b < B; ++b) {
    if (conds[b].is_null()) {
      any_null = true;
      labels[b] = config_.num_labels;
      std::fill_n(null_mask.data().begin() + static_cast<std::ptrdiff_t>(b * S * D), S * D, 1.0);
      continue;
    }
    const Tensor& z = conds[b].latent();
    if (z.shape() != Shape{S, D}) throw ShapeError("condition latent must be " + shape_str({S, D}));
    if (conds[b].label() >= config_.num_labels) throw std::out_of_range("condition label out of range");
    labels[b] = conds[b].label();
    std::copy(z.data().begin(), z.data().end(), src.data().begin() + static_cast<std::ptrdiff_t>(b * S * D));
  }
  Var c_in = g.constant(std::move(src));
  if (any_null) {
    Var nulls = reshape(broadcast_axis(p("null"), 0, B), {B * S, D});
    c_in = add(c_in, mul(g.constant(std::move(null_mask)), nulls));
  }
  Var c = nn::linear(p, "cond.in", c_in);
  c = add(c, reshape(broadcast_axis(p("cond.pos"), 0, B), {B * S, H}));
  c = add(c, reshape(broadcast_axis(embedding(p("cond.label"), labels), 1, S), {B * S, H}));
  c = nn::layer_norm(p, "cond.ln", c);
  return {x, c};
}

Var DenoiserModel::predict_v(ParamBinder& p, Var z_t, std::span<const int> t, std::span<const Condition> conds) const {
  const auto D = static_cast<std::size_t>(config_.latent_dim), S = static_cast<std::size_t>(config_.seq_len),
             heads = static_cast<std::size_t>(config_.heads);
  const std::size_t B = conds.size();
  auto [x, c] = embed(p, z_t, t, conds);
  for (int i = 0; i < config_.layers; ++i) {
    const std::string pre = "l" + std::to_string(i);
    Var h = nn::layer_norm(p, pre + ".ln1", x);
    x = add(x, nn::attention(p, pre + ".self", h, h, B, S, S, heads));
    x = add(x, nn::attention(p, pre + ".cross", nn::layer_norm(p, pre + ".ln2", x), c, B, S, S, heads));
    x = add(x, nn::ffn(p, pre + ".ffn", nn::layer_norm(p, pre + ".ln3", x)));
  }
  Var out = nn::linear(p, "out", nn::layer_norm(p, "out.ln", x));
  return reshape(out, {B, S, D});
}

Tensor DenoiserModel::predict_v(const Tensor& z_t, std::span<const int> t, std::span<const Condition> conds) const {
  Graph g(false);
  ParamBinder p(g, params_, false);
  return predict_v(p, g.constant(z_t), t, conds).value();
}

Tensor DenoiserModel::cross_attention_weights(const Tensor& z_t, std::span<const int> t,
                                              std::span<const Condition> conds, int layer) const {
  if (layer < 0 || layer >= config_.layers) throw std::out_of_range("layer index out of range");
  const auto S = static_cast<std::size_t>(config_.seq_len), heads = static_cast<std::size_t>(config_.heads);
  const std::size_t B = conds.size();
  Graph g(false);
  ParamBinder p(g, params_, false);
  auto [x, c] = embed(p, g.constant(z_t), t, conds);
  for (int i = 0;; ++i) {
    const std::string pre = "l" + std::to_string(i);
    Var h = nn::layer_norm(p, pre + ".ln1", x);
    x = add(x, nn::attention(p, pre + ".self", h, h, B, S, S, heads));
    Var q = nn::layer_norm(p, pre + ".ln2", x);
    if (i == layer) return nn::attention_weights(p, pre + ".cross", q, c, B, S, S, heads);
    x = add(x, nn::attention(p, pre + ".cross", q, c, B, S, S, heads));
    x = add(x, nn::ffn(p, pre + ".ffn", nn::layer_norm(p, pre + ".ln3", x)));
  }
}

}  // namespace regdiff
