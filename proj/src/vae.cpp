#include "regdiff/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "regdiff/nn.hpp"

namespace regdiff {

namespace {

constexpr std::size_t kInferenceChunk = 256;

std::string layer(const char* stack, int i) { return std::string(stack) + ".l" + std::to_string(i); }

Var positions(ParamBinder& p, const std::string& name, std::size_t batch) {
  Var pos = p(name);
  const std::size_t s = pos.dim(0), e = pos.dim(1);
  return reshape(broadcast_axis(pos, 0, batch), {batch * s, e});
}

}  // namespace

void VaeConfig::validate() const {
  if (vocab < 2 || seq_len < 1 || latent_dim < 1 || model_dim < 1 || heads < 1 || layers < 0 || ffn_dim < 1 ||
      cls_hidden < 1)
    throw std::invalid_argument("VAE dims must be positive");
  if (model_dim % heads != 0) throw std::invalid_argument("VAE model_dim must be divisible by heads");
  if (refine_steps < 1 || refine_steps > 10) throw std::invalid_argument("refine_steps must be in [1, 10]");
}

VaeModel::VaeModel(VaeConfig config, ParameterSet params, bool frozen)
    : config_(config), params_(std::move(params)), frozen_(frozen) {
  config_.validate();
}

VaeModel VaeModel::init(const VaeConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed);
  ParameterSet ps;
  const auto V = static_cast<std::size_t>(c.vocab), S = static_cast<std::size_t>(c.seq_len),
             D = static_cast<std::size_t>(c.latent_dim), E = static_cast<std::size_t>(c.model_dim),
             F = static_cast<std::size_t>(c.ffn_dim), Hc = static_cast<std::size_t>(c.cls_hidden);
  ps.add("enc.tok", init_normal({V, E}, 0.5, rng));
  ps.add("enc.pos", init_normal({S, E}, 0.5, rng));
  for (int i = 0; i < c.layers; ++i) nn::init_encoder_block(ps, layer("enc", i), E, F, rng);
  nn::init_layer_norm(ps, "enc.ln_f", E);
  nn::init_linear(ps, "enc.out", E, 2 * D, rng, 0.5);

  nn::init_linear(ps, "dec.in", D, E, rng);
  ps.add("dec.tok", init_normal({V + 1, E}, 0.5, rng));
  ps.add("dec.pos", init_normal({S, E}, 0.5, rng));
  for (int i = 0; i < c.layers; ++i) nn::init_encoder_block(ps, layer("dec", i), E, F, rng);
  nn::init_layer_norm(ps, "dec.ln_f", E);
  nn::init_linear(ps, "dec.out", E, V, rng);

  nn::init_linear(ps, "cls.l1", D, Hc, rng, std::sqrt(2.0));
  nn::init_linear(ps, "cls.l2", Hc, 2, rng);
  return VaeModel(c, std::move(ps));
}

ParameterSet& VaeModel::mutable_params() {
  if (frozen_) throw FrozenModelError("VAE parameters are frozen");
  return params_;
}

VaeModel::Encoded VaeModel::encode(ParamBinder& p, std::span<const Tokens> batch) const {
  const auto S = static_cast<std::size_t>(config_.seq_len), D = static_cast<std::size_t>(config_.latent_dim);
  if (batch.empty()) throw ShapeError("encode: empty batch");
  std::vector<int> ids;
  ids.reserve(batch.size() * S);
  for (const auto& t : batch) {
    if (t.size() != S) throw ShapeError("encode: sentence length " + std::to_string(t.size()) + " != " + std::to_string(S));
    for (int id : t) {
      if (id < 0 || id >= config_.vocab) throw std::out_of_range("encode: token id " + std::to_string(id) + " out of vocabulary");
      ids.push_back(id);
    }
  }
  const std::size_t B = batch.size();
  Var h = add(embedding(p("enc.tok"), ids), positions(p, "enc.pos", B));
  for (int i = 0; i < config_.layers; ++i)
    h = nn::encoder_block(p, layer("enc", i), h, B, S, static_cast<std::size_t>(config_.heads));
  Var out = nn::linear(p, "enc.out", nn::layer_norm(p, "enc.ln_f", h));
  return {slice(out, 1, 0, D), clamp(slice(out, 1, D, D), kLogvarMin, kLogvarMax)};
}

Var VaeModel::decode_step(ParamBinder& p, Var z, std::span<const int> prev, std::size_t batch) const {
  const auto S = static_cast<std::size_t>(config_.seq_len);
  if (z.shape() != Shape{batch * S, static_cast<std::size_t>(config_.latent_dim)})
    throw ShapeError("decode: latent shape " + shape_str(z.shape()));
  Var h = add(nn::linear(p, "dec.in", z), embedding(p("dec.tok"), prev));
  h = add(h, positions(p, "dec.pos", batch));
  for (int i = 0; i < config_.layers; ++i)
    h = nn::encoder_block(p, layer("dec", i), h, batch, S, static_cast<std::size_t>(config_.heads));
  return nn::linear(p, "dec.out", nn::layer_norm(p, "dec.ln_f", h));
}

Var VaeModel::decode_nar(ParamBinder& p, Var z, std::size_t batch, int steps) const {
  if (steps < 1 || steps > 10) throw std::invalid_argument("refine steps must be in [1, 10]");
  std::vector<int> prev(batch * static_cast<std::size_t>(config_.seq_len), mask_token());
  Var logits = decode_step(p, z, prev, batch);
  for (int s = 1; s < steps; ++s) {
    prev = argmax_rows(logits.value());
    logits = decode_step(p, z, prev, batch);
  }
  return logits;
}

Var VaeModel::classifier_logits(ParamBinder& p, Var z_bar) const {
  return nn::linear(p, "cls.l2", relu(nn::linear(p, "cls.l1", z_bar)));
}

std::pair<Tensor, Tensor> VaeModel::encode(std::span<const Tokens> batch) const {
  const auto S = static_cast<std::size_t>(config_.seq_len), D = static_cast<std::size_t>(config_.latent_dim);
  if (batch.empty()) throw ShapeError("encode: empty batch");
  std::vector<double> mu, lv;
  mu.reserve(batch.size() * S * D);
  lv.reserve(batch.size() * S * D);
  for (std::size_t off = 0; off < batch.size(); off += kInferenceChunk) {
    const std::size_t n = std::min(kInferenceChunk, batch.size() - off);
    Graph g(false);
    ParamBinder p(g, params_, false);
    auto enc = encode(p, batch.subspan(off, n));
    mu.insert(mu.end(), enc.mu.value().data().begin(), enc.mu.value().data().end());
    lv.insert(lv.end(), enc.logvar.value().data().begin(), enc.logvar.value().data().end());
  }
  return {Tensor({batch.size(), S, D}, std::move(mu)), Tensor({batch.size(), S, D}, std::move(lv))};
}

Tensor VaeModel::decode_logits(const Tensor& z, int steps) const {
  const auto S = static_cast<std::size_t>(config_.seq_len), D = static_cast<std::size_t>(config_.latent_dim);
  if (z.rank() != 3 || z.dim(1) != S || z.dim(2) != D) throw ShapeError("decode: expected [B, S, D], got " + shape_str(z.shape()));
  const std::size_t B = z.dim(0), V = static_cast<std::size_t>(config_.vocab);
  std::vector<double> out;
  out.reserve(B * S * V);
  for (std::size_t off = 0; off < B; off += kInferenceChunk) {
    const std::size_t n = std::min(kInferenceChunk, B - off);
    Graph g(false);
    ParamBinder p(g, params_, false);
    std::vector<double> chunk(z.data().begin() + static_cast<std::ptrdiff_t>(off * S * D),
                              z.data().begin() + static_cast<std::ptrdiff_t>((off + n) * S * D));
    Var zv = g.constant(Tensor({n * S, D}, std::move(chunk)));
    Var logits = decode_nar(p, zv, n, steps);
    out.insert(out.end(), logits.value().data().begin(), logits.value().data().end());
  }
  return Tensor({B * S, V}, std::move(out));
}

std::vector<Tokens> VaeModel::decode(const Tensor& z, int steps) const {
  const auto S = static_cast<std::size_t>(config_.seq_len);
  const auto ids = argmax_rows(decode_logits(z, steps));
  std::vector<Tokens> out(z.dim(0));
  for (std::size_t b = 0; b < out.size(); ++b) out[b].assign(ids.begin() + static_cast<std::ptrdiff_t>(b * S),
                                                             ids.begin() + static_cast<std::ptrdiff_t>((b + 1) * S));
  return out;
}

Tensor VaeModel::classify(const Tensor& z_bar) const {
  if (z_bar.rank() != 2 || z_bar.dim(1) != static_cast<std::size_t>(config_.latent_dim))
    throw ShapeError("classify: expected [B, D]");
  Graph g(false);
  ParamBinder p(g, params_, false);
  return softmax(classifier_logits(p, g.constant(z_bar))).value();
}

Var reparameterize(Var mu, Var logvar, Var noise) { return add(mu, mul(exp(scale(logvar, 0.5)), noise)); }

Tensor reparameterize(const Tensor& mu, const Tensor& logvar, const Tensor& noise) {
  if (mu.shape() != logvar.shape() || mu.shape() != noise.shape()) throw ShapeError("reparameterize: shape mismatch");
  Tensor z(mu.shape());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = mu[i] + std::exp(0.5 * logvar[i]) * noise[i];
  return z;
}

Var pool(Var z, std::size_t batch) {
  if (z.value().rank() == 3) return mean_axis(z, 1);
  if (z.value().rank() != 2 || batch == 0 || z.dim(0) % batch != 0) throw ShapeError("pool: bad latent shape");
  const std::size_t len = z.dim(0) / batch;
  return mean_axis(reshape(z, {batch, len, z.dim(1)}), 1);
}

Tensor pool(const Tensor& z) {
  if (z.rank() == 2) {
    Graph g(false);
    return pool(g.constant(z.reshaped({1, z.dim(0), z.dim(1)})), 1).value().reshaped({z.dim(1)});
  }
  if (z.rank() != 3) throw ShapeError("pool: expected [S, D] or [B, S, D]");
  Graph g(false);
  return mean_axis(g.constant(z), 1).value();
}

VaeLossTerms vae_loss(const VaeModel& model, ParamBinder& p, std::span<const Tokens> tokens,
                      std::span<const int> labels, const VaeLossWeights& weights, const Tensor& noise) {
  if (weights.alpha < 0.0 || weights.beta < 0.0) throw std::invalid_argument("VAE loss weights must be >= 0");
  if (labels.size() != tokens.size()) throw ShapeError("vae_loss: label count mismatch");
  Graph& g = p.graph();
  const std::size_t B = tokens.size();
  auto enc = model.encode(p, tokens);
  if (noise.shape() != enc.mu.shape()) throw ShapeError("vae_loss: noise shape " + shape_str(noise.shape()));
  Var z = reparameterize(enc.mu, enc.logvar, g.constant(noise));

  std::vector<int> targets;
  targets.reserve(B * tokens[0].size());
  for (const auto& t : tokens) targets.insert(targets.end(), t.begin(), t.end());
  std::vector<int> prev(targets.size(), model.mask_token());
  Var first = model.decode_step(p, z, prev, B);
  Var refined = model.decode_step(p, z, argmax_rows(first.value()), B);
  Var recon = scale(add(cross_entropy(first, targets), cross_entropy(refined, targets)), 0.5);

  Var kl = kl_diag_gaussian(enc.mu, enc.logvar);
  Var cls = cross_entropy(model.classifier_logits(p, pool(z, B)), labels);
  Var total = add(recon, scale(kl, weights.alpha));
  if (weights.beta != 0.0) total = add(total, scale(cls, weights.beta));
  return {total, recon, kl, cls};
}

std::vector<LabeledTokens> vae_corpus(const Dataset& ds) {
  std::vector<LabeledTokens> out;
  for (const auto& ex : ds.examples) {
    out.push_back({ex.src, ex.src_label});
    if (ex.tgt) out.push_back({*ex.tgt, ex.tgt_label});
  }
  return out;
}

VaeModel train_vae(std::span<const LabeledTokens> corpus, const VaeConfig& config, const VaeTrainConfig& train,
                   std::uint64_t seed, const VaeEpochCallback& on_epoch) {
  if (corpus.empty()) throw std::invalid_argument("train_vae: empty corpus");
  if (train.epochs < 0 || train.batch_size < 1 || !(train.lr >= 0.0)) throw std::invalid_argument("train_vae: bad config");
  VaeModel model = VaeModel::init(config, seed);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Adam opt(model.params(), AdamConfig{.lr = train.lr});
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  const auto S = static_cast<std::size_t>(config.seq_len), D = static_cast<std::size_t>(config.latent_dim);
  for (int epoch = 1; epoch <= train.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    VaeEpochLog log{epoch, 0, 0, 0, 0};
    std::size_t batches = 0;
    for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(train.batch_size)) {
      const std::size_t n = std::min(static_cast<std::size_t>(train.batch_size), order.size() - off);
      std::vector<Tokens> toks;
      std::vector<int> labels;
      for (std::size_t i = 0; i < n; ++i) {
        toks.push_back(corpus[order[off + i]].tokens);
        labels.push_back(corpus[order[off + i]].label);
      }
      Tensor noise = standard_normal({n * S, D}, rng);
      try {
        Graph g;
        ParamBinder p(g, model.params(), true);
        auto terms = vae_loss(model, p, toks, labels, train.weights, noise);
        g.backward(terms.total);
        opt.step(model.mutable_params(), p.gradients());
        log.total += terms.total.value().item();
        log.recon += terms.recon.value().item();
        log.kl += terms.kl.value().item();
        log.cls += terms.cls.value().item();
      } catch (const NumericError& e) {
        throw NumericError("VAE training diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches) + ": " + e.what());
      }
      ++batches;
    }
    const double inv = 1.0 / static_cast<double>(batches);
    log.total *= inv;
    log.recon *= inv;
    log.kl *= inv;
    log.cls *= inv;
    if (on_epoch) on_epoch(log);
  }
  model.freeze();
  return model;
}

double reconstruction_accuracy(const VaeModel& model, std::span<const Tokens> sentences) {
  if (sentences.empty()) throw std::invalid_argument("reconstruction_accuracy: no sentences");
  auto decoded = model.decode(model.encode_mean(sentences));
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < sentences.size(); ++i)
    for (std::size_t j = 0; j < sentences[i].size(); ++j, ++total) hit += decoded[i][j] == sentences[i][j];
  return static_cast<double>(hit) / static_cast<double>(total);
}

double latent_classifier_accuracy(const VaeModel& model, std::span<const LabeledTokens> data) {
  if (data.empty()) throw std::invalid_argument("latent_classifier_accuracy: no data");
  std::vector<Tokens> toks;
  for (const auto& d : data) toks.push_back(d.tokens);
  Tensor probs = model.classify(pool(model.encode_mean(toks)));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int pred = probs.at(i, 1) > probs.at(i, 0) ? 1 : 0;
    hit += pred == data[i].label;
  }
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

}  // namespace regdiff
