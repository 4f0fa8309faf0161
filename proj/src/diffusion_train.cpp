#include "regdiff/diffusion_train.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <ostream>

namespace regdiff {

void DiffTrainConfig::validate() const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
  if (!(p_drop >= 0.0 && p_drop < 1.0)) throw std::invalid_argument("p_drop must be in [0, 1)");
  if (epochs < 0 || batch_size < 1 || !(lr >= 0.0)) throw std::invalid_argument("bad diffusion training config");
}

LatentPairs make_latent_pairs(const Dataset& ds, const VaeModel& vae) {
  if (!vae.frozen()) throw std::logic_error("latents must come from a frozen VAE");
  if (ds.examples.empty()) throw std::invalid_argument("make_latent_pairs: empty dataset");
  std::vector<Tokens> src, tgt;
  std::vector<int> labels;
  for (const auto& ex : ds.examples) {
    if (ds.mode == PairMode::kParallel) {
      if (!ex.tgt) throw std::invalid_argument("parallel dataset record without target");
      src.push_back(ex.src);
      tgt.push_back(*ex.tgt);
      labels.push_back(ex.tgt_label);
      src.push_back(*ex.tgt);
      tgt.push_back(ex.src);
      labels.push_back(ex.src_label);
    } else {
      src.push_back(ex.src);
      labels.push_back(ex.src_label);
    }
  }
  LatentPairs out;
  out.z_src = vae.encode_mean(src);
  out.z_tgt = ds.mode == PairMode::kParallel ? vae.encode_mean(tgt) : out.z_src;
  out.labels = std::move(labels);
  return out;
}

TrainBatch gather_batch(const LatentPairs& pairs, std::span<const std::size_t> rows) {
  const std::size_t S = pairs.z_src.dim(1), D = pairs.z_src.dim(2), stride = S * D;
  TrainBatch b{Tensor({rows.size(), S, D}), Tensor({rows.size(), S, D}), {}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto off = static_cast<std::ptrdiff_t>(rows[i] * stride);
    const auto dst = static_cast<std::ptrdiff_t>(i * stride);
    std::copy_n(pairs.z_src.data().begin() + off, stride, b.z_src.data().begin() + dst);
    std::copy_n(pairs.z_tgt.data().begin() + off, stride, b.z_tgt.data().begin() + dst);
    b.labels.push_back(pairs.labels[rows[i]]);
  }
  return b;
}

Var diffusion_loss(Var v_pred, Var v_target) {
  if (v_pred.shape() != v_target.shape()) throw ShapeError("diffusion_loss: shape mismatch");
  return mean(square(sub(v_pred, v_target)));
}

Var regularization_loss(Var v_pred, const Tensor& z_t, std::span<const int> t, std::span<const int> labels,
                        const NoiseSchedule& schedule, const VaeModel& classifier, std::span<const int> rows) {
  const Shape& s = v_pred.shape();
  if (s.size() != 3 || z_t.shape() != s) throw ShapeError("regularization_loss: expected matching [B, S, D] inputs");
  const std::size_t B = s[0], stride = s[1] * s[2];
  if (t.size() != B || labels.size() != B) throw ShapeError("regularization_loss: per-row t and label required");
  // x0_hat = sqrt(abar_t) z_t - sqrt(1 - abar_t) v_pred, per row.
  Tensor scaled_zt(s), neg_sigma(s);
  for (std::size_t b = 0; b < B; ++b) {
    const double a = schedule.sqrt_alpha_bar(t[b]), sg = schedule.sigma(t[b]);
    for (std::size_t i = 0; i < stride; ++i) {
      scaled_zt[b * stride + i] = a * z_t[b * stride + i];
      neg_sigma[b * stride + i] = -sg;
    }
  }
  Graph& g = *v_pred.graph;
  Var x0_hat = add(g.constant(std::move(scaled_zt)), mul(g.constant(std::move(neg_sigma)), v_pred));
  ParamBinder frozen(g, classifier.params(), false);
  Var pooled = pool(x0_hat, B);
  if (rows.empty()) return cross_entropy(classifier.classifier_logits(frozen, pooled), labels);
  std::vector<int> kept_labels;
  for (int r : rows) kept_labels.push_back(labels[static_cast<std::size_t>(r)]);
  return cross_entropy(classifier.classifier_logits(frozen, embedding(pooled, rows)), kept_labels);
}

LossComponents train_step(const TrainBatch& batch, DenoiserModel& model, const DiffTrainConfig& config, Rng& rng,
                          Adam& optimizer, const NoiseSchedule& schedule, const VaeModel* classifier) {
  const std::size_t B = batch.labels.size();
  const Shape& s = batch.z_tgt.shape();
  if (s.size() != 3 || s[0] != B || batch.z_src.shape() != s) throw ShapeError("train_step: malformed batch");
  const std::size_t S = s[1], D = s[2], stride = S * D;
  const bool regularize = config.lambda > 0.0;
  if (regularize && classifier == nullptr) throw std::invalid_argument("lambda > 0 requires the frozen classifier");

  std::uniform_int_distribution<int> pick_t(1, schedule.steps());
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<int> t(B);
  Tensor z_t(s), v(s);
  std::vector<Condition> conds;
  conds.reserve(B);
  for (std::size_t b = 0; b < B; ++b) {
    t[b] = pick_t(rng);
    const double a = schedule.sqrt_alpha_bar(t[b]), sg = schedule.sigma(t[b]);
    for (std::size_t i = 0; i < stride; ++i) {
      const double eps = normal(rng);
      const double x0 = batch.z_tgt[b * stride + i];
      z_t[b * stride + i] = a * x0 + sg * eps;
      v[b * stride + i] = a * eps - sg * x0;
    }
    std::vector<double> src(batch.z_src.data().begin() + static_cast<std::ptrdiff_t>(b * stride),
                            batch.z_src.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * stride));
    conds.push_back(drop_condition(Condition::source(Tensor({S, D}, std::move(src)), batch.labels[b]), unit(rng),
                                   config.p_drop));
  }

  Graph g;
  ParamBinder p(g, model.params(), true);
  Var v_pred = model.predict_v(p, g.constant(z_t), t, conds);
  Var l_diff = diffusion_loss(v_pred, g.constant(std::move(v)));
  LossComponents out;
  out.diffusion = l_diff.value().item();
  Var total = l_diff;
  std::vector<int> kept;
  if (!config.regularize_dropped)
    for (std::size_t b = 0; b < B; ++b)
      if (!conds[b].is_null()) kept.push_back(static_cast<int>(b));
  if (regularize && (config.regularize_dropped || !kept.empty())) {
    Var l_cls = regularization_loss(v_pred, z_t, t, batch.labels, schedule, *classifier, kept);
    out.classifier = l_cls.value().item();
    total = add(l_diff, scale(l_cls, config.lambda));
  }
  out.total = total.value().item();
  g.backward(total);
  optimizer.step(model.params(), p.gradients());
  return out;
}

DenoiserModel train_diffusion(const LatentPairs& data, const VaeModel* vae, const DenoiserConfig& model_config,
                              const DiffTrainConfig& config, const NoiseSchedule& schedule,
                              const DiffEpochCallback& on_epoch) {
  config.validate();
  if (data.size() == 0) throw std::invalid_argument("train_diffusion: no training pairs");
  if (vae != nullptr && !vae->frozen()) throw std::logic_error("diffusion training requires a frozen VAE");
  if (model_config.steps != schedule.steps()) throw std::invalid_argument("denoiser T differs from schedule T");
  DenoiserModel model = DenoiserModel::init(model_config, config.seed);
  Adam opt(model.params(), AdamConfig{.lr = config.lr});
  Rng rng(config.seed ^ 0xd1b54a32d192ed03ULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    DiffEpochLog log{epoch, {}};
    std::size_t batches = 0;
    for (std::size_t off = 0; off < order.size(); off += bs) {
      const std::size_t n = std::min(bs, order.size() - off);
      TrainBatch batch = gather_batch(data, std::span(order).subspan(off, n));
      LossComponents lc;
      try {
        lc = train_step(batch, model, config, rng, opt, schedule, vae);
      } catch (const NumericError& e) {
        throw NumericError("diffusion training diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches) + ": " + e.what());
      }
      log.loss.diffusion += lc.diffusion;
      log.loss.classifier += lc.classifier;
      log.loss.total += lc.total;
      ++batches;
    }
    const double inv = 1.0 / static_cast<double>(batches);
    log.loss.diffusion *= inv;
    log.loss.classifier *= inv;
    log.loss.total *= inv;
    if (on_epoch) on_epoch(log);
  }
  return model;
}

void write_loss_header(std::ostream& os) { os << "epoch\tdiffusion_loss\tclassifier_loss\ttotal\n"; }

void write_loss_line(std::ostream& os, const DiffEpochLog& log) {
  os << log.epoch << '\t' << std::setprecision(9) << log.loss.diffusion << '\t' << log.loss.classifier << '\t'
     << log.loss.total << '\n';
}

}  // namespace regdiff
