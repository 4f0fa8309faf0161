#include "regdiff/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>

namespace regdiff {

// ---- oracle ---------------------------------------------------------------

std::vector<double> OracleClassifier::features(const Tokens& tokens) const {
  std::vector<double> f(w_.size(), 0.0);
  std::size_t n = 0;
  for (int tok : tokens) {
    if (tok == Grammar::kPad || tok < 0 || static_cast<std::size_t>(tok) >= f.size()) continue;
    f[static_cast<std::size_t>(tok)] += 1.0;
    ++n;
  }
  if (n > 0)
    for (double& x : f) x /= static_cast<double>(n);
  return f;
}

OracleClassifier OracleClassifier::train(std::span<const LabeledTokens> data, int vocab, int iterations, double lr) {
  if (data.empty()) throw std::invalid_argument("oracle: empty training data");
  if (vocab < 2) throw std::invalid_argument("oracle: vocab must be >= 2");
  OracleClassifier oc;
  oc.w_.assign(static_cast<std::size_t>(vocab), 0.0);
  std::vector<std::vector<double>> feats;
  feats.reserve(data.size());
  for (const auto& d : data) feats.push_back(oc.features(d.tokens));
  const double inv_n = 1.0 / static_cast<double>(data.size());
  constexpr double kL2 = 1e-4;
  std::vector<double> gw(oc.w_.size());
  for (int it = 0; it < iterations; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      double s = oc.b_;
      for (std::size_t j = 0; j < gw.size(); ++j) s += oc.w_[j] * feats[i][j];
      const double err = 1.0 / (1.0 + std::exp(-s)) - (data[i].label == 1 ? 1.0 : 0.0);
      for (std::size_t j = 0; j < gw.size(); ++j) gw[j] += err * feats[i][j];
      gb += err;
    }
    for (std::size_t j = 0; j < gw.size(); ++j) oc.w_[j] -= lr * (gw[j] * inv_n + kL2 * oc.w_[j]);
    oc.b_ -= lr * gb * inv_n;
  }
  return oc;
}

double OracleClassifier::prob_b(const Tokens& tokens) const {
  const auto f = features(tokens);
  double s = b_;
  for (std::size_t j = 0; j < f.size(); ++j) s += w_[j] * f[j];
  return 1.0 / (1.0 + std::exp(-s));
}

double OracleClassifier::accuracy(std::span<const LabeledTokens> data) const {
  if (data.empty()) throw std::invalid_argument("oracle accuracy: empty input");
  std::size_t hit = 0;
  for (const auto& d : data) hit += predict(d.tokens) == d.label;
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

// ---- metrics --------------------------------------------------------------

double style_accuracy(std::span<const Tokens> generated, std::span<const int> target_labels,
                      const OracleClassifier& oracle) {
  if (generated.empty()) throw std::invalid_argument("style_accuracy: empty input");
  if (generated.size() != target_labels.size()) throw std::invalid_argument("style_accuracy: size mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < generated.size(); ++i) hit += oracle.predict(generated[i]) == target_labels[i];
  return static_cast<double>(hit) / static_cast<double>(generated.size());
}

double cosine(std::span<const double> a, std::span<const double> b, bool* degenerate) {
  if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (degenerate) *degenerate = aa == 0.0 || bb == 0.0;
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

std::vector<double> semantic_similarity(std::span<const Tokens> a, std::span<const Tokens> b, const VaeModel& vae) {
  if (a.size() != b.size()) throw std::invalid_argument("semantic_similarity: size mismatch");
  if (a.empty()) return {};
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].empty() || b[i].empty()) throw std::invalid_argument("semantic_similarity: empty sentence");
  const Tensor pa = pool(vae.encode_mean(a)), pb = pool(vae.encode_mean(b));
  const std::size_t D = pa.dim(1);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    bool zero = false;
    out[i] = cosine(pa.data().subspan(i * D, D), pb.data().subspan(i * D, D), &zero);
    if (zero) std::cerr << "warning: zero sentence embedding, similarity set to 0\n";
  }
  return out;
}

double semantic_similarity(const Tokens& a, const Tokens& b, const VaeModel& vae) {
  return semantic_similarity(std::span(&a, 1), std::span(&b, 1), vae)[0];
}

double validity_rate(std::span<const Tokens> sentences, const Grammar& grammar) {
  if (sentences.empty()) throw std::invalid_argument("validity_rate: empty input");
  std::size_t ok = 0;
  for (const auto& s : sentences) ok += grammar_validity(grammar, s);
  return static_cast<double>(ok) / static_cast<double>(sentences.size());
}

double silhouette(const Tensor& x, std::span<const int> labels) {
  if (x.rank() != 2) throw ShapeError("silhouette: expected [N, D]");
  const std::size_t N = x.dim(0), D = x.dim(1);
  if (labels.size() != N) throw ShapeError("silhouette: one label per row required");
  if (N == 0) throw std::invalid_argument("silhouette: empty input");
  std::map<int, std::size_t> sizes;
  for (int l : labels) ++sizes[l];
  if (sizes.size() < 2) throw std::invalid_argument("silhouette: need at least two clusters");
  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    std::map<int, double> sums;
    for (std::size_t j = 0; j < N; ++j) {
      if (j == i) continue;
      double d2 = 0.0;
      for (std::size_t k = 0; k < D; ++k) {
        const double d = x.at(i, k) - x.at(j, k);
        d2 += d * d;
      }
      sums[labels[j]] += std::sqrt(d2);
    }
    const std::size_t own = sizes[labels[i]];
    if (own == 1) continue;
    const double a = sums[labels[i]] / static_cast<double>(own - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [l, n] : sizes)
      if (l != labels[i]) b = std::min(b, sums[l] / static_cast<double>(n));
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / static_cast<double>(N);
}

Tensor pca_2d(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("pca_2d: expected [N, D]");
  const std::size_t N = x.dim(0), D = x.dim(1);
  Tensor out({N, 2});
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat m = Eigen::Map<const Mat>(x.data().data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(D));
  m.rowwise() -= m.colwise().mean();
  const Eigen::MatrixXd cov = m.transpose() * m;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  const Eigen::MatrixXd& vecs = solver.eigenvectors();  // ascending eigenvalues
  for (std::size_t c = 0; c < 2 && c < D; ++c) {
    Eigen::VectorXd axis = vecs.col(static_cast<Eigen::Index>(D - 1 - c));
    Eigen::Index big = 0;
    axis.cwiseAbs().maxCoeff(&big);
    if (axis(big) < 0) axis = -axis;
    const Eigen::VectorXd proj = m * axis;
    for (std::size_t i = 0; i < N; ++i) out.at(i, c) = proj(static_cast<Eigen::Index>(i));
  }
  return out;
}

void export_embeddings(const Tensor& x, std::span<const int> labels, std::span<const std::string> split_tags,
                       const std::filesystem::path& path) {
  const std::size_t N = x.rank() == 2 ? x.dim(0) : 0;
  if (x.rank() != 2 && !x.empty()) throw ShapeError("export_embeddings: expected [N, D]");
  if (labels.size() != N || split_tags.size() != N) throw ShapeError("export_embeddings: one label and tag per row");
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "pc1,pc2,label,split\n";
  if (N > 0) {
    const Tensor p = pca_2d(x);
    os << std::setprecision(10);
    for (std::size_t i = 0; i < N; ++i) os << p.at(i, 0) << ',' << p.at(i, 1) << ',' << labels[i] << ',' << split_tags[i] << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

// ---- report ---------------------------------------------------------------

namespace {

DirectionMetrics mean_of(const std::vector<SeedMetrics>& rows, DirectionMetrics SeedMetrics::*dir) {
  DirectionMetrics m;
  if (rows.empty()) return m;
  for (const auto& r : rows) {
    m.style_accuracy += (r.*dir).style_accuracy;
    m.semantic_similarity += (r.*dir).semantic_similarity;
    m.validity_rate += (r.*dir).validity_rate;
    m.count += (r.*dir).count;
  }
  const double n = static_cast<double>(rows.size());
  m.style_accuracy /= n;
  m.semantic_similarity /= n;
  m.validity_rate /= n;
  m.count /= rows.size();
  return m;
}

void check_range(double v, double lo, double hi, const std::string& what) {
  if (!(v >= lo && v <= hi)) throw std::logic_error(what + " out of range: " + std::to_string(v));
}

void check(const DirectionMetrics& m, const std::string& prefix) {
  check_range(m.style_accuracy, 0.0, 1.0, prefix + "style_accuracy");
  check_range(m.semantic_similarity, -1.0, 1.0, prefix + "semantic_similarity");
  check_range(m.validity_rate, 0.0, 1.0, prefix + "validity_rate");
}

void write_dir(std::ostream& os, const std::string& prefix, const DirectionMetrics& m) {
  os << prefix << "style_accuracy=" << m.style_accuracy << '\n'
     << prefix << "semantic_similarity=" << m.semantic_similarity << '\n'
     << prefix << "validity_rate=" << m.validity_rate << '\n'
     << prefix << "count=" << m.count << '\n';
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

DirectionMetrics EvalReport::mean_a_to_b() const { return mean_of(per_seed, &SeedMetrics::a_to_b); }
DirectionMetrics EvalReport::mean_b_to_a() const { return mean_of(per_seed, &SeedMetrics::b_to_a); }

void EvalReport::validate() const {
  check_range(silhouette, -1.0, 1.0, "silhouette");
  for (const auto& s : per_seed) {
    check(s.a_to_b, "a_to_b.");
    check(s.b_to_a, "b_to_a.");
  }
}

void EvalReport::write(std::ostream& os) const {
  const auto old = os.precision(10);
  os << "guidance=" << guidance << '\n' << "gamma=" << gamma << '\n' << "ddim_steps=" << ddim_steps << '\n';
  os << "seeds=";
  for (std::size_t i = 0; i < per_seed.size(); ++i) os << (i ? "," : "") << per_seed[i].seed;
  os << '\n' << "silhouette=" << silhouette << '\n';
  for (const auto& s : per_seed) {
    const std::string p = "seed." + std::to_string(s.seed) + ".";
    write_dir(os, p + "a_to_b.", s.a_to_b);
    write_dir(os, p + "b_to_a.", s.b_to_a);
  }
  write_dir(os, "mean.a_to_b.", mean_a_to_b());
  write_dir(os, "mean.b_to_a.", mean_b_to_a());
  os.precision(old);
}

void EvalReport::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write(os);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

// ---- runs -----------------------------------------------------------------

std::vector<TransferItem> transfer_items(const Dataset& test) {
  std::vector<TransferItem> items;
  for (const auto& ex : test.examples) {
    if (test.mode == PairMode::kParallel) {
      if (!ex.tgt) throw std::invalid_argument("parallel test record without target");
      items.push_back({ex.src, *ex.tgt, ex.src_label, ex.tgt_label});
      items.push_back({*ex.tgt, ex.src, ex.tgt_label, ex.src_label});
    } else {
      items.push_back({ex.src, ex.src, ex.src_label, 1 - ex.src_label});
    }
  }
  return items;
}

std::vector<Tokens> transfer(const EvalModels& models, std::span<const TransferItem> items, std::uint64_t seed,
                             const EvalOptions& options, SamplingStats* stats) {
  if (options.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<Tokens> out;
  out.reserve(items.size());
  for (std::size_t off = 0; off < items.size(); off += options.batch_size) {
    const std::size_t n = std::min(options.batch_size, items.size() - off);
    std::vector<Tokens> sources;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < n; ++i) {
      sources.push_back(items[off + i].source);
      seeds.push_back(splitmix64(seed ^ splitmix64(off + i)));
    }
    const Tensor z_src = models.vae.encode_mean(sources);
    const std::size_t stride = z_src.size() / n;
    const Shape row{z_src.dim(1), z_src.dim(2)};
    std::vector<Condition> conds;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> z(z_src.data().begin() + static_cast<std::ptrdiff_t>(i * stride),
                            z_src.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * stride));
      conds.push_back(Condition::source(Tensor(row, std::move(z)), items[off + i].target_label));
    }
    SamplingStats batch_stats;
    const Tensor z = sample(models.denoiser, &models.vae, conds, models.schedule, options.guidance, seeds, &batch_stats);
    if (stats) {
      stats->steps += batch_stats.steps;
      stats->seconds += batch_stats.seconds;
    }
    for (auto& t : models.vae.decode(z)) out.push_back(std::move(t));
  }
  return out;
}

EvalReport evaluate_run(const EvalModels& models, const Dataset& test, std::span<const std::uint64_t> seeds,
                        const EvalOptions& options, SamplingStats* timing) {
  if (seeds.empty()) throw std::invalid_argument("evaluate_run: at least one seed required");
  if (!models.vae.frozen()) throw std::logic_error("evaluate_run: VAE must be frozen");
  const auto all = transfer_items(test);
  std::vector<TransferItem> dirs[2];
  for (const auto& it : all) {
    auto& d = dirs[it.source_label == 0 ? 0 : 1];
    if (options.max_per_direction == 0 || d.size() < options.max_per_direction) d.push_back(it);
  }
  if (dirs[0].empty() || dirs[1].empty()) throw std::invalid_argument("evaluate_run: test split lacks a direction");

  EvalReport report;
  report.guidance = to_string(options.guidance.mode);
  report.gamma = options.guidance.gamma;
  report.ddim_steps = options.guidance.ddim_steps;

  std::vector<Tokens> sentences;
  std::vector<int> labels;
  for (const auto& ex : test.examples) {
    sentences.push_back(ex.src);
    labels.push_back(ex.src_label);
    if (ex.tgt) {
      sentences.push_back(*ex.tgt);
      labels.push_back(ex.tgt_label);
    }
  }
  report.silhouette = silhouette(pool(models.vae.encode_mean(sentences)), labels);

  for (std::uint64_t seed : seeds) {
    SeedMetrics sm;
    sm.seed = seed;
    for (int d = 0; d < 2; ++d) {
      const auto& items = dirs[d];
      const auto gen = transfer(models, items, seed, options, timing);
      std::vector<int> targets;
      std::vector<Tokens> refs;
      for (const auto& it : items) {
        targets.push_back(it.target_label);
        refs.push_back(it.reference);
      }
      DirectionMetrics m;
      m.count = items.size();
      m.style_accuracy = style_accuracy(gen, targets, models.oracle);
      const auto sims = semantic_similarity(gen, refs, models.vae);
      for (double s : sims) m.semantic_similarity += s;
      m.semantic_similarity /= static_cast<double>(sims.size());
      m.validity_rate = validity_rate(gen, models.grammar);
      (d == 0 ? sm.a_to_b : sm.b_to_a) = m;
    }
    report.per_seed.push_back(sm);
  }
  report.validate();
  return report;
}

}  // namespace regdiff
