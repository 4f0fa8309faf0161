#include "regdiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

#include <Eigen/Core>

namespace regdiff {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape_));
  if (data_.size() != numel(shape_))
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size())
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

const Tensor& Var::value() const { return graph->value(id); }

// ---- Graph ----------------------------------------------------------------

Var Graph::constant(Tensor value) { return push(std::move(value), {}, nullptr); }

Var Graph::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("non-finite leaf value");
  Node n;
  n.value = std::move(value);
  n.needs_grad = recording_ && requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::push(Tensor value, std::vector<int> parents, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError("non-finite op output, shape " + shape_str(value.shape()));
  Node n;
  n.value = std::move(value);
  if (recording_) {
    for (int p : parents) n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(p)].needs_grad;
  }
  if (n.needs_grad) {
    n.parents = std::move(parents);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

std::span<double> Graph::grad_buffer(int id) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Graph::accumulate_grad(int id, std::span<const double> up, double s) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) {
    n.grad.resize(up.size());
    for (std::size_t i = 0; i < up.size(); ++i) n.grad[i] = s * up[i];
  } else {
    for (std::size_t i = 0; i < up.size(); ++i) n.grad[i] += s * up[i];
  }
}

std::span<const double> Graph::upstream(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

void Graph::backward(Var loss) {
  if (loss.graph != this) throw std::invalid_argument("loss does not belong to this graph");
  if (loss.value().size() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  for (auto& n : nodes_) n.grad.clear();
  if (!nodes_[static_cast<std::size_t>(loss.id)].needs_grad) return;
  grad_buffer(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
    if (!n.backward || n.parents.empty()) {
      for (double g : n.grad)
        if (!std::isfinite(g)) throw NumericError("non-finite gradient at node " + std::to_string(id));
    }
  }
}

Tensor Graph::grad(Var v) const {
  const auto& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return Tensor(n.value.shape(), n.grad);
}

bool Graph::has_grad(Var v) const { return !nodes_[static_cast<std::size_t>(v.id)].grad.empty(); }

// ---- helpers --------------------------------------------------------------

namespace {

Graph& graph_of(Var a, Var b) {
  if (a.graph == nullptr || a.graph != b.graph) throw std::invalid_argument("vars belong to different graphs");
  return *a.graph;
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Accumulate `scale * upstream` into parent's gradient if it needs one.
void accumulate(Graph& g, int parent, std::span<const double> up, double s = 1.0) {
  if (!g.needs_grad(parent)) return;
  g.accumulate_grad(parent, up, s);
}

template <class Fwd, class Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  Graph& g = *a.graph;
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  return g.push(std::move(out), {a.id}, [pa = a.id, deriv](Graph& gr, int self) {
    if (!gr.needs_grad(pa)) return;
    auto up = gr.upstream(self);
    const Tensor& xv = gr.value(pa);
    const Tensor& yv = gr.value(self);
    auto dst = gr.grad_buffer(pa);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += up[i] * deriv(xv[i], yv[i]);
  });
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// C[M,N] += A[M,K] * B[K,N]
void gemm_nn(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N) {
  const auto m = static_cast<Eigen::Index>(M), k = static_cast<Eigen::Index>(K), n = static_cast<Eigen::Index>(N);
  MutMap(C, m, n).noalias() += ConstMap(A, m, k) * ConstMap(B, k, n);
}

// dA[M,K] += dC[M,N] * B[K,N]^T
void gemm_nt(const double* dC, const double* B, double* dA, std::size_t M, std::size_t K, std::size_t N) {
  const auto m = static_cast<Eigen::Index>(M), k = static_cast<Eigen::Index>(K), n = static_cast<Eigen::Index>(N);
  MutMap(dA, m, k).noalias() += ConstMap(dC, m, n) * ConstMap(B, k, n).transpose();
}

// dB[K,N] += A[M,K]^T * dC[M,N]
void gemm_tn(const double* A, const double* dC, double* dB, std::size_t M, std::size_t K, std::size_t N) {
  const auto m = static_cast<Eigen::Index>(M), k = static_cast<Eigen::Index>(K), n = static_cast<Eigen::Index>(N);
  MutMap(dB, k, n).noalias() += ConstMap(A, m, k).transpose() * ConstMap(dC, m, n);
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

// ---- elementwise ----------------------------------------------------------

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape("add", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return g.push(std::move(out), {a.id, b.id}, [pa = a.id, pb = b.id](Graph& gr, int self) {
    auto up = gr.upstream(self);
    accumulate(gr, pa, up);
    accumulate(gr, pb, up);
  });
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return g.push(std::move(out), {a.id, b.id}, [pa = a.id, pb = b.id](Graph& gr, int self) {
    auto up = gr.upstream(self);
    accumulate(gr, pa, up);
    accumulate(gr, pb, up, -1.0);
  });
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return g.push(std::move(out), {a.id, b.id}, [pa = a.id, pb = b.id](Graph& gr, int self) {
    auto up = gr.upstream(self);
    if (gr.needs_grad(pa)) {
      auto d = gr.grad_buffer(pa);
      const Tensor& o = gr.value(pb);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i] * o[i];
    }
    if (gr.needs_grad(pb)) {
      auto d = gr.grad_buffer(pb);
      const Tensor& o = gr.value(pa);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i] * o[i];
    }
  });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var clamp(Var a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---- linear algebra -------------------------------------------------------

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) throw ShapeError("matmul: operands must have rank >= 2");
  const std::size_t M = sa[sa.size() - 2], K = sa.back();
  const std::size_t Kb = sb[sb.size() - 2], N = sb.back();
  if (K != Kb) throw ShapeError("matmul: inner dims differ " + shape_str(sa) + " x " + shape_str(sb));
  const bool batched = sb.size() > 2;
  std::size_t batch = numel(sa) / (M * K);
  if (batched) {
    if (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin()))
      throw ShapeError("matmul: batch dims differ " + shape_str(sa) + " x " + shape_str(sb));
  }
  Shape so(sa.begin(), sa.end() - 1);
  so.push_back(N);
  Tensor out(so, 0.0);
  const double* A = a.value().data().data();
  const double* B = b.value().data().data();
  double* C = out.data().data();
  if (batched) {
    for (std::size_t bi = 0; bi < batch; ++bi) gemm_nn(A + bi * M * K, B + bi * K * N, C + bi * M * N, M, K, N);
  } else {
    gemm_nn(A, B, C, batch * M, K, N);
  }
  return g.push(std::move(out), {a.id, b.id}, [pa = a.id, pb = b.id, batched, batch, M, K, N](Graph& gr, int self) {
    const double* dC = gr.upstream(self).data();
    const double* Av = gr.value(pa).data().data();
    const double* Bv = gr.value(pb).data().data();
    if (gr.needs_grad(pa)) {
      double* dA = gr.grad_buffer(pa).data();
      if (batched) {
        for (std::size_t bi = 0; bi < batch; ++bi) gemm_nt(dC + bi * M * N, Bv + bi * K * N, dA + bi * M * K, M, K, N);
      } else {
        gemm_nt(dC, Bv, dA, batch * M, K, N);
      }
    }
    if (gr.needs_grad(pb)) {
      double* dB = gr.grad_buffer(pb).data();
      if (batched) {
        for (std::size_t bi = 0; bi < batch; ++bi) gemm_tn(Av + bi * M * K, dC + bi * M * N, dB + bi * K * N, M, K, N);
      } else {
        gemm_tn(Av, dC, dB, batch * M, K, N);
      }
    }
  });
}

Var transpose(Var a) {
  const Shape& s = a.shape();
  if (s.size() < 2) throw ShapeError("transpose: rank must be >= 2");
  std::vector<std::size_t> axes(s.size());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[s.size() - 1], axes[s.size() - 2]);
  return permute(a, axes);
}

Var reshape(Var a, Shape shape) {
  if (numel(shape) != a.value().size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  Tensor out = a.value().reshaped(std::move(shape));
  return a.graph->push(std::move(out), {a.id}, [pa = a.id](Graph& gr, int self) {
    accumulate(gr, pa, gr.upstream(self));
  });
}

Var permute(Var a, const std::vector<std::size_t>& axes) {
  const Shape& s = a.shape();
  const std::size_t r = s.size();
  if (axes.size() != r) throw ShapeError("permute: axes rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) throw ShapeError("permute: invalid axes");
    seen[ax] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  Shape so(r);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    so[i] = s[axes[i]];
    src_stride[i] = in_strides[axes[i]];
  }
  // offsets[k] = source offset of output element k
  const std::size_t n = numel(s);
  std::vector<std::size_t> offsets(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t k = 0; k < n; ++k) {
    offsets[k] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += src_stride[d];
      if (idx[d] < so[d]) break;
      off -= src_stride[d] * so[d];
      idx[d] = 0;
    }
  }
  Tensor out(so);
  const Tensor& x = a.value();
  for (std::size_t k = 0; k < n; ++k) out[k] = x[offsets[k]];
  return a.graph->push(std::move(out), {a.id}, [pa = a.id, offsets = std::move(offsets)](Graph& gr, int self) {
    if (!gr.needs_grad(pa)) return;
    auto up = gr.upstream(self);
    auto d = gr.grad_buffer(pa);
    for (std::size_t k = 0; k < offsets.size(); ++k) d[offsets[k]] += up[k];
  });
}

// ---- normalization --------------------------------------------------------

Var softmax(Var a) {
  const Tensor& x = a.value();
  if (x.rank() < 1) throw ShapeError("softmax: rank must be >= 1");
  const std::size_t n = x.shape().back(), rows = x.size() / n;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x.data().data() + r * n;
    double* yi = out.data().data() + r * n;
    double m = *std::max_element(xi, xi + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (yi[j] = std::exp(xi[j] - m));
    for (std::size_t j = 0; j < n; ++j) yi[j] /= z;
  }
  return a.graph->push(std::move(out), {a.id}, [pa = a.id, n, rows](Graph& gr, int self) {
    if (!gr.needs_grad(pa)) return;
    auto up = gr.upstream(self);
    const Tensor& y = gr.value(self);
    auto d = gr.grad_buffer(pa);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += up[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) d[r * n + j] += y[r * n + j] * (up[r * n + j] - dot);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Graph& g = graph_of(x, gain);
  graph_of(x, bias);
  const Tensor& xv = x.value();
  const std::size_t n = xv.shape().back(), rows = xv.size() / n;
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n})
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(n) + "]");
  Tensor out(xv.shape());
  std::vector<double> xhat(xv.size()), rstd(rows);
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = xv.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xi[j] - mu) * rstd[r];
      out[r * n + j] = xhat[r * n + j] * gv[j] + bv[j];
    }
  }
  return g.push(std::move(out), {x.id, gain.id, bias.id},
                [px = x.id, pg = gain.id, pb = bias.id, n, rows, xhat = std::move(xhat), rstd = std::move(rstd)](
                    Graph& gr, int self) {
                  auto up = gr.upstream(self);
                  if (gr.needs_grad(pg)) {
                    auto d = gr.grad_buffer(pg);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < n; ++j) d[j] += up[r * n + j] * xhat[r * n + j];
                  }
                  if (gr.needs_grad(pb)) {
                    auto d = gr.grad_buffer(pb);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < n; ++j) d[j] += up[r * n + j];
                  }
                  if (gr.needs_grad(px)) {
                    auto d = gr.grad_buffer(px);
                    const Tensor& gv2 = gr.value(pg);
                    std::vector<double> dxh(n);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double m1 = 0.0, m2 = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        dxh[j] = up[r * n + j] * gv2[j];
                        m1 += dxh[j];
                        m2 += dxh[j] * xhat[r * n + j];
                      }
                      m1 /= static_cast<double>(n);
                      m2 /= static_cast<double>(n);
                      for (std::size_t j = 0; j < n; ++j)
                        d[r * n + j] += rstd[r] * (dxh[j] - m1 - xhat[r * n + j] * m2);
                    }
                  }
                });
}

Var add_row(Var x, Var row) {
  Graph& g = graph_of(x, row);
  const std::size_t n = x.shape().back();
  if (row.shape() != Shape{n}) throw ShapeError("add_row: row must be [" + std::to_string(n) + "]");
  Tensor out = x.value();
  const Tensor& rv = row.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += rv[i % n];
  return g.push(std::move(out), {x.id, row.id}, [px = x.id, pr = row.id, n](Graph& gr, int self) {
    auto up = gr.upstream(self);
    accumulate(gr, px, up);
    if (gr.needs_grad(pr)) {
      auto d = gr.grad_buffer(pr);
      for (std::size_t i = 0; i < up.size(); ++i) d[i % n] += up[i];
    }
  });
}

Var broadcast_axis(Var x, std::size_t axis, std::size_t n) {
  const Shape& s = x.shape();
  if (axis > s.size() || n == 0) throw ShapeError("broadcast_axis: bad axis or extent");
  Shape so = s;
  so.insert(so.begin() + static_cast<std::ptrdiff_t>(axis), n);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis; i < s.size(); ++i) inner *= s[i];
  Tensor out(so);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>(o * inner), inner,
                  out.data().begin() + static_cast<std::ptrdiff_t>((o * n + r) * inner));
  return x.graph->push(std::move(out), {x.id}, [px = x.id, outer, inner, n](Graph& gr, int self) {
    if (!gr.needs_grad(px)) return;
    auto up = gr.upstream(self);
    auto d = gr.grad_buffer(px);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < inner; ++i) d[o * inner + i] += up[(o * n + r) * inner + i];
  });
}

// ---- gather / reductions --------------------------------------------------

Var embedding(Var table, std::span<const int> ids) {
  const Tensor& t = table.value();
  if (t.rank() != 2) throw ShapeError("embedding: table must be rank 2");
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  const std::size_t V = t.dim(0), E = t.dim(1);
  Tensor out({ids.size(), E});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V)
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                              std::to_string(V));
    std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(ids[i]) * static_cast<std::ptrdiff_t>(E), E,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * E));
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return table.graph->push(std::move(out), {table.id}, [pt = table.id, E, idv = std::move(idv)](Graph& gr, int self) {
    if (!gr.needs_grad(pt)) return;
    auto up = gr.upstream(self);
    auto d = gr.grad_buffer(pt);
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < E; ++j) d[static_cast<std::size_t>(idv[i]) * E + j] += up[i * E + j];
  });
}

Var mean_axis(Var x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ShapeError("mean_axis: axis out of range for " + shape_str(s));
  auto sp = split_at(s, axis);
  Shape so = s;
  so.erase(so.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(so, 0.0);
  const Tensor& xv = x.value();
  const double inv = 1.0 / static_cast<double>(sp.extent);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xv[(o * sp.extent + e) * sp.inner + i];
  for (auto& v : out.data()) v *= inv;
  return x.graph->push(std::move(out), {x.id}, [px = x.id, sp, inv](Graph& gr, int self) {
    if (!gr.needs_grad(px)) return;
    auto up = gr.upstream(self);
    auto d = gr.grad_buffer(px);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t e = 0; e < sp.extent; ++e)
        for (std::size_t i = 0; i < sp.inner; ++i) d[(o * sp.extent + e) * sp.inner + i] += inv * up[o * sp.inner + i];
  });
}

Var sum(Var x) {
  const Tensor& xv = x.value();
  double acc = 0.0;
  for (double v : xv.data()) acc += v;
  return x.graph->push(Tensor::scalar(acc), {x.id}, [px = x.id](Graph& gr, int self) {
    if (!gr.needs_grad(px)) return;
    const double up = gr.upstream(self)[0];
    for (auto& d : gr.grad_buffer(px)) d += up;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2) throw ShapeError("cross_entropy: logits must be [N, K]");
  const std::size_t N = z.dim(0), K = z.dim(1);
  if (labels.size() != N) throw ShapeError("cross_entropy: label count differs from rows");
  std::vector<double> probs(z.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < N; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= K)
      throw std::out_of_range("cross_entropy: label out of range");
    const double* zi = z.data().data() + r * K;
    double m = *std::max_element(zi, zi + K);
    double s = 0.0;
    for (std::size_t j = 0; j < K; ++j) s += (probs[r * K + j] = std::exp(zi[j] - m));
    for (std::size_t j = 0; j < K; ++j) probs[r * K + j] /= s;
    loss += (m + std::log(s)) - zi[labels[r]];
  }
  loss /= static_cast<double>(N);
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.graph->push(
      Tensor::scalar(loss), {logits.id},
      [pz = logits.id, N, K, probs = std::move(probs), lab = std::move(lab)](Graph& gr, int self) {
        if (!gr.needs_grad(pz)) return;
        const double up = gr.upstream(self)[0] / static_cast<double>(N);
        auto d = gr.grad_buffer(pz);
        for (std::size_t r = 0; r < N; ++r)
          for (std::size_t j = 0; j < K; ++j)
            d[r * K + j] += up * (probs[r * K + j] - (static_cast<int>(j) == lab[r] ? 1.0 : 0.0));
      });
}

Var kl_diag_gaussian(Var mu, Var logvar) {
  Graph& g = graph_of(mu, logvar);
  require_same_shape("kl_diag_gaussian", mu, logvar);
  const Tensor& m = mu.value();
  const Tensor& lv = logvar.value();
  const std::size_t rows = m.rank() == 0 ? 1 : m.size() / m.shape().back();
  double acc = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) acc += 0.5 * (m[i] * m[i] + std::exp(lv[i]) - 1.0 - lv[i]);
  const double inv = 1.0 / static_cast<double>(rows);
  return g.push(Tensor::scalar(acc * inv), {mu.id, logvar.id}, [pm = mu.id, pl = logvar.id, inv](Graph& gr, int self) {
    const double up = gr.upstream(self)[0] * inv;
    if (gr.needs_grad(pm)) {
      auto d = gr.grad_buffer(pm);
      const Tensor& mv = gr.value(pm);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += up * mv[i];
    }
    if (gr.needs_grad(pl)) {
      auto d = gr.grad_buffer(pl);
      const Tensor& lvv = gr.value(pl);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += up * 0.5 * (std::exp(lvv[i]) - 1.0);
    }
  });
}

Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  if (axis >= s.size() || length == 0 || start + length > s[axis])
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") invalid for " + shape_str(s));
  auto sp = split_at(s, axis);
  Shape so = s;
  so[axis] = length;
  Tensor out(so);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>((o * sp.extent + start) * sp.inner), length * sp.inner,
                out.data().begin() + static_cast<std::ptrdiff_t>(o * length * sp.inner));
  return x.graph->push(std::move(out), {x.id}, [px = x.id, sp, start, length](Graph& gr, int self) {
    if (!gr.needs_grad(px)) return;
    auto up = gr.upstream(self);
    auto d = gr.grad_buffer(px);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < length * sp.inner; ++i)
        d[(o * sp.extent + start) * sp.inner + i] += up[o * length * sp.inner + i];
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
  Graph& g = *parts[0].graph;
  std::vector<std::size_t> extents;
  std::vector<int> ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    graph_of(parts[0], p);
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
    extents.push_back(s[axis]);
    ids.push_back(p.id);
    total += s[axis];
  }
  auto sp = split_at(s0, axis);
  Shape so = s0;
  so[axis] = total;
  Tensor out(so);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pv.data().begin() + static_cast<std::ptrdiff_t>(o * extents[k] * sp.inner), extents[k] * sp.inner,
                  out.data().begin() + static_cast<std::ptrdiff_t>((o * total + offset) * sp.inner));
    offset += extents[k];
  }
  std::vector<int> parents = ids;
  return g.push(std::move(out), std::move(parents),
                [ids = std::move(ids), extents = std::move(extents), sp, total](Graph& gr, int self) {
                  auto up = gr.upstream(self);
                  std::size_t off = 0;
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (gr.needs_grad(ids[k])) {
                      auto d = gr.grad_buffer(ids[k]);
                      for (std::size_t o = 0; o < sp.outer; ++o)
                        for (std::size_t i = 0; i < extents[k] * sp.inner; ++i)
                          d[o * extents[k] * sp.inner + i] += up[(o * total + off) * sp.inner + i];
                    }
                    off += extents[k];
                  }
                });
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows: expected [N, K]");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(N);
  for (std::size_t r = 0; r < N; ++r) {
    const double* row = logits.data().data() + r * K;
    out[r] = static_cast<int>(std::max_element(row, row + K) - row);
  }
  return out;
}

double grad_check(const ScalarFn& f, const Tensor& point, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  Graph g;
  Var x = g.leaf(point);
  Var y = f(g, x);
  if (y.value().size() != 1) throw ShapeError("grad_check: function is not scalar-valued");
  g.backward(y);
  const Tensor analytic = g.grad(x);
  auto eval = [&f](const Tensor& p) {
    Graph ge(false);
    return f(ge, ge.constant(p)).value().item();
  };
  Tensor probe = point;
  std::vector<double> numeric(point.size());
  double scale = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = eval(probe);
    probe[i] = orig - h;
    const double fm = eval(probe);
    probe[i] = orig;
    numeric[i] = (fp - fm) / (2.0 * h);
    if (!std::isfinite(numeric[i])) throw NumericError("grad_check: non-finite numeric derivative");
    scale = std::max(scale, std::abs(numeric[i]));
  }
  const double floor = std::max(1e-8, 1e-3 * scale);
  double worst = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace regdiff
