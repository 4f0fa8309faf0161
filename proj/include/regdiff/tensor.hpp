#pragma once

// Dense row-major tensors and a tape-based reverse-mode autodiff graph.
//
// A Graph records every op applied to its Vars in creation order, so the
// reverse of the tape is a valid topological order for backward. Graphs are
// built per forward pass and thrown away afterwards.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace regdiff {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor({}, {value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D convenience accessors.
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

  double item() const;
  Tensor reshaped(Shape shape) const;
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Graph;

// Handle to a node on a Graph. Cheap to copy; valid while the Graph lives.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int)>;

  // With recording disabled no backward closures are kept (inference mode).
  explicit Graph(bool recording = true) : recording_(recording) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);

  // Populates gradients for every node that depends on a grad-requiring leaf.
  void backward(Var loss);

  // Gradient of the last backward() loss w.r.t. `v`; zeros if `v` got none.
  Tensor grad(Var v) const;
  bool has_grad(Var v) const;

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Op plumbing: record a node whose value is already computed.
  Var push(Tensor value, std::vector<int> parents, BackwardFn backward);
  // Gradient buffer of node `id`, zero-allocated on first access.
  std::span<double> grad_buffer(int id);
  std::span<const double> upstream(int id) const;
  // grad(id) += s * up, allocating on first use.
  void accumulate_grad(int id, std::span<const double> up, double s = 1.0);

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool needs_grad = false;
    std::vector<int> parents;
    BackwardFn backward;
  };
  bool recording_;
  std::deque<Node> nodes_;
};

// ---- ops ------------------------------------------------------------------
// Every op validates shapes (ShapeError) and rejects non-finite results
// (NumericError). Broadcasting is never implicit; see add_row and
// broadcast_axis for the explicit forms.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var square(Var a);
Var exp(Var a);
Var relu(Var a);
Var tanh(Var a);
Var clamp(Var a, double lo, double hi);

// a [..., M, K] x b [K, N] -> [..., M, N], or batched with b [..., K, N]
// sharing a's leading dims.
Var matmul(Var a, Var b);
// Swap the last two axes.
Var transpose(Var a);
Var reshape(Var a, Shape shape);
Var permute(Var a, const std::vector<std::size_t>& axes);

Var softmax(Var a);  // over the last axis
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);  // last axis
Var add_row(Var x, Var row);  // row [N] added to every length-N row of x
// Inserts a new axis of extent n at position `axis` by repetition.
Var broadcast_axis(Var x, std::size_t axis, std::size_t n);

Var embedding(Var table, std::span<const int> ids);  // table [V, E] -> [n, E]
Var mean_axis(Var x, std::size_t axis);
Var sum(Var x);
Var mean(Var x);

// Mean over rows of -log softmax(logits)[label]; logits [N, K].
Var cross_entropy(Var logits, std::span<const int> labels);
// Mean over rows of 0.5 * sum_j (mu^2 + e^logvar - 1 - logvar).
Var kl_diag_gaussian(Var mu, Var logvar);

Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length);
Var concat(const std::vector<Var>& parts, std::size_t axis);

// Row-wise argmax of a [N, K] tensor.
std::vector<int> argmax_rows(const Tensor& logits);

// Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, floor)
// where numeric is the central difference with step h and
// floor = max(1e-8, 1e-3 * max_j |numeric_j|). The floor keeps coordinates whose
// true derivative is ~0 from being judged on cancellation noise alone.
// `f` must build a scalar.
using ScalarFn = std::function<Var(Graph&, Var)>;
double grad_check(const ScalarFn& f, const Tensor& point, double h = 1e-5);

}  // namespace regdiff
