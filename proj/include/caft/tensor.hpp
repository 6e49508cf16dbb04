#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace caft {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

// Dense row-major array of doubles with rank 1..3. A scalar is shape {1}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // 2-D accessors. Rank-1 tensors are treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const;
  bool all_finite() const;
  void fill(double value);
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// A named trainable array. The gradient is not stored here: tapes hold it
// and optimizers read it back through Tape::param_grad.
struct Parameter {
  std::string name;
  Tensor value;
};

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid as long as the
// owning tape is alive.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
};

// Record-on-execute reverse-mode tape. Nodes are appended in execution order;
// backward() walks them in exact reverse order. One tape per thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool track_gradients = true);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool tracking() const { return tracking_; }

  Var constant(Tensor value);
  Var variable(Tensor value);
  // Leaf bound to a model parameter. Repeated calls for the same parameter
  // return the same node, so every use accumulates into one gradient.
  Var watch(const Parameter& param);

  // Appends an op result. `fn` is dropped when no parent needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> parents, BackwardFn fn);

  // Seeds d(root)/d(root) = 1 and propagates. Root must be a scalar.
  void backward(Var root);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  // Gradient after backward(); zeros when the node received none.
  Tensor grad(Var v) const;
  Tensor param_grad(const Parameter& param) const;
  bool watches(const Parameter& param) const;

  // Used by op backward functions.
  void accumulate(std::size_t id, const Tensor& g);
  Tensor& grad_buffer(std::size_t id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  bool tracking_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> watched_;
};

// ---------------------------------------------------------------------------
// Differentiable ops. Every op validates shapes and throws DimensionError on
// mismatch; every result is checked for finiteness (NumericError).

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var neg(Var a);
// x[M×N] + b[N] added to every row.
Var add_bias(Var x, Var bias);
Var tanh(Var a);
Var relu(Var a);
// Normalizes each row over the feature dim, then applies gain/shift [N].
Var layer_norm(Var x, Var gain, Var shift, double eps = 1e-5);
// x[T×N] -> [N], mean over rows.
Var mean_time(Var x);
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);
// [T×H] ++ [T×D] -> [T×(H+D)].
Var concat_feature(Var a, Var b);
// Stacks rows of [Tk×H] matrices -> [(ΣTk)×H].
Var concat_time(std::span<const Var> parts);
// Columns [begin, end) of x[M×N].
Var slice_cols(Var x, std::size_t begin, std::size_t end);
// e[D] -> [T×D], the same row repeated T times.
Var broadcast_rows(Var e, std::size_t rows);
Var reshape(Var x, Shape shape);
// Element at flat index, as a scalar.
Var select(Var x, std::size_t index);
Var sum(Var x);
// Euclidean distance between equal-shape tensors; gradient 0 at distance 0.
Var l2_distance(Var a, Var b);
// Same value, no gradient flows to `a`.
Var detach(Var a);

// log Σ exp(xᵢ), max-shifted. Throws std::invalid_argument when empty.
double logsumexp(std::span<const double> xs);
double logsumexp(double a, double b);

// ---------------------------------------------------------------------------
// Finite-difference verification.

using ScalarFn = std::function<Var(Tape&)>;

// Max over every scalar of every parameter of
//   |analytic − central difference| / max(1e-8, |analytic| + |numeric|).
// Parameters are perturbed in place and restored before returning.
double grad_check(const ScalarFn& f, std::span<Parameter* const> params,
                  double eps = 1e-5);

}  // namespace caft
