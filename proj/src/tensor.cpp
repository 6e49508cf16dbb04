#include "caft/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "caft/errors.hpp"

namespace caft {

namespace {

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

void validate_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 3) {
    throw DimensionError("tensor rank must be 1..3, got " + shape_string(shape));
  }
  for (std::size_t d : shape) {
    if (d == 0) {
      throw DimensionError("tensor dims must be positive, got " + shape_string(shape));
    }
  }
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a) +
                       " and " + shape_string(b));
}

void require_rank2(const char* op, const Tensor& t) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_string(t.shape()));
  }
}

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw ContractError("Var is not attached to a tape");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("operands belong to different tapes");
  return tape_of(a);
}

// C[M×N] (+)= op(A) · op(B) on raw row-major storage.
void gemm(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b, Tensor& c) {
  const std::size_t m = trans_a ? a.cols() : a.rows();
  const std::size_t k = trans_a ? a.rows() : a.cols();
  const std::size_t n = trans_b ? b.rows() : b.cols();
  const std::size_t lda = a.cols();
  const std::size_t ldb = b.cols();
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = trans_a ? pa[p * lda + i] : pa[i * lda + p];
      if (av == 0.0) continue;
      if (!trans_b) {
        const double* brow = pb + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * pb[j * ldb + p];
      }
    }
  }
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_.assign(product(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  validate_shape(shape_);
  if (product(shape_) != data_.size()) {
    throw DimensionError("tensor of shape " + shape_string(shape_) + " given " +
                         std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

std::size_t Tensor::rows() const {
  if (rank() == 1) return 1;
  if (rank() == 2) return shape_[0];
  throw DimensionError("rows() on tensor of shape " + shape_string(shape_));
}

std::size_t Tensor::cols() const {
  if (rank() == 1) return shape_[0];
  if (rank() == 2) return shape_[1];
  throw DimensionError("cols() on tensor of shape " + shape_string(shape_));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw DimensionError("item() on non-scalar tensor " + shape_string(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor Tensor::reshaped(Shape shape) const {
  if (product(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " +
                         shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape_of(*this).value(*this); }

Tape::Tape(bool track_gradients) : tracking_(track_gradients) {}

Var Tape::constant(Tensor value) {
  return record(std::move(value), std::span<const Var>{}, nullptr);
}

Var Tape::variable(Tensor value) {
  Var v = constant(std::move(value));
  nodes_[v.id].requires_grad = tracking_;
  return v;
}

Var Tape::watch(const Parameter& param) {
  if (auto it = watched_.find(&param); it != watched_.end()) return Var{this, it->second};
  Var v = variable(param.value);
  watched_.emplace(&param, v.id);
  return v;
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> parents, BackwardFn fn) {
  if (!value.all_finite()) {
    throw NumericError("non-finite value produced by op at tape node " +
                       std::to_string(nodes_.size()));
  }
  bool needs_grad = false;
  if (tracking_) {
    for (const Var& p : parents) {
      if (p.tape != this) throw ContractError("operand recorded on a different tape");
      needs_grad = needs_grad || nodes_[p.id].requires_grad;
    }
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = needs_grad;
  if (needs_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

void Tape::backward(Var root) {
  if (root.tape != this) throw ContractError("backward root belongs to another tape");
  if (nodes_[root.id].value.size() != 1) {
    throw DimensionError("backward root must be a scalar, got " +
                         shape_string(nodes_[root.id].value.shape()));
  }
  if (!nodes_[root.id].requires_grad) return;
  accumulate(root.id, Tensor::scalar(1.0).reshaped(nodes_[root.id].value.shape()));
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || node.grad.empty()) continue;
    node.backward(*this, node.grad);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& node = nodes_[v.id];
  if (node.grad.empty()) return Tensor(node.value.shape());
  return node.grad;
}

Tensor Tape::param_grad(const Parameter& param) const {
  auto it = watched_.find(&param);
  if (it == watched_.end()) return Tensor(param.value.shape());
  return grad(Var{const_cast<Tape*>(this), it->second});
}

bool Tape::watches(const Parameter& param) const { return watched_.contains(&param); }

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) node.grad = Tensor(node.value.shape());
  return node.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  if (!nodes_[id].requires_grad) return;
  Tensor& buf = grad_buffer(id);
  if (buf.size() != g.size()) {
    throw DimensionError("gradient of shape " + shape_string(g.shape()) +
                         " for node of shape " + shape_string(buf.shape()));
  }
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

// ---------------------------------------------------------------------------
// Ops

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2("matmul", av);
  require_rank2("matmul", bv);
  if (av.cols() != bv.rows()) shape_mismatch("matmul", av.shape(), bv.shape());
  Tensor out({av.rows(), bv.cols()});
  gemm(av, false, bv, false, out);
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) gemm(g, false, t.value(b), true, t.grad_buffer(a.id));
    if (t.requires_grad(b)) gemm(t.value(a), true, g, false, t.grad_buffer(b.id));
  });
}

Var transpose(Var a) {
  Tape& tape = tape_of(a);
  const Tensor& av = a.value();
  require_rank2("transpose", av);
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
  return tape.record(std::move(out), {a}, [a, m, n](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga.at(i, j) += g.at(j, i);
  });
}

Var add(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) shape_mismatch("add", av.shape(), bv.shape());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

Var sub(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) shape_mismatch("sub", av.shape(), bv.shape());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a.id, g);
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) shape_mismatch("mul", av.shape(), bv.shape());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  return tape.record(std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var add_bias(Var x, Var bias) {
  Tape& tape = tape_of(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require_rank2("add_bias", xv);
  if (bv.size() != xv.cols()) shape_mismatch("add_bias", xv.shape(), bv.shape());
  Tensor out = xv;
  const std::size_t m = xv.rows(), n = xv.cols();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) += bv[j];
  return tape.record(std::move(out), {x, bias}, [x, bias, m, n](Tape& t, const Tensor& g) {
    t.accumulate(x.id, g);
    if (t.requires_grad(bias)) {
      Tensor& gb = t.grad_buffer(bias.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

Var tanh(Var a) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.values()) v = std::tanh(v);
  Tensor saved = tape.tracking() ? out : Tensor();
  return tape.record(std::move(out), {a}, [a, y = std::move(saved)](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var relu(Var a) {
  Tape& tape = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return tape.record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    Tensor& ga = t.grad_buffer(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += av[i] > 0.0 ? g[i] : 0.0;
  });
}

Var layer_norm(Var x, Var gain, Var shift, double eps) {
  Tape& tape = tape_of(x, gain);
  tape_of(x, shift);
  const Tensor& xv = x.value();
  require_rank2("layer_norm", xv);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (gain.value().size() != n) shape_mismatch("layer_norm", xv.shape(), gain.shape());
  if (shift.value().size() != n) shape_mismatch("layer_norm", xv.shape(), shift.shape());
  const Tensor& gv = gain.value();
  const Tensor& sv = shift.value();

  Tensor normalized({m, n});
  std::vector<double> inv_std(m);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xv.at(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = xv.at(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      normalized.at(i, j) = (xv.at(i, j) - mean) * inv_std[i];
      out.at(i, j) = normalized.at(i, j) * gv[j] + sv[j];
    }
  }
  return tape.record(
      std::move(out), {x, gain, shift},
      [x, gain, shift, m, n, normalized = std::move(normalized),
       inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
        const Tensor& gv = t.value(gain);
        if (t.requires_grad(gain)) {
          Tensor& gg = t.grad_buffer(gain.id);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g.at(i, j) * normalized.at(i, j);
        }
        if (t.requires_grad(shift)) {
          Tensor& gs = t.grad_buffer(shift.id);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gs[j] += g.at(i, j);
        }
        if (t.requires_grad(x)) {
          Tensor& gx = t.grad_buffer(x.id);
          std::vector<double> dxhat(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              dxhat[j] = g.at(i, j) * gv[j];
              mean_d += dxhat[j];
              mean_dx += dxhat[j] * normalized.at(i, j);
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              gx.at(i, j) +=
                  inv_std[i] * (dxhat[j] - mean_d - normalized.at(i, j) * mean_dx);
            }
          }
        }
      });
}

Var mean_time(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  require_rank2("mean_time", xv);
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out({n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += xv.at(i, j);
  for (double& v : out.values()) v /= static_cast<double>(m);
  return tape.record(std::move(out), {x}, [x, m, n](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x.id);
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx.at(i, j) += g[j] * inv;
  });
}

Var softmax_rows(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  require_rank2("softmax_rows", xv);
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out.at(i, j) = std::exp(xv.at(i, j) - mx);
      z += out.at(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= z;
  }
  Tensor probs = tape.tracking() ? out : Tensor();
  return tape.record(std::move(out), {x},
                     [x, m, n, probs = std::move(probs)](Tape& t, const Tensor& g) {
                       Tensor& gx = t.grad_buffer(x.id);
                       for (std::size_t i = 0; i < m; ++i) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < n; ++j) dot += g.at(i, j) * probs.at(i, j);
                         for (std::size_t j = 0; j < n; ++j)
                           gx.at(i, j) += probs.at(i, j) * (g.at(i, j) - dot);
                       }
                     });
}

Var log_softmax_rows(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  require_rank2("log_softmax_rows", xv);
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double lse = logsumexp(std::span<const double>(xv.data() + i * n, n));
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = xv.at(i, j) - lse;
  }
  Tensor logp = tape.tracking() ? out : Tensor();
  return tape.record(std::move(out), {x},
                     [x, m, n, logp = std::move(logp)](Tape& t, const Tensor& g) {
                       Tensor& gx = t.grad_buffer(x.id);
                       for (std::size_t i = 0; i < m; ++i) {
                         double total = 0.0;
                         for (std::size_t j = 0; j < n; ++j) total += g.at(i, j);
                         for (std::size_t j = 0; j < n; ++j)
                           gx.at(i, j) += g.at(i, j) - std::exp(logp.at(i, j)) * total;
                       }
                     });
}

Var concat_feature(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2("concat_feature", av);
  require_rank2("concat_feature", bv);
  if (av.rows() != bv.rows()) shape_mismatch("concat_feature", av.shape(), bv.shape());
  const std::size_t m = av.rows(), na = av.cols(), nb = bv.cols();
  Tensor out({m, na + nb});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(av.data() + i * na, na, out.data() + i * (na + nb));
    std::copy_n(bv.data() + i * nb, nb, out.data() + i * (na + nb) + na);
  }
  return tape.record(std::move(out), {a, b}, [a, b, m, na, nb](Tape& t, const Tensor& g) {
    const std::size_t n = na + nb;
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < na; ++j) ga[i * na + j] += g[i * n + j];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < nb; ++j) gb[i * nb + j] += g[i * n + na + j];
    }
  });
}

Var concat_time(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_time: no inputs");
  Tape& tape = tape_of(parts.front());
  const std::size_t n = parts.front().value().cols();
  std::size_t total_rows = 0;
  for (const Var& p : parts) {
    tape_of(parts.front(), p);
    require_rank2("concat_time", p.value());
    if (p.value().cols() != n) {
      shape_mismatch("concat_time", parts.front().shape(), p.shape());
    }
    total_rows += p.value().rows();
  }
  Tensor out({total_rows, n});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + offset);
    offset += p.value().size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape.record(std::move(out), parts, [inputs](Tape& t, const Tensor& g) {
    std::size_t offset = 0;
    for (const Var& p : inputs) {
      const std::size_t len = t.value(p).size();
      if (t.requires_grad(p)) {
        Tensor& gp = t.grad_buffer(p.id);
        for (std::size_t i = 0; i < len; ++i) gp[i] += g[offset + i];
      }
      offset += len;
    }
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  require_rank2("slice_cols", xv);
  if (begin >= end || end > xv.cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for " + shape_string(xv.shape()));
  }
  const std::size_t m = xv.rows(), n = xv.cols(), w = end - begin;
  Tensor out({m, w});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(xv.data() + i * n + begin, w, out.data() + i * w);
  return tape.record(std::move(out), {x}, [x, m, n, w, begin](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) gx[i * n + begin + j] += g[i * w + j];
  });
}

Var broadcast_rows(Var e, std::size_t rows) {
  Tape& tape = tape_of(e);
  const Tensor& ev = e.value();
  if (rows == 0) throw DimensionError("broadcast_rows: zero rows");
  if (ev.rank() == 2 && ev.rows() != 1) {
    throw DimensionError("broadcast_rows: expected a vector, got " + shape_string(ev.shape()));
  }
  if (ev.rank() == 3) throw DimensionError("broadcast_rows: expected a vector");
  const std::size_t d = ev.size();
  Tensor out({rows, d});
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(ev.data(), d, out.data() + i * d);
  return tape.record(std::move(out), {e}, [e, rows, d](Tape& t, const Tensor& g) {
    Tensor& ge = t.grad_buffer(e.id);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < d; ++j) ge[j] += g[i * d + j];
  });
}

Var reshape(Var x, Shape shape) {
  Tape& tape = tape_of(x);
  Tensor out = x.value().reshaped(std::move(shape));
  return tape.record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var select(Var x, std::size_t index) {
  Tape& tape = tape_of(x);
  if (index >= x.value().size()) {
    throw DimensionError("select: index " + std::to_string(index) + " out of range for " +
                         shape_string(x.shape()));
  }
  return tape.record(Tensor::scalar(x.value()[index]), {x},
                     [x, index](Tape& t, const Tensor& g) { t.grad_buffer(x.id)[index] += g[0]; });
}

Var sum(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  double total = 0.0;
  for (double v : xv.values()) total += v;
  return tape.record(Tensor::scalar(total), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x.id);
    for (double& v : gx.values()) v += g[0];
  });
}

Var l2_distance(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) shape_mismatch("l2_distance", av.shape(), bv.shape());
  double ss = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    ss += d * d;
  }
  const double dist = std::sqrt(ss);
  return tape.record(Tensor::scalar(dist), {a, b}, [a, b, dist](Tape& t, const Tensor& g) {
    // Subgradient 0 at a == b.
    if (dist == 0.0) return;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    const double k = g[0] / dist;
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += k * (av[i] - bv[i]);
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= k * (av[i] - bv[i]);
    }
  });
}

Var detach(Var a) { return tape_of(a).constant(a.value()); }

double logsumexp(std::span<const double> xs) {
  if (xs.empty()) throw std::invalid_argument("logsumexp of an empty sequence");
  if (xs.size() == 1) return xs[0];
  const double mx = *std::max_element(xs.begin(), xs.end());
  if (mx == -std::numeric_limits<double>::infinity()) return mx;
  double total = 0.0;
  for (double x : xs) total += std::exp(x - mx);
  return mx + std::log(total);
}

double logsumexp(double a, double b) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double mx = std::max(a, b);
  return mx + std::log1p(std::exp(-std::abs(a - b)));
}

// ---------------------------------------------------------------------------
// grad_check

namespace {

double evaluate_scalar(const ScalarFn& f) {
  Tape tape(false);
  const double v = f(tape).item();
  if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
  return v;
}

}  // namespace

double grad_check(const ScalarFn& f, std::span<Parameter* const> params, double eps) {
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  {
    Tape tape;
    Var y = f(tape);
    if (!std::isfinite(y.item())) throw NumericError("grad_check: function value is not finite");
    tape.backward(y);
    for (const Parameter* p : params) analytic.push_back(tape.param_grad(*p));
  }

  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double original = p.value[i];
      struct Restore {
        double& slot;
        double v;
        ~Restore() { slot = v; }
      } restore{p.value[i], original};
      p.value[i] = original + eps;
      const double plus = evaluate_scalar(f);
      p.value[i] = original - eps;
      const double minus = evaluate_scalar(f);
      p.value[i] = original;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[k][i];
      const double err =
          std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace caft
