#pragma once

// Reverse-mode differentiation over whole matrices. A Tape records every
// operation of one forward pass; backward() walks it in reverse and
// accumulates gradients into the parents, and finally into Parameter::grad.

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "amen/tensor.hpp"

namespace amen {

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  double lr_scale = 1.0;  // multiplies the step size of this tensor
};

// Handle into a ParameterSet; stable across copies of the owning model.
struct ParamId {
  std::size_t index = 0;
};

class ParameterSet {
 public:
  ParamId add(std::string name, Matrix init) {
    if (find(name) != nullptr) throw Error("argument", "duplicate parameter name: " + name);
    Matrix grad(init.rows(), init.cols());
    params_.push_back(Parameter{std::move(name), std::move(init), std::move(grad), 1.0});
    return ParamId{params_.size() - 1};
  }

  Parameter& operator[](ParamId id) { return params_[id.index]; }
  const Parameter& operator[](ParamId id) const { return params_[id.index]; }

  Parameter* find(std::string_view name) {
    for (auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }
  const Parameter* find(std::string_view name) const {
    for (const auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  std::vector<Parameter>& all() noexcept { return params_; }
  const std::vector<Parameter>& all() const noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(0.0);
  }

  void scale_grad(double s) {
    for (auto& p : params_) {
      for (double& g : p.grad.values()) g *= s;
    }
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_) {
      for (double g : p.grad.values()) s += g * g;
    }
    return std::sqrt(s);
  }

  void sgd_step(double lr) {
    for (auto& p : params_) sgd_update(p.value, p.grad, lr * p.lr_scale);
  }

 private:
  std::vector<Parameter> params_;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  // With gradients disabled parameters enter as constants and no backward
  // closures are stored; used for inference.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(256); }

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var constant(Matrix v) { return push(std::move(v), false, {}); }

  Var param(Parameter& p) {
    if (!grad_enabled_) return constant(p.value);
    Parameter* target = &p;
    return push(p.value, true, [target](Tape& t, std::size_t self) {
      const Matrix& g = t.nodes_[self].grad;
      auto dst = target->grad.values();
      auto src = g.values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    });
  }

  // Read-only access enters the tape as a constant.
  Var param(const Parameter& p) { return constant(p.value); }

  Var gather(const Parameter& table, const std::vector<std::size_t>& ids) {
    return constant(gather_rows(table, ids));
  }

  // Rows of an embedding table. Backward touches only the gathered rows.
  Var gather(Parameter& table, std::vector<std::size_t> ids) {
    Matrix out = gather_rows(table, ids);
    if (!grad_enabled_) return constant(std::move(out));
    Parameter* target = &table;
    return push(std::move(out), true, [target, ids = std::move(ids)](Tape& t, std::size_t self) {
      const Matrix& g = t.nodes_[self].grad;
      for (std::size_t r = 0; r < ids.size(); ++r) {
        auto dst = target->grad.row(ids[r]);
        auto src = g.row(r);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
      }
    });
  }

  static Matrix gather_rows(const Parameter& table, const std::vector<std::size_t>& ids) {
    const std::size_t dim = table.value.cols();
    Matrix out(ids.size(), dim);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      if (ids[r] >= table.value.rows()) {
        throw DimensionError("lookup: id " + std::to_string(ids[r]) + " out of range for " + table.name +
                             " (vocab " + std::to_string(table.value.rows()) + ")");
      }
      auto src = table.value.row(ids[r]);
      std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
  }

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  // Gradient of the last backward() root with respect to v (zeros if none).
  Matrix grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.empty() && !n.value.empty()) return Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Matrix& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size() || !n.grad.same_shape(n.value)) {
      n.grad = Matrix(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }
  const Matrix& grad_of(std::size_t id) { return grad_ref(id); }

  Var push(Matrix value, bool needs_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), std::move(backward), needs_grad && grad_enabled_});
    return Var{this, nodes_.size() - 1};
  }

  void backward(Var root, double seed = 1.0) {
    if (!grad_enabled_) throw Error("argument", "backward on a tape without gradients");
    if (root.tape != this) throw Error("argument", "backward root belongs to another tape");
    if (value(root).size() != 1) throw DimensionError("backward root must be a scalar");
    grad_ref(root.id)[0] += seed;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool needs_grad = false;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(*this); }

namespace ad {

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw Error("argument", "operands recorded on different tapes");
  return *a.tape;
}

inline void accumulate(Matrix& dst, const Matrix& src, double s = 1.0) {
  auto d = dst.values();
  auto v = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * v[i];
}

}  // namespace detail

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(t.value(a), t.value(b), "add");
  Matrix out = t.value(a);
  detail::accumulate(out, t.value(b));
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(std::move(out), ng, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Matrix& g = t.grad_of(self);
    if (t.needs_grad(a)) detail::accumulate(t.grad_ref(a), g);
    if (t.needs_grad(b)) detail::accumulate(t.grad_ref(b), g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(t.value(a), t.value(b), "sub");
  Matrix out = t.value(a);
  detail::accumulate(out, t.value(b), -1.0);
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(std::move(out), ng, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Matrix& g = t.grad_of(self);
    if (t.needs_grad(a)) detail::accumulate(t.grad_ref(a), g);
    if (t.needs_grad(b)) detail::accumulate(t.grad_ref(b), g, -1.0);
  });
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(t.value(a), t.value(b), "mul");
  Matrix out = t.value(a);
  auto bv = t.value(b).values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(std::move(out), ng, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Matrix& g = t.grad_of(self);
    if (t.needs_grad(a)) {
      Matrix& ga = t.grad_ref(a);
      const Matrix& vb = t.value(b);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.needs_grad(b)) {
      Matrix& gb = t.grad_ref(b);
      const Matrix& va = t.value(a);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  Matrix out = t.value(a);
  for (double& v : out.values()) v *= s;
  return t.push(std::move(out), t.needs_grad(a), [a = a.id, s](Tape& t, std::size_t self) {
    detail::accumulate(t.grad_ref(a), t.grad_of(self), s);
  });
}

// Adds a 1 x c row to every row of a.
inline Var add_row(Var a, Var bias) {
  Tape& t = detail::same_tape(a, bias);
  const Matrix& va = t.value(a);
  const Matrix& vb = t.value(bias);
  if (vb.rows() != 1 || vb.cols() != va.cols()) {
    throw DimensionError("add_row: " + va.shape_string() + " + " + vb.shape_string());
  }
  Matrix out = va;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += vb[c];
  }
  const bool ng = t.needs_grad(a) || t.needs_grad(bias);
  return t.push(std::move(out), ng, [a = a.id, b = bias.id](Tape& t, std::size_t self) {
    const Matrix& g = t.grad_of(self);
    if (t.needs_grad(a)) detail::accumulate(t.grad_ref(a), g);
    if (t.needs_grad(b)) {
      Matrix& gb = t.grad_ref(b);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
      }
    }
  });
}

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  Matrix out = amen::matmul(t.value(a), t.value(b));
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(std::move(out), ng, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Matrix& g = t.grad_of(self);
    if (t.needs_grad(a)) detail::accumulate(t.grad_ref(a), amen::matmul_nt(g, t.value(b)));
    if (t.needs_grad(b)) detail::accumulate(t.grad_ref(b), amen::matmul_tn(t.value(a), g));
  });
}

// a * b^T
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  Matrix out = amen::matmul_nt(t.value(a), t.value(b));
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(std::move(out), ng, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Matrix& g = t.grad_of(self);
    if (t.needs_grad(a)) detail::accumulate(t.grad_ref(a), amen::matmul(g, t.value(b)));
    if (t.needs_grad(b)) detail::accumulate(t.grad_ref(b), amen::matmul_tn(g, t.value(a)));
  });
}

inline Var relu(Var a) {
  Tape& t = *a.tape;
  Matrix out = t.value(a);
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return t.push(std::move(out), t.needs_grad(a), [a = a.id](Tape& t, std::size_t self) {
    const Matrix& g = t.grad_of(self);
    const Matrix& x = t.value(a);
    Matrix& ga = t.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (x[i] > 0.0) ga[i] += g[i];
    }
  });
}

inline Var softplus(Var a) {
  Tape& t = *a.tape;
  Matrix out = t.value(a);
  for (double& v : out.values()) v = amen::softplus(v);
  return t.push(std::move(out), t.needs_grad(a), [a = a.id](Tape& t, std::size_t self) {
    const Matrix& g = t.grad_of(self);
    const Matrix& x = t.value(a);
    Matrix& ga = t.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * amen::sigmoid(x[i]);
  });
}

// 1x1 sum of all entries.
inline Var sum(Var a) {
  Tape& t = *a.tape;
  double s = 0.0;
  for (double v : t.value(a).values()) s += v;
  return t.push(Matrix(1, 1, s), t.needs_grad(a), [a = a.id](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    for (double& v : t.grad_ref(a).values()) v += g;
  });
}

// 1x1 sum of squared entries.
inline Var sum_squares(Var a) {
  Tape& t = *a.tape;
  double s = 0.0;
  for (double v : t.value(a).values()) s += v * v;
  return t.push(Matrix(1, 1, s), t.needs_grad(a), [a = a.id](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    const Matrix& x = t.value(a);
    Matrix& ga = t.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 2.0 * g * x[i];
  });
}

inline Var mean_rows(Var a) {
  Tape& t = *a.tape;
  const Matrix& x = t.value(a);
  if (x.rows() == 0) throw DimensionError("mean_rows: no rows");
  Matrix out(1, x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) out[c] += x(r, c);
  }
  const double inv = 1.0 / static_cast<double>(x.rows());
  for (double& v : out.values()) v *= inv;
  return t.push(std::move(out), t.needs_grad(a), [a = a.id, inv](Tape& t, std::size_t self) {
    const Matrix& g = t.grad_of(self);
    Matrix& ga = t.grad_ref(a);
    for (std::size_t r = 0; r < ga.rows(); ++r) {
      for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += g[c] * inv;
    }
  });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  Tape& t = *a.tape;
  const Matrix& x = t.value(a);
  if (begin + count > x.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " +
                         x.shape_string());
  }
  Matrix out(count, x.cols());
  std::copy(x.values().begin() + static_cast<std::ptrdiff_t>(begin * x.cols()),
            x.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * x.cols()), out.values().begin());
  return t.push(std::move(out), t.needs_grad(a), [a = a.id, begin](Tape& t, std::size_t self) {
    const Matrix& g = t.grad_of(self);
    Matrix& ga = t.grad_ref(a);
    const std::size_t off = begin * ga.cols();
    for (std::size_t i = 0; i < g.size(); ++i) ga[off + i] += g[i];
  });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Tape& t = *a.tape;
  const Matrix& x = t.value(a);
  if (begin + count > x.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " +
                         x.shape_string());
  }
  Matrix out(x.rows(), count);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < count; ++c) out(r, c) = x(r, begin + c);
  }
  return t.push(std::move(out), t.needs_grad(a), [a = a.id, begin](Tape& t, std::size_t self) {
    const Matrix& g = t.grad_of(self);
    Matrix& ga = t.grad_ref(a);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, begin + c) += g(r, c);
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  Tape& t = *parts.front().tape;
  const std::size_t rows = t.value(parts.front()).rows();
  std::size_t cols = 0;
  bool ng = false;
  std::vector<std::size_t> ids;
  for (Var p : parts) {
    if (p.tape != &t) throw Error("argument", "operands recorded on different tapes");
    if (t.value(p).rows() != rows) throw DimensionError("concat_cols: row count mismatch");
    cols += t.value(p).cols();
    ng = ng || t.needs_grad(p);
    ids.push_back(p.id);
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (Var p : parts) {
    const Matrix& x = t.value(p);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < x.cols(); ++c) out(r, off + c) = x(r, c);
    }
    off += x.cols();
  }
  return t.push(std::move(out), ng, [ids = std::move(ids)](Tape& t, std::size_t self) {
    const Matrix& g = t.grad_of(self);
    std::size_t off = 0;
    for (std::size_t id : ids) {
      const std::size_t w = t.value(id).cols();
      if (t.needs_grad(id)) {
        Matrix& gi = t.grad_ref(id);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < w; ++c) gi(r, c) += g(r, off + c);
        }
      }
      off += w;
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  Tape& t = *parts.front().tape;
  const std::size_t cols = t.value(parts.front()).cols();
  std::size_t rows = 0;
  bool ng = false;
  std::vector<std::size_t> ids;
  for (Var p : parts) {
    if (p.tape != &t) throw Error("argument", "operands recorded on different tapes");
    if (t.value(p).cols() != cols) throw DimensionError("concat_rows: column count mismatch");
    rows += t.value(p).rows();
    ng = ng || t.needs_grad(p);
    ids.push_back(p.id);
  }
  std::vector<double> values;
  values.reserve(rows * cols);
  for (Var p : parts) {
    auto v = t.value(p).values();
    values.insert(values.end(), v.begin(), v.end());
  }
  return t.push(Matrix(rows, cols, std::move(values)), ng, [ids = std::move(ids)](Tape& t, std::size_t self) {
    const Matrix& g = t.grad_of(self);
    std::size_t off = 0;
    for (std::size_t id : ids) {
      const std::size_t n = t.value(id).size();
      if (t.needs_grad(id)) {
        Matrix& gi = t.grad_ref(id);
        for (std::size_t i = 0; i < n; ++i) gi[i] += g[off + i];
      }
      off += n;
    }
  });
}

inline Var reshape(Var a, std::size_t rows, std::size_t cols) {
  Tape& t = *a.tape;
  const Matrix& x = t.value(a);
  if (rows * cols != x.size()) {
    throw DimensionError("reshape: " + x.shape_string() + " to " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  Matrix out(rows, cols, std::vector<double>(x.values().begin(), x.values().end()));
  return t.push(std::move(out), t.needs_grad(a), [a = a.id](Tape& t, std::size_t self) {
    const Matrix& g = t.grad_of(self);
    Matrix& ga = t.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

// Row-wise softmax. When causal_offset is set, row r only sees columns
// j <= r + offset; masked entries get probability zero.
inline Var softmax_rows(Var a, std::optional<std::size_t> causal_offset = std::nullopt) {
  Tape& t = *a.tape;
  const Matrix& x = t.value(a);
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const std::size_t visible = causal_offset ? std::min(x.cols(), r + *causal_offset + 1) : x.cols();
    if (visible == 0) throw DimensionError("softmax_rows: row with no visible columns");
    const Vector p = amen::softmax(x.row(r).subspan(0, visible));
    std::copy(p.begin(), p.end(), out.row(r).begin());
  }
  return t.push(std::move(out), t.needs_grad(a), [a = a.id](Tape& t, std::size_t self) {
    const Matrix& g = t.grad_of(self);
    const Matrix& p = t.value(self);
    Matrix& ga = t.grad_ref(a);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double inner = 0.0;
      for (std::size_t c = 0; c < p.cols(); ++c) inner += g(r, c) * p(r, c);
      for (std::size_t c = 0; c < p.cols(); ++c) ga(r, c) += p(r, c) * (g(r, c) - inner);
    }
  });
}

// -log softmax(logits)[target] for a single row of logits.
inline Var cross_entropy_logits(Var logits, std::size_t target) {
  Tape& t = *logits.tape;
  const Matrix& x = t.value(logits);
  if (x.rows() != 1 || target >= x.cols()) throw DimensionError("cross_entropy_logits: bad target or shape");
  const double loss = amen::log_sum_exp(x.values()) - x[target];
  return t.push(Matrix(1, 1, loss), t.needs_grad(logits), [a = logits.id, target](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    const Vector p = amen::softmax(t.value(a).values());
    Matrix& ga = t.grad_ref(a);
    for (std::size_t c = 0; c < p.size(); ++c) ga[c] += g * (p[c] - (c == target ? 1.0 : 0.0));
  });
}

}  // namespace ad
}  // namespace amen
