// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode differentiation over rank-2 tensors.
//
// A Tape records every op of one forward pass. Node creation order is a
// topological order, so backward walks the node list in reverse. Parameters
// are bound by reference: their values are never copied into the tape and
// their gradients accumulate directly into Parameter::grad.
#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sum/error.hpp"
#include "sum/tensor.hpp"

namespace sum {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() { grad.fill(T{0}); }
};

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false); }

  // Differentiable input owned by the tape.
  Var<T> leaf(Tensor<T> value) { return push(std::move(value), grad_enabled_); }

  // Bind a parameter by reference; the parameter must outlive the tape.
  Var<T> bind(Parameter<T>& p) {
    Node n;
    n.ref = &p.value;
    n.requires_grad = grad_enabled_;
    n.sink = grad_enabled_ ? &p.grad : nullptr;
    nodes_.push_back(std::move(n));
    return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  // Read-only binding (inference on a shared snapshot).
  Var<T> bind(const Parameter<T>& p) {
    Node n;
    n.ref = &p.value;
    nodes_.push_back(std::move(n));
    return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value(); }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }

  // Gradient of the last backward() w.r.t. a tape-owned node.
  const Tensor<T>& grad(Var<T> v) {
    Node& n = nodes_[v.id];
    if (n.sink) return *n.sink;
    ensure_grad(n);
    return n.grad;
  }

  // Gradient accumulator for node `id`, allocated on first use.
  Tensor<T>& grad_ref(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.sink) return *n.sink;
    ensure_grad(n);
    return n.grad;
  }
  const Tensor<T>& value(std::uint32_t id) const { return nodes_[id].value(); }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

  // Result node of an op. `fn` is dropped when no input needs a gradient.
  Var<T> emit(Tensor<T> value, bool needs_grad, BackwardFn fn) {
    Var<T> v = push(std::move(value), needs_grad && grad_enabled_);
    if (nodes_[v.id].requires_grad) nodes_[v.id].backward = std::move(fn);
    return v;
  }

  void backward(Var<T> loss) {
    Node& root = nodes_.at(loss.id);
    if (root.value().rows() != 1 || root.value().cols() != 1) {
      throw DimensionError("backward requires a scalar loss, got " + root.value().shape_str());
    }
    if (!root.requires_grad) return;
    grad_ref(loss.id)(0, 0) += T{1};
    for (std::uint32_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || !n.has_grad) continue;
      n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor<T> own;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    Tensor<T>* sink = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;

    const Tensor<T>& value() const { return ref ? *ref : own; }
  };

  void ensure_grad(Node& n) {
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value().rows(), n.value().cols());
      n.has_grad = true;
    }
  }

  Var<T> push(Tensor<T> value, bool requires_grad) {
    Node n;
    n.own = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

namespace ops {

namespace detail {

template <typename T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw Error("operands recorded on different tapes");
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
  }
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src, T scale = T{1}) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * s[i];
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  Tape<T>& tp = *a.tape;
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + av.shape_str() + " x " +
                         bv.shape_str());
  }
  Tensor<T> out(av.rows(), bv.cols());
  kernels::gemm_nn(av, bv, out, false);
  const std::uint32_t ia = a.id, ib = b.id;
  return tp.emit(std::move(out), tp.requires_grad(a) || tp.requires_grad(b),
                 [ia, ib](Tape<T>& t, std::uint32_t self) {
                   const Tensor<T>& g = t.grad_ref(self);
                   if (t.requires_grad(ia)) kernels::gemm_nt_acc(g, t.value(ib), t.grad_ref(ia));
                   if (t.requires_grad(ib)) kernels::gemm_tn_acc(t.value(ia), g, t.grad_ref(ib));
                 });
}

// input[N x A] * weight[A x B] + bias[1 x B] broadcast over rows.
template <typename T>
Var<T> linear(Var<T> input, Var<T> weight, Var<T> bias) {
  detail::require_same_tape(input, weight);
  detail::require_same_tape(input, bias);
  Tape<T>& tp = *input.tape;
  const auto& x = input.value();
  const auto& w = weight.value();
  const auto& b = bias.value();
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw DimensionError("linear: incompatible shapes input " + x.shape_str() + ", weight " +
                         w.shape_str() + ", bias " + b.shape_str());
  }
  Tensor<T> out(x.rows(), w.cols());
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    std::copy(b.data().begin(), b.data().end(), r.begin());
  }
  kernels::gemm_nn(x, w, out, true);
  const std::uint32_t ix = input.id, iw = weight.id, ib = bias.id;
  const bool need = tp.requires_grad(input) || tp.requires_grad(weight) || tp.requires_grad(bias);
  return tp.emit(std::move(out), need, [ix, iw, ib](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_ref(self);
    if (t.requires_grad(ix)) kernels::gemm_nt_acc(g, t.value(iw), t.grad_ref(ix));
    if (t.requires_grad(iw)) kernels::gemm_tn_acc(t.value(ix), g, t.grad_ref(iw));
    if (t.requires_grad(ib)) {
      Tensor<T>& gb = t.grad_ref(ib);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        auto gr = g.row(i);
        for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += gr[j];
      }
    }
  });
}

enum class Elementwise { Relu, Add, Mul, Sub };

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("add", a.value(), b.value());
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.value();
  detail::add_into(out, b.value());
  const std::uint32_t ia = a.id, ib = b.id;
  return tp.emit(std::move(out), tp.requires_grad(a) || tp.requires_grad(b),
                 [ia, ib](Tape<T>& t, std::uint32_t self) {
                   const Tensor<T>& g = t.grad_ref(self);
                   if (t.requires_grad(ia)) detail::add_into(t.grad_ref(ia), g);
                   if (t.requires_grad(ib)) detail::add_into(t.grad_ref(ib), g);
                 });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("sub", a.value(), b.value());
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.value();
  detail::add_into(out, b.value(), T{-1});
  const std::uint32_t ia = a.id, ib = b.id;
  return tp.emit(std::move(out), tp.requires_grad(a) || tp.requires_grad(b),
                 [ia, ib](Tape<T>& t, std::uint32_t self) {
                   const Tensor<T>& g = t.grad_ref(self);
                   if (t.requires_grad(ia)) detail::add_into(t.grad_ref(ia), g);
                   if (t.requires_grad(ib)) detail::add_into(t.grad_ref(ib), g, T{-1});
                 });
}

// Hadamard product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("mul", a.value(), b.value());
  Tape<T>& tp = *a.tape;
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::uint32_t ia = a.id, ib = b.id;
  return tp.emit(std::move(out), tp.requires_grad(a) || tp.requires_grad(b),
                 [ia, ib](Tape<T>& t, std::uint32_t self) {
                   const Tensor<T>& g = t.grad_ref(self);
                   if (t.requires_grad(ia)) {
                     Tensor<T>& ga = t.grad_ref(ia);
                     const Tensor<T>& bv = t.value(ib);
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                   }
                   if (t.requires_grad(ib)) {
                     Tensor<T>& gb = t.grad_ref(ib);
                     const Tensor<T>& av = t.value(ia);
                     for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                   }
                 });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  const std::uint32_t ia = a.id;
  return tp.emit(std::move(out), tp.requires_grad(a), [ia](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_ref(self);
    const Tensor<T>& x = t.value(ia);
    Tensor<T>& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > T{0}) ga[i] += g[i];
  });
}

template <typename T>
Var<T> elementwise(Elementwise kind, Var<T> a, Var<T> b = {}) {
  switch (kind) {
    case Elementwise::Relu:
      return relu(a);
    case Elementwise::Add:
      return add(a, b);
    case Elementwise::Mul:
      return mul(a, b);
    case Elementwise::Sub:
      return sub(a, b);
  }
  throw Error("unknown elementwise kind");
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  const std::uint32_t ia = a.id;
  return tp.emit(std::move(out), tp.requires_grad(a), [ia, s](Tape<T>& t, std::uint32_t self) {
    detail::add_into(t.grad_ref(ia), t.grad_ref(self), s);
  });
}

// Per-row normalisation: (x - mean) / sqrt(var + eps) * gain + shift.
template <typename T>
Var<T> layer_norm(Var<T> input, Var<T> gain, Var<T> shift, T eps) {
  detail::require_same_tape(input, gain);
  detail::require_same_tape(input, shift);
  Tape<T>& tp = *input.tape;
  const auto& x = input.value();
  const std::size_t n = x.rows(), d = x.cols();
  if (d == 0) throw DimensionError("layer_norm: zero-width rows");
  if (!(eps > T{0})) throw Error("layer_norm: eps must be positive");
  if (gain.rows() != 1 || gain.cols() != d || shift.rows() != 1 || shift.cols() != d) {
    throw DimensionError("layer_norm: gain/shift must be [1x" + std::to_string(d) + "], got " +
                         gain.value().shape_str() + " and " + shift.value().shape_str());
  }
  const auto& gv = gain.value();
  const auto& sv = shift.value();
  Tensor<T> xhat(n, d);
  std::vector<T> inv_std(n);
  Tensor<T> out(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    T mean{0};
    for (T v : r) mean += v;
    mean /= static_cast<T>(d);
    T var{0};
    for (T v : r) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (r[j] - mean) * is;
      out(i, j) = xhat(i, j) * gv[j] + sv[j];
    }
  }
  const std::uint32_t ix = input.id, ig = gain.id, is = shift.id;
  const bool need = tp.requires_grad(input) || tp.requires_grad(gain) || tp.requires_grad(shift);
  return tp.emit(
      std::move(out), need,
      [ix, ig, is, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t,
                                                                          std::uint32_t self) {
        const Tensor<T>& g = t.grad_ref(self);
        const std::size_t n = g.rows(), d = g.cols();
        if (t.requires_grad(ig)) {
          Tensor<T>& gg = t.grad_ref(ig);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g(i, j) * xhat(i, j);
        }
        if (t.requires_grad(is)) {
          Tensor<T>& gs = t.grad_ref(is);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gs[j] += g(i, j);
        }
        if (t.requires_grad(ix)) {
          const Tensor<T>& gv = t.value(ig);
          Tensor<T>& gx = t.grad_ref(ix);
          const T inv_d = T{1} / static_cast<T>(d);
          for (std::size_t i = 0; i < n; ++i) {
            T sum_dy{0}, sum_dy_xhat{0};
            for (std::size_t j = 0; j < d; ++j) {
              const T dy = g(i, j) * gv[j];
              sum_dy += dy;
              sum_dy_xhat += dy * xhat(i, j);
            }
            for (std::size_t j = 0; j < d; ++j) {
              const T dy = g(i, j) * gv[j];
              gx(i, j) += inv_std[i] * (dy - inv_d * sum_dy - xhat(i, j) * inv_d * sum_dy_xhat);
            }
          }
        }
      });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  Tape<T>& tp = *a.tape;
  const auto& x = a.value();
  Tensor<T> out(x.cols(), x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(j, i) = x(i, j);
  const std::uint32_t ia = a.id;
  return tp.emit(std::move(out), tp.requires_grad(a), [ia](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_ref(self);
    Tensor<T>& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) ga(j, i) += g(i, j);
  });
}

template <typename T>
Var<T> reshape(Var<T> a, std::size_t rows, std::size_t cols) {
  Tape<T>& tp = *a.tape;
  Tensor<T> out = a.value().reshaped(rows, cols);
  const std::uint32_t ia = a.id;
  return tp.emit(std::move(out), tp.requires_grad(a), [ia](Tape<T>& t, std::uint32_t self) {
    auto g = t.grad_ref(self).data();
    auto ga = t.grad_ref(ia).data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
Var<T> flatten(Var<T> a) {
  return reshape(a, 1, a.value().size());
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no operands");
  Tape<T>& tp = *parts[0].tape;
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  bool need = false;
  for (const auto& p : parts) {
    detail::require_same_tape(parts[0], p);
    if (p.value().cols() != cols) {
      throw DimensionError("concat_rows: column mismatch " + parts[0].value().shape_str() +
                           " vs " + p.value().shape_str());
    }
    rows += p.value().rows();
    need = need || tp.requires_grad(p);
  }
  std::vector<T> data;
  data.reserve(rows * cols);
  std::vector<std::uint32_t> ids;
  for (const auto& p : parts) {
    auto d = p.value().data();
    data.insert(data.end(), d.begin(), d.end());
    ids.push_back(p.id);
  }
  return tp.emit(Tensor<T>(rows, cols, std::move(data)), need,
                 [ids = std::move(ids)](Tape<T>& t, std::uint32_t self) {
                   auto g = t.grad_ref(self).data();
                   std::size_t off = 0;
                   for (std::uint32_t id : ids) {
                     const std::size_t n = t.value(id).size();
                     if (t.requires_grad(id)) {
                       auto ga = t.grad_ref(id).data();
                       for (std::size_t i = 0; i < n; ++i) ga[i] += g[off + i];
                     }
                     off += n;
                   }
                 });
}

template <typename T>
Var<T> concat_rows(std::initializer_list<Var<T>> parts) {
  std::vector<Var<T>> v(parts);
  return concat_rows(std::span<const Var<T>>(v));
}

// Horizontal concatenation of operands with equal row counts.
template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  Tape<T>& tp = *parts[0].tape;
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  bool need = false;
  for (const auto& p : parts) {
    detail::require_same_tape(parts[0], p);
    if (p.value().rows() != rows) {
      throw DimensionError("concat_cols: row mismatch " + parts[0].value().shape_str() + " vs " +
                           p.value().shape_str());
    }
    cols += p.value().cols();
    need = need || tp.requires_grad(p);
  }
  Tensor<T> out(rows, cols);
  std::vector<std::uint32_t> ids;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) out(i, off + j) = v(i, j);
    off += v.cols();
    ids.push_back(p.id);
  }
  return tp.emit(std::move(out), need, [ids = std::move(ids)](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_ref(self);
    std::size_t off = 0;
    for (std::uint32_t id : ids) {
      const std::size_t c = t.value(id).cols();
      if (t.requires_grad(id)) {
        Tensor<T>& ga = t.grad_ref(id);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < c; ++j) ga(i, j) += g(i, off + j);
      }
      off += c;
    }
  });
}

template <typename T>
Var<T> concat_cols(std::initializer_list<Var<T>> parts) {
  std::vector<Var<T>> v(parts);
  return concat_cols(std::span<const Var<T>>(v));
}

template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t count) {
  Tape<T>& tp = *a.tape;
  const auto& x = a.value();
  if (begin + count > x.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of range for " + x.shape_str());
  }
  const std::size_t c = x.cols();
  std::vector<T> data(x.data().begin() + begin * c, x.data().begin() + (begin + count) * c);
  const std::uint32_t ia = a.id;
  return tp.emit(Tensor<T>(count, c, std::move(data)), tp.requires_grad(a),
                 [ia, begin](Tape<T>& t, std::uint32_t self) {
                   auto g = t.grad_ref(self).data();
                   auto ga = t.grad_ref(ia).data();
                   const std::size_t off = begin * t.value(ia).cols();
                   for (std::size_t i = 0; i < g.size(); ++i) ga[off + i] += g[i];
                 });
}

// Output row m = sum_n weights[m, n] * input row n.
template <typename T>
Var<T> weighted_row_sum(Var<T> input, Var<T> weights) {
  if (weights.value().cols() != input.value().rows()) {
    throw DimensionError("weighted_row_sum: weights " + weights.value().shape_str() +
                         " do not match input " + input.value().shape_str());
  }
  return matmul(weights, input);
}

enum class Structural { ConcatRows, Transpose, SliceRows, WeightedRowSum };

template <typename T>
Var<T> sum(Var<T> a) {
  Tape<T>& tp = *a.tape;
  T s{0};
  for (T v : a.value().data()) s += v;
  const std::uint32_t ia = a.id;
  return tp.emit(Tensor<T>(1, 1, s), tp.requires_grad(a), [ia](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad_ref(self)[0];
    for (auto& v : t.grad_ref(ia).data()) v += g;
  });
}

// Mean of the ids' rows of an embedding table (bag of ids), as a [1 x D] token.
// Gradient is scattered only into the referenced rows.
template <typename T>
Var<T> gather_mean(Var<T> table, std::span<const std::size_t> rows) {
  Tape<T>& tp = *table.tape;
  const auto& w = table.value();
  Tensor<T> out(1, w.cols());
  if (!rows.empty()) {
    const T inv = T{1} / static_cast<T>(rows.size());
    for (std::size_t r : rows) {
      if (r >= w.rows()) throw DimensionError("gather_mean: row index out of range");
      auto src = w.row(r);
      for (std::size_t j = 0; j < w.cols(); ++j) out[j] += src[j] * inv;
    }
  }
  const std::uint32_t it = table.id;
  return tp.emit(std::move(out), tp.requires_grad(table) && !rows.empty(),
                 [it, rows = std::vector<std::size_t>(rows.begin(), rows.end())](
                     Tape<T>& t, std::uint32_t self) {
                   const Tensor<T>& g = t.grad_ref(self);
                   Tensor<T>& gw = t.grad_ref(it);
                   const T inv = T{1} / static_cast<T>(rows.size());
                   for (std::size_t r : rows) {
                     auto dst = gw.row(r);
                     for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g[j] * inv;
                   }
                 });
}

inline constexpr double kProbClamp = 1e-7;

// Weighted multi-task binary cross-entropy on logits [N x T], averaged over N.
// Probabilities are clamped to [1e-7, 1 - 1e-7]; clamped entries pass no gradient.
template <typename T>
Var<T> multi_task_bce(Var<T> logits, const Tensor<T>& labels, std::span<const T> task_weights) {
  Tape<T>& tp = *logits.tape;
  const auto& z = logits.value();
  if (!z.same_shape(labels) || task_weights.size() != z.cols()) {
    throw DimensionError("multi_task_bce: logits " + z.shape_str() + ", labels " +
                         labels.shape_str() + ", " + std::to_string(task_weights.size()) +
                         " task weights");
  }
  const T lo = static_cast<T>(kProbClamp), hi = T{1} - static_cast<T>(kProbClamp);
  const std::size_t n = z.rows(), tasks = z.cols();
  Tensor<T> dz(n, tasks);
  T loss{0};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < tasks; ++t) {
      const T y = labels(i, t);
      if (y != T{0} && y != T{1}) throw Error("multi_task_bce: label is not binary");
      const T p_raw = T{1} / (T{1} + std::exp(-z(i, t)));
      const T p = std::clamp(p_raw, lo, hi);
      const T w = task_weights[t];
      loss -= w * (y * std::log(p) + (T{1} - y) * std::log(T{1} - p));
      const bool clamped = p_raw < lo || p_raw > hi;
      dz(i, t) = clamped ? T{0} : w * (p - y) / static_cast<T>(n);
    }
  }
  loss /= static_cast<T>(n);
  const std::uint32_t iz = logits.id;
  return tp.emit(Tensor<T>(1, 1, loss), tp.requires_grad(logits),
                 [iz, dz = std::move(dz)](Tape<T>& t, std::uint32_t self) {
                   const T g = t.grad_ref(self)[0];
                   detail::add_into(t.grad_ref(iz), dz, g);
                 });
}

}  // namespace ops

/// Maximum relative error between the tape gradient of `fn` at `point` and
/// central finite differences, taken over the given coordinates (all when
/// empty). Relative error per coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// `fn` maps (tape, input var) to a [1 x 1] var and must be deterministic.
template <typename Fn>
double grad_check(Fn&& fn, const Tensor<double>& point, double eps,
                  std::span<const std::size_t> coords = {}) {
  Tensor<double> analytic;
  {
    Tape<double> tape;
    Var<double> x = tape.leaf(point);
    Var<double> y = fn(tape, x);
    if (!std::isfinite(y.value()[0])) throw NumericError("grad_check: non-finite function value");
    tape.backward(y);
    analytic = tape.grad(x);
  }
  auto eval = [&](const Tensor<double>& p) {
    Tape<double> tape(false);
    const double v = fn(tape, tape.constant(p)).value()[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
  };
  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(point.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    coords = all;
  }
  double worst = 0.0;
  Tensor<double> probe = point;
  for (std::size_t c : coords) {
    const double x0 = point[c];
    probe[c] = x0 + eps;
    const double up = eval(probe);
    probe[c] = x0 - eps;
    const double down = eval(probe);
    probe[c] = x0;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic[c];
    if (!std::isfinite(a)) throw NumericError("grad_check: non-finite analytic gradient");
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

/// grad_check over parameters bound inside `fn`, which maps a tape to a
/// [1 x 1] var. Checks up to `max_coords` randomly chosen coordinates per
/// parameter (all when 0).
template <typename Fn>
double param_grad_check(Fn&& fn, std::span<Parameter<double>* const> params, double eps,
                        std::size_t max_coords = 0, std::uint64_t seed = 1) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    Var<double> y = fn(tape);
    if (!std::isfinite(y.value()[0])) throw NumericError("grad_check: non-finite function value");
    tape.backward(y);
  }
  auto eval = [&] {
    Tape<double> tape(false);
    const double v = fn(tape).value()[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
  };
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (auto* p : params) {
    std::vector<std::size_t> coords(p->value.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords != 0 && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    for (std::size_t c : coords) {
      const double x0 = p->value[c];
      p->value[c] = x0 + eps;
      const double up = eval();
      p->value[c] = x0 - eps;
      const double down = eval();
      p->value[c] = x0;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = p->grad[c];
      if (!std::isfinite(a)) throw NumericError("grad_check: non-finite analytic gradient");
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace sum
