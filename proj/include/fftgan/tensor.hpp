#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fftgan/common.hpp"

namespace fftgan {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// Dense row-major double tensor. Value is immutable once an op has produced
// it; only the grad buffer and leaf data (between training steps) mutate.
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until needed, then value.size()
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  // Reads this->grad, accumulates into parents' grad. Captures parents via
  // the vector above, not by value, so the graph stays a DAG.
  std::function<void(TensorNode&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return make(std::move(shape), {}, requires_grad, true);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (static_cast<long long>(data.size()) != numel(shape))
      throw std::invalid_argument("Tensor: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    Tensor t;
    t.p_ = std::make_shared<TensorNode>();
    t.p_->shape = std::move(shape);
    t.p_->value = std::move(data);
    t.p_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return p_ != nullptr; }
  const Shape& shape() const { return p_->shape; }
  int rank() const { return static_cast<int>(p_->shape.size()); }
  int dim(int i) const { return p_->shape[static_cast<size_t>(i)]; }
  long long size() const { return static_cast<long long>(p_->value.size()); }

  std::vector<double>& data() { return p_->value; }
  const std::vector<double>& data() const { return p_->value; }

  std::vector<double>& grad() {
    p_->ensure_grad();
    return p_->grad;
  }
  const std::vector<double>& grad() const {
    p_->ensure_grad();
    return p_->grad;
  }
  bool has_grad() const { return !p_->grad.empty(); }
  void zero_grad() { p_->grad.assign(p_->value.size(), 0.0); }

  bool requires_grad() const { return p_->requires_grad; }
  void set_requires_grad(bool rg) { p_->requires_grad = rg; }

  double item() const {
    if (size() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(size()) + " elements");
    return p_->value[0];
  }

  // Value copy with no history; gradients do not flow past it.
  Tensor detach() const { return from_data(shape(), data(), false); }

  const char* op() const { return p_->op; }
  TensorNode* node() const { return p_.get(); }

  // Reverse-mode sweep from a scalar. Gradients accumulate additively across
  // fan-out; leaf grads persist until zero_grad.
  void backward() const;

  friend Tensor make_op(Shape shape, std::vector<double> value, const char* op,
                        std::vector<Tensor> parents, std::function<void(TensorNode&)> backprop);

 private:
  static Tensor make(Shape shape, std::vector<double> value, bool requires_grad, bool zero) {
    Tensor t;
    t.p_ = std::make_shared<TensorNode>();
    const long long n = numel(shape);
    for (int d : shape)
      if (d <= 0) throw std::invalid_argument("Tensor: non-positive extent in " + shape_str(shape));
    t.p_->shape = std::move(shape);
    if (zero)
      t.p_->value.assign(static_cast<size_t>(n), 0.0);
    else
      t.p_->value = std::move(value);
    t.p_->requires_grad = requires_grad;
    return t;
  }

  NodePtr p_;
};

// The one constructor every op goes through. If no parent requires a
// gradient the backprop closure is dropped and the result is a plain value.
inline Tensor make_op(Shape shape, std::vector<double> value, const char* op,
                      std::vector<Tensor> parents, std::function<void(TensorNode&)> backprop) {
  Tensor t = Tensor::from_data(std::move(shape), std::move(value), false);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  t.p_->op = op;
  if (rg) {
    t.p_->requires_grad = true;
    t.p_->parents.reserve(parents.size());
    for (auto& p : parents) t.p_->parents.push_back(p.p_);
    t.p_->backprop = std::move(backprop);
  }
  return t;
}

inline void Tensor::backward() const {
  if (size() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(shape()));
  if (!requires_grad()) return;

  // Iterative post-order topological sort over the parent DAG.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  struct Frame {
    TensorNode* n;
    size_t next;
  };
  std::vector<Frame> stack{{p_.get(), 0}};
  seen.insert(p_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      TensorNode* par = f.n->parents[f.next++].get();
      if (par->requires_grad && seen.insert(par).second) stack.push_back({par, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  p_->ensure_grad();
  p_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Broadcasting (numpy-style, aligned on trailing dimensions)

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    const int da = i < ra ? a[ra - 1 - i] : 1;
    const int db = i < rb ? b[rb - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) fail_dims(op, a, b, "are not broadcast-compatible");
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

// Flat strides of `from` viewed under the broadcast shape `to` (0 on expanded axes).
inline std::vector<long long> broadcast_strides(const Shape& from, const Shape& to) {
  std::vector<long long> natural(from.size());
  long long acc = 1;
  for (size_t i = from.size(); i-- > 0;) {
    natural[i] = acc;
    acc *= from[i];
  }
  std::vector<long long> out(to.size(), 0);
  const size_t off = to.size() - from.size();
  for (size_t i = 0; i < from.size(); ++i) out[off + i] = (from[i] == 1 && to[off + i] != 1) ? 0 : natural[i];
  return out;
}

// Sum `g` (laid out as gshape) down to oshape, undoing broadcasting.
inline void reduce_into(const std::vector<double>& g, const Shape& gshape, std::vector<double>& out,
                        const Shape& oshape) {
  if (gshape == oshape) {
    for (size_t i = 0; i < g.size(); ++i) out[i] += g[i];
    return;
  }
  const auto st = broadcast_strides(oshape, gshape);
  const size_t r = gshape.size();
  std::vector<int> idx(r, 0);
  long long src = 0;
  long long dst = 0;
  const long long n = numel(gshape);
  for (long long flat = 0; flat < n; ++flat) {
    out[static_cast<size_t>(dst)] += g[static_cast<size_t>(src)];
    ++src;
    for (size_t i = r; i-- > 0;) {
      if (++idx[i] < gshape[i]) {
        dst += st[i];
        break;
      }
      idx[i] = 0;
      dst -= st[i] * (gshape[i] - 1);
      if (i == 0) break;
    }
  }
}

namespace detail {

// Elementwise binary op with broadcasting. fwd(a,b) -> value;
// dfda/dfdb give local partials as functions of (a, b, y).
template <class F, class Da, class Db>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F fwd, Da dfda, Db dfdb) {
  const Shape out_shape = broadcast_shape(name, a.shape(), b.shape());
  const long long n = numel(out_shape);
  std::vector<double> value(static_cast<size_t>(n));

  if (a.shape() == b.shape()) {
    const auto& av = a.data();
    const auto& bv = b.data();
    for (long long i = 0; i < n; ++i) value[static_cast<size_t>(i)] = fwd(av[static_cast<size_t>(i)], bv[static_cast<size_t>(i)]);
  } else {
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    const size_t r = out_shape.size();
    std::vector<int> idx(r, 0);
    long long ia = 0, ib = 0;
    const auto& av = a.data();
    const auto& bv = b.data();
    for (long long flat = 0; flat < n; ++flat) {
      value[static_cast<size_t>(flat)] = fwd(av[static_cast<size_t>(ia)], bv[static_cast<size_t>(ib)]);
      for (size_t i = r; i-- > 0;) {
        if (++idx[i] < out_shape[i]) {
          ia += sa[i];
          ib += sb[i];
          break;
        }
        idx[i] = 0;
        ia -= sa[i] * (out_shape[i] - 1);
        ib -= sb[i] * (out_shape[i] - 1);
        if (i == 0) break;
      }
    }
  }

  Tensor ta = a, tb = b;
  return make_op(out_shape, std::move(value), name, {a, b}, [ta, tb, out_shape, dfda, dfdb](TensorNode& self) {
    const long long n = numel(out_shape);
    std::vector<double> ga, gb;
    const bool need_a = ta.requires_grad();
    const bool need_b = tb.requires_grad();
    if (need_a) ga.assign(static_cast<size_t>(n), 0.0);
    if (need_b) gb.assign(static_cast<size_t>(n), 0.0);

    const bool same = ta.shape() == tb.shape() && ta.shape() == out_shape;
    const auto& av = ta.data();
    const auto& bv = tb.data();
    if (same) {
      for (long long i = 0; i < n; ++i) {
        const size_t k = static_cast<size_t>(i);
        const double g = self.grad[k];
        if (need_a) ga[k] = g * dfda(av[k], bv[k], self.value[k]);
        if (need_b) gb[k] = g * dfdb(av[k], bv[k], self.value[k]);
      }
    } else {
      const auto sa = broadcast_strides(ta.shape(), out_shape);
      const auto sb = broadcast_strides(tb.shape(), out_shape);
      const size_t r = out_shape.size();
      std::vector<int> idx(r, 0);
      long long ia = 0, ib = 0;
      for (long long flat = 0; flat < n; ++flat) {
        const size_t k = static_cast<size_t>(flat);
        const double g = self.grad[k];
        if (need_a) ga[k] = g * dfda(av[static_cast<size_t>(ia)], bv[static_cast<size_t>(ib)], self.value[k]);
        if (need_b) gb[k] = g * dfdb(av[static_cast<size_t>(ia)], bv[static_cast<size_t>(ib)], self.value[k]);
        for (size_t i = r; i-- > 0;) {
          if (++idx[i] < out_shape[i]) {
            ia += sa[i];
            ib += sb[i];
            break;
          }
          idx[i] = 0;
          ia -= sa[i] * (out_shape[i] - 1);
          ib -= sb[i] * (out_shape[i] - 1);
          if (i == 0) break;
        }
      }
    }
    if (need_a) {
      ta.node()->ensure_grad();
      reduce_into(ga, out_shape, ta.node()->grad, ta.shape());
    }
    if (need_b) {
      tb.node()->ensure_grad();
      reduce_into(gb, out_shape, tb.node()->grad, tb.shape());
    }
  });
}

template <class F, class D>
Tensor unary_op(const char* name, const Tensor& x, F fwd, D dfdx) {
  const long long n = x.size();
  std::vector<double> value(static_cast<size_t>(n));
  const auto& xv = x.data();
  for (long long i = 0; i < n; ++i) value[static_cast<size_t>(i)] = fwd(xv[static_cast<size_t>(i)]);
  Tensor tx = x;
  return make_op(x.shape(), std::move(value), name, {x}, [tx, dfdx](TensorNode& self) {
    tx.node()->ensure_grad();
    auto& g = tx.node()->grad;
    const auto& xv = tx.data();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfdx(xv[i], self.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary_op(
      "scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary_op(
      "add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor relu(const Tensor& x) {
  // Subgradient at 0 is 0.
  return detail::unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor leaky_relu(const Tensor& x, double slope = 0.2) {
  return detail::unary_op(
      "leaky_relu", x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary_op(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary_op(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor sqrt(const Tensor& x) {
  return detail::unary_op(
      "sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

inline Tensor abs(const Tensor& x) {
  // Subgradient at 0 is 0, matching relu's convention.
  return detail::unary_op(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Tensor square(const Tensor& x) {
  return detail::unary_op(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Shape ops

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor tx = x;
  return make_op(std::move(shape), x.data(), "reshape", {x}, [tx](TensorNode& self) {
    tx.node()->ensure_grad();
    auto& g = tx.node()->grad;
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("transpose: expected rank-2, got " + shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  std::vector<double> value(static_cast<size_t>(m) * n);
  const auto& xv = x.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) value[static_cast<size_t>(j) * m + i] = xv[static_cast<size_t>(i) * n + j];
  Tensor tx = x;
  return make_op({n, m}, std::move(value), "transpose", {x}, [tx, m, n](TensorNode& self) {
    tx.node()->ensure_grad();
    auto& g = tx.node()->grad;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) g[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j) * m + i];
  });
}

inline Tensor concat_channels(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty input list");
  const int rank = xs[0].rank();
  if (rank != 4) throw std::invalid_argument("concat_channels: expected rank-4, got " + shape_str(xs[0].shape()));
  const int b = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  int ctotal = 0;
  for (const auto& x : xs) {
    if (x.rank() != 4 || x.dim(0) != b || x.dim(2) != h || x.dim(3) != w)
      fail_dims("concat_channels", xs[0].shape(), x.shape(), "differ outside the channel axis");
    ctotal += x.dim(1);
  }
  const long long hw = static_cast<long long>(h) * w;
  std::vector<double> value(static_cast<size_t>(b) * ctotal * hw);
  long long coff = 0;
  for (const auto& x : xs) {
    const int c = x.dim(1);
    const auto& xv = x.data();
    for (int bi = 0; bi < b; ++bi) {
      const double* src = xv.data() + static_cast<long long>(bi) * c * hw;
      double* dst = value.data() + (static_cast<long long>(bi) * ctotal + coff) * hw;
      std::copy(src, src + static_cast<long long>(c) * hw, dst);
    }
    coff += c;
  }
  std::vector<Tensor> parents = xs;
  return make_op({b, ctotal, h, w}, std::move(value), "concat_channels", parents,
                 [parents, b, ctotal, hw](TensorNode& self) {
                   long long coff = 0;
                   for (const auto& x : parents) {
                     const int c = x.dim(1);
                     if (x.requires_grad()) {
                       x.node()->ensure_grad();
                       auto& g = x.node()->grad;
                       for (int bi = 0; bi < b; ++bi) {
                         const double* src = self.grad.data() + (static_cast<long long>(bi) * ctotal + coff) * hw;
                         double* dst = g.data() + static_cast<long long>(bi) * c * hw;
                         for (long long i = 0; i < static_cast<long long>(c) * hw; ++i) dst[i] += src[i];
                       }
                     }
                     coff += c;
                   }
                 });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor tx = x;
  return make_op({1}, {acc}, "sum", {x}, [tx](TensorNode& self) {
    tx.node()->ensure_grad();
    const double g = self.grad[0];
    for (auto& v : tx.node()->grad) v += g;
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

inline Tensor sum_axis(const Tensor& x, int axis, bool keepdims = false) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::invalid_argument("sum_axis: axis out of range for " + shape_str(x.shape()));
  long long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  const int nred = x.dim(axis);

  Shape out_shape;
  for (int i = 0; i < r; ++i) {
    if (i == axis) {
      if (keepdims) out_shape.push_back(1);
    } else {
      out_shape.push_back(x.dim(i));
    }
  }
  if (out_shape.empty()) out_shape = {1};

  std::vector<double> value(static_cast<size_t>(outer) * inner, 0.0);
  const auto& xv = x.data();
  for (long long o = 0; o < outer; ++o)
    for (int k = 0; k < nred; ++k) {
      const double* src = xv.data() + (o * nred + k) * inner;
      double* dst = value.data() + o * inner;
      for (long long i = 0; i < inner; ++i) dst[i] += src[i];
    }
  Tensor tx = x;
  return make_op(out_shape, std::move(value), "sum_axis", {x}, [tx, outer, inner, nred](TensorNode& self) {
    tx.node()->ensure_grad();
    auto& g = tx.node()->grad;
    for (long long o = 0; o < outer; ++o)
      for (int k = 0; k < nred; ++k) {
        double* dst = g.data() + (o * nred + k) * inner;
        const double* src = self.grad.data() + o * inner;
        for (long long i = 0; i < inner; ++i) dst[i] += src[i];
      }
  });
}

// Per-axis max as a constant (no gradient); used for stable log-sum-exp shifts.
inline Tensor max_axis_detached(const Tensor& x, int axis, bool keepdims = false) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  long long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  const int nred = x.dim(axis);
  Shape out_shape;
  for (int i = 0; i < r; ++i) {
    if (i == axis) {
      if (keepdims) out_shape.push_back(1);
    } else {
      out_shape.push_back(x.dim(i));
    }
  }
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> value(static_cast<size_t>(outer) * inner, -std::numeric_limits<double>::infinity());
  const auto& xv = x.data();
  for (long long o = 0; o < outer; ++o)
    for (int k = 0; k < nred; ++k) {
      const double* src = xv.data() + (o * nred + k) * inner;
      double* dst = value.data() + o * inner;
      for (long long i = 0; i < inner; ++i) dst[i] = std::max(dst[i], src[i]);
    }
  return Tensor::from_data(out_shape, std::move(value), false);
}

// log(sum(exp(x), axis)) with a detached max shift; exact gradient since the
// shift is a constant.
inline Tensor logsumexp_axis(const Tensor& x, int axis, bool keepdims = false) {
  Tensor m_keep = max_axis_detached(x, axis, true);
  Tensor shifted = sub(x, m_keep);
  Tensor s = sum_axis(exp(shifted), axis, keepdims);
  Tensor m = keepdims ? m_keep : max_axis_detached(x, axis, false);
  return add(log(s), m);
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) fail_dims("matmul", a.shape(), b.shape(), "must both be rank-2");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) fail_dims("matmul", a.shape(), b.shape(), "have mismatched inner dimensions");
  std::vector<double> value(static_cast<size_t>(m) * n, 0.0);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double aip = av[static_cast<size_t>(i) * k + p];
      const double* brow = bv.data() + static_cast<size_t>(p) * n;
      double* crow = value.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  Tensor ta = a, tb = b;
  return make_op({m, n}, std::move(value), "matmul", {a, b}, [ta, tb, m, k, n](TensorNode& self) {
    const auto& g = self.grad;
    if (ta.requires_grad()) {
      ta.node()->ensure_grad();
      auto& ga = ta.node()->grad;  // dA = G B^T
      const auto& bv = tb.data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const double gij = g[static_cast<size_t>(i) * n + j];
          const double* brow = bv.data();
          for (int p = 0; p < k; ++p) ga[static_cast<size_t>(i) * k + p] += gij * brow[static_cast<size_t>(p) * n + j];
        }
    }
    if (tb.requires_grad()) {
      tb.node()->ensure_grad();
      auto& gb = tb.node()->grad;  // dB = A^T G
      const auto& av = ta.data();
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          const double aip = av[static_cast<size_t>(i) * k + p];
          const double* grow = g.data() + static_cast<size_t>(i) * n;
          double* brow = gb.data() + static_cast<size_t>(p) * n;
          for (int j = 0; j < n; ++j) brow[j] += aip * grow[j];
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and friends (NCHW, cross-correlation, square odd kernels)

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride = 1, int pad = 0) {
  if (x.rank() != 4 || w.rank() != 4) fail_dims("conv2d", x.shape(), w.shape(), "must both be rank-4");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), Cw = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (C != Cw) fail_dims("conv2d", x.shape(), w.shape(), "have mismatched channel counts");
  if (kh != kw || kh % 2 == 0) throw std::invalid_argument("conv2d: kernel must be square and odd, got " + shape_str(w.shape()));
  const int k = kh;
  if ((H + 2 * pad - k) % stride != 0 || (W + 2 * pad - k) % stride != 0)
    throw std::invalid_argument("conv2d: non-integral output extent for input " + shape_str(x.shape()) +
                                ", kernel " + shape_str(w.shape()) + ", stride " + std::to_string(stride) +
                                ", pad " + std::to_string(pad));
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;

  std::vector<double> value(static_cast<size_t>(B) * O * Ho * Wo, 0.0);
  const auto& xv = x.data();
  const auto& wv = w.data();
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < O; ++o)
      for (int c = 0; c < C; ++c) {
        const double* xc = xv.data() + (static_cast<long long>(b) * C + c) * H * W;
        const double* wc = wv.data() + (static_cast<long long>(o) * C + c) * k * k;
        double* yc = value.data() + (static_cast<long long>(b) * O + o) * Ho * Wo;
        for (int p = 0; p < k; ++p)
          for (int q = 0; q < k; ++q) {
            const double wpq = wc[p * k + q];
            if (wpq == 0.0) continue;
            for (int i = 0; i < Ho; ++i) {
              const int y = i * stride - pad + p;
              if (y < 0 || y >= H) continue;
              const double* xrow = xc + static_cast<long long>(y) * W;
              double* yrow = yc + static_cast<long long>(i) * Wo;
              int j0 = 0, j1 = Wo;
              // clamp j range so x column index stays in [0, W)
              while (j0 < Wo && j0 * stride - pad + q < 0) ++j0;
              while (j1 > j0 && (j1 - 1) * stride - pad + q >= W) --j1;
              const int base = -pad + q;
              for (int j = j0; j < j1; ++j) yrow[j] += wpq * xrow[j * stride + base];
            }
          }
      }

  Tensor tx = x, tw = w;
  return make_op({B, O, Ho, Wo}, std::move(value), "conv2d", {x, w},
                 [tx, tw, B, C, H, W, O, k, stride, pad, Ho, Wo](TensorNode& self) {
                   const auto& g = self.grad;
                   const auto& xv = tx.data();
                   const auto& wv = tw.data();
                   if (tx.requires_grad()) {
                     tx.node()->ensure_grad();
                     auto& gx = tx.node()->grad;
                     for (int b = 0; b < B; ++b)
                       for (int o = 0; o < O; ++o)
                         for (int c = 0; c < C; ++c) {
                           double* gxc = gx.data() + (static_cast<long long>(b) * C + c) * H * W;
                           const double* wc = wv.data() + (static_cast<long long>(o) * C + c) * k * k;
                           const double* gyc = g.data() + (static_cast<long long>(b) * O + o) * Ho * Wo;
                           for (int p = 0; p < k; ++p)
                             for (int q = 0; q < k; ++q) {
                               const double wpq = wc[p * k + q];
                               if (wpq == 0.0) continue;
                               for (int i = 0; i < Ho; ++i) {
                                 const int y = i * stride - pad + p;
                                 if (y < 0 || y >= H) continue;
                                 double* gxrow = gxc + static_cast<long long>(y) * W;
                                 const double* gyrow = gyc + static_cast<long long>(i) * Wo;
                                 int j0 = 0, j1 = Wo;
                                 while (j0 < Wo && j0 * stride - pad + q < 0) ++j0;
                                 while (j1 > j0 && (j1 - 1) * stride - pad + q >= W) --j1;
                                 const int base = -pad + q;
                                 for (int j = j0; j < j1; ++j) gxrow[j * stride + base] += wpq * gyrow[j];
                               }
                             }
                         }
                   }
                   if (tw.requires_grad()) {
                     tw.node()->ensure_grad();
                     auto& gw = tw.node()->grad;
                     for (int b = 0; b < B; ++b)
                       for (int o = 0; o < O; ++o)
                         for (int c = 0; c < C; ++c) {
                           const double* xc = xv.data() + (static_cast<long long>(b) * C + c) * H * W;
                           double* gwc = gw.data() + (static_cast<long long>(o) * C + c) * k * k;
                           const double* gyc = g.data() + (static_cast<long long>(b) * O + o) * Ho * Wo;
                           for (int p = 0; p < k; ++p)
                             for (int q = 0; q < k; ++q) {
                               double acc = 0.0;
                               for (int i = 0; i < Ho; ++i) {
                                 const int y = i * stride - pad + p;
                                 if (y < 0 || y >= H) continue;
                                 const double* xrow = xc + static_cast<long long>(y) * W;
                                 const double* gyrow = gyc + static_cast<long long>(i) * Wo;
                                 int j0 = 0, j1 = Wo;
                                 while (j0 < Wo && j0 * stride - pad + q < 0) ++j0;
                                 while (j1 > j0 && (j1 - 1) * stride - pad + q >= W) --j1;
                                 const int base = -pad + q;
                                 for (int j = j0; j < j1; ++j) acc += xrow[j * stride + base] * gyrow[j];
                               }
                               gwc[p * k + q] += acc;
                             }
                         }
                   }
                 });
}

// Stride-1 "same" convolution with replicate (clamp-to-edge) padding, so a
// constant input maps to a constant output even at the borders. Used for
// modulation maps where zero padding would fabricate edge structure.
inline Tensor conv2d_replicate(const Tensor& x, const Tensor& w) {
  if (x.rank() != 4 || w.rank() != 4) fail_dims("conv2d_replicate", x.shape(), w.shape(), "must both be rank-4");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), Cw = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (C != Cw) fail_dims("conv2d_replicate", x.shape(), w.shape(), "have mismatched channel counts");
  if (kh != kw || kh % 2 == 0)
    throw std::invalid_argument("conv2d_replicate: kernel must be square and odd, got " + shape_str(w.shape()));
  const int k = kh, r = k / 2;
  auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v >= hi ? hi - 1 : v); };

  std::vector<double> value(static_cast<size_t>(B) * O * H * W, 0.0);
  const auto& xv = x.data();
  const auto& wv = w.data();
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < O; ++o)
      for (int c = 0; c < C; ++c) {
        const double* xc = xv.data() + (static_cast<long long>(b) * C + c) * H * W;
        const double* wc = wv.data() + (static_cast<long long>(o) * C + c) * k * k;
        double* yc = value.data() + (static_cast<long long>(b) * O + o) * H * W;
        for (int p = 0; p < k; ++p)
          for (int q = 0; q < k; ++q) {
            const double wpq = wc[p * k + q];
            if (wpq == 0.0) continue;
            for (int i = 0; i < H; ++i) {
              const double* xrow = xc + static_cast<long long>(clampi(i - r + p, H)) * W;
              double* yrow = yc + static_cast<long long>(i) * W;
              for (int j = 0; j < W; ++j) yrow[j] += wpq * xrow[clampi(j - r + q, W)];
            }
          }
      }

  Tensor tx = x, tw = w;
  return make_op({B, O, H, W}, std::move(value), "conv2d_replicate", {x, w},
                 [tx, tw, B, C, H, W, O, k, r, clampi](TensorNode& self) {
                   const auto& g = self.grad;
                   const auto& xv = tx.data();
                   const auto& wv = tw.data();
                   for (int b = 0; b < B; ++b)
                     for (int o = 0; o < O; ++o)
                       for (int c = 0; c < C; ++c) {
                         const double* wc = wv.data() + (static_cast<long long>(o) * C + c) * k * k;
                         const double* xc = xv.data() + (static_cast<long long>(b) * C + c) * H * W;
                         const double* gyc = g.data() + (static_cast<long long>(b) * O + o) * H * W;
                         double* gxc = nullptr;
                         double* gwc = nullptr;
                         if (tx.requires_grad()) {
                           tx.node()->ensure_grad();
                           gxc = tx.node()->grad.data() + (static_cast<long long>(b) * C + c) * H * W;
                         }
                         if (tw.requires_grad()) {
                           tw.node()->ensure_grad();
                           gwc = tw.node()->grad.data() + (static_cast<long long>(o) * C + c) * k * k;
                         }
                         if (!gxc && !gwc) continue;
                         for (int p = 0; p < k; ++p)
                           for (int q = 0; q < k; ++q) {
                             const double wpq = wc[p * k + q];
                             double acc = 0.0;
                             for (int i = 0; i < H; ++i) {
                               const int y = clampi(i - r + p, H);
                               const double* xrow = xc + static_cast<long long>(y) * W;
                               double* gxrow = gxc ? gxc + static_cast<long long>(y) * W : nullptr;
                               const double* gyrow = gyc + static_cast<long long>(i) * W;
                               for (int j = 0; j < W; ++j) {
                                 const int z = clampi(j - r + q, W);
                                 if (gxrow && wpq != 0.0) gxrow[z] += wpq * gyrow[j];
                                 if (gwc) acc += xrow[z] * gyrow[j];
                               }
                             }
                             if (gwc) gwc[p * k + q] += acc;
                           }
                       }
                 });
}

// Nearest-neighbour 2x upsampling.
inline Tensor upsample2x(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("upsample2x: expected rank-4, got " + shape_str(x.shape()));
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<double> value(static_cast<size_t>(B) * C * 4 * H * W);
  const auto& xv = x.data();
  for (long long bc = 0; bc < static_cast<long long>(B) * C; ++bc) {
    const double* src = xv.data() + bc * H * W;
    double* dst = value.data() + bc * 4 * H * W;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const double v = src[i * W + j];
        double* d = dst + (2 * i) * (2 * W) + 2 * j;
        d[0] = v;
        d[1] = v;
        d[2 * W] = v;
        d[2 * W + 1] = v;
      }
  }
  Tensor tx = x;
  return make_op({B, C, 2 * H, 2 * W}, std::move(value), "upsample2x", {x}, [tx, B, C, H, W](TensorNode& self) {
    tx.node()->ensure_grad();
    auto& g = tx.node()->grad;
    for (long long bc = 0; bc < static_cast<long long>(B) * C; ++bc) {
      double* dst = g.data() + bc * H * W;
      const double* src = self.grad.data() + bc * 4 * H * W;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const double* s = src + (2 * i) * (2 * W) + 2 * j;
          dst[i * W + j] += s[0] + s[1] + s[2 * W] + s[2 * W + 1];
        }
    }
  });
}

// 2x2 average pooling with stride 2; extents must be even.
inline Tensor avgpool2x2(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("avgpool2x2: expected rank-4, got " + shape_str(x.shape()));
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0)
    throw std::invalid_argument("avgpool2x2: extents must be even, got " + shape_str(x.shape()));
  const int Ho = H / 2, Wo = W / 2;
  std::vector<double> value(static_cast<size_t>(B) * C * Ho * Wo);
  const auto& xv = x.data();
  for (long long bc = 0; bc < static_cast<long long>(B) * C; ++bc) {
    const double* src = xv.data() + bc * H * W;
    double* dst = value.data() + bc * Ho * Wo;
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        const double* s = src + (2 * i) * W + 2 * j;
        dst[i * Wo + j] = 0.25 * (s[0] + s[1] + s[W] + s[W + 1]);
      }
  }
  Tensor tx = x;
  return make_op({B, C, Ho, Wo}, std::move(value), "avgpool2x2", {x}, [tx, B, C, H, W, Ho, Wo](TensorNode& self) {
    tx.node()->ensure_grad();
    auto& g = tx.node()->grad;
    for (long long bc = 0; bc < static_cast<long long>(B) * C; ++bc) {
      double* dst = g.data() + bc * H * W;
      const double* src = self.grad.data() + bc * Ho * Wo;
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          const double v = 0.25 * src[i * Wo + j];
          double* d = dst + (2 * i) * W + 2 * j;
          d[0] += v;
          d[1] += v;
          d[W] += v;
          d[W + 1] += v;
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax over the class/channel axis of [B,K,H,W]

inline Tensor softmax_channels(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("softmax_channels: expected rank-4, got " + shape_str(x.shape()));
  const int B = x.dim(0), K = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long long hw = static_cast<long long>(H) * W;
  std::vector<double> value(x.data().size());
  const auto& xv = x.data();
  for (int b = 0; b < B; ++b)
    for (long long s = 0; s < hw; ++s) {
      const long long base = static_cast<long long>(b) * K * hw + s;
      double m = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < K; ++c) m = std::max(m, xv[base + c * hw]);
      double z = 0.0;
      for (int c = 0; c < K; ++c) z += std::exp(xv[base + c * hw] - m);
      for (int c = 0; c < K; ++c) value[base + c * hw] = std::exp(xv[base + c * hw] - m) / z;
    }
  Tensor tx = x;
  return make_op(x.shape(), std::move(value), "softmax_channels", {x}, [tx, B, K, hw](TensorNode& self) {
    tx.node()->ensure_grad();
    auto& g = tx.node()->grad;
    // dx_c = y_c * (g_c - sum_k g_k y_k)
    for (int b = 0; b < B; ++b)
      for (long long s = 0; s < hw; ++s) {
        const long long base = static_cast<long long>(b) * K * hw + s;
        double dot = 0.0;
        for (int c = 0; c < K; ++c) dot += self.grad[base + c * hw] * self.value[base + c * hw];
        for (int c = 0; c < K; ++c)
          g[base + c * hw] += self.value[base + c * hw] * (self.grad[base + c * hw] - dot);
      }
  });
}

inline Tensor log_softmax_channels(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("log_softmax_channels: expected rank-4, got " + shape_str(x.shape()));
  const int B = x.dim(0), K = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long long hw = static_cast<long long>(H) * W;
  std::vector<double> value(x.data().size());
  const auto& xv = x.data();
  for (int b = 0; b < B; ++b)
    for (long long s = 0; s < hw; ++s) {
      const long long base = static_cast<long long>(b) * K * hw + s;
      double m = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < K; ++c) m = std::max(m, xv[base + c * hw]);
      double z = 0.0;
      for (int c = 0; c < K; ++c) z += std::exp(xv[base + c * hw] - m);
      const double lse = m + std::log(z);
      for (int c = 0; c < K; ++c) value[base + c * hw] = xv[base + c * hw] - lse;
    }
  Tensor tx = x;
  return make_op(x.shape(), std::move(value), "log_softmax_channels", {x}, [tx, B, K, hw](TensorNode& self) {
    tx.node()->ensure_grad();
    auto& g = tx.node()->grad;
    // dx_c = g_c - softmax_c * sum_k g_k
    for (int b = 0; b < B; ++b)
      for (long long s = 0; s < hw; ++s) {
        const long long base = static_cast<long long>(b) * K * hw + s;
        double gsum = 0.0;
        for (int c = 0; c < K; ++c) gsum += self.grad[base + c * hw];
        for (int c = 0; c < K; ++c)
          g[base + c * hw] += self.grad[base + c * hw] - std::exp(self.value[base + c * hw]) * gsum;
      }
  });
}

// Mean over the spatial axes: [B,C,H,W] -> [B,C].
inline Tensor spatial_mean(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("spatial_mean: expected rank-4, got " + shape_str(x.shape()));
  const int B = x.dim(0), C = x.dim(1);
  Tensor s = sum_axis(sum_axis(x, 3), 2);
  return scale(reshape(s, {B, C}), 1.0 / (static_cast<double>(x.dim(2)) * x.dim(3)));
}

// ---------------------------------------------------------------------------
// Named learnable tensor.

struct Parameter {
  Tensor value;
  bool learnable = true;
  std::string name;
};

// Flat registry of the parameters of one network; names must be unique.
class ParamStore {
 public:
  Parameter& add(const std::string& name, Tensor value, bool learnable = true) {
    for (const auto& p : items_)
      if (p->name == name) throw std::invalid_argument("ParamStore: duplicate parameter name " + name);
    value.set_requires_grad(learnable);
    items_.push_back(std::make_shared<Parameter>(Parameter{std::move(value), learnable, name}));
    return *items_.back();
  }

  const std::vector<std::shared_ptr<Parameter>>& items() const { return items_; }

  Parameter* find(const std::string& name) {
    for (auto& p : items_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : items_)
      if (p->learnable) p->value.zero_grad();
  }

 private:
  std::vector<std::shared_ptr<Parameter>> items_;
};

}  // namespace fftgan
