#pragma once

// Tape-based reverse-mode automatic differentiation over Tensor values.
//
// Every op appends a node to the Tape that owns its operands; backward()
// walks the tape in reverse creation order, which is a valid topological
// order because a node can only reference nodes created before it.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "clan_forge/tensor.hpp"

namespace clan_forge {

enum class OpKind {
  leaf,
  constant,
  add,
  sub,
  mul,
  scale,
  reshape,
  matmul,
  conv2d,
  add_bias,
  leaky_relu,
  relu,
  sigmoid,
  softmax,
  log,
  sum,
  mean,
  upsample_nearest,
  flatten_concat,
  stop_gradient,
  cosine_similarity,
  weighted_sum,
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::reshape: return "reshape";
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::add_bias: return "add_bias";
    case OpKind::leaky_relu: return "leaky_relu";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::softmax: return "softmax";
    case OpKind::log: return "log";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::upsample_nearest: return "upsample_nearest";
    case OpKind::flatten_concat: return "flatten_concat";
    case OpKind::stop_gradient: return "stop_gradient";
    case OpKind::cosine_similarity: return "cosine_similarity";
    case OpKind::weighted_sum: return "weighted_sum";
  }
  return "unknown";
}

inline std::optional<OpKind> parse_op_kind(const std::string& name) {
  for (int k = 0; k <= static_cast<int>(OpKind::weighted_sum); ++k) {
    if (name == op_name(static_cast<OpKind>(k))) return static_cast<OpKind>(k);
  }
  return std::nullopt;
}

/// Lower clamp applied to every log argument.
inline constexpr double kLogFloor = 1e-12;
/// Vectors with a norm below this are degenerate for cosine similarity.
inline constexpr double kNormFloor = 1e-12;

class Tape;

class TapeNode {
 public:
  using BackwardFn = std::function<void(Tape&, const TapeNode&)>;

  Tensor value;
  Tensor grad;
  OpKind kind = OpKind::leaf;
  std::vector<std::size_t> parents;
  bool requires_grad = false;
  BackwardFn backward;
};

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const {
    if (!tape_) throw std::logic_error("Var: not bound to a tape");
    return *tape_;
  }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input (a parameter or an input being checked).
  Var leaf(Tensor value, bool requires_grad = true) {
    TapeNode n;
    n.value = std::move(value);
    n.kind = requires_grad ? OpKind::leaf : OpKind::constant;
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(OpKind kind, Tensor value, std::vector<std::size_t> parents,
             TapeNode::BackwardFn backward) {
    TapeNode n;
    n.value = std::move(value);
    n.kind = kind;
    for (std::size_t p : parents) n.requires_grad = n.requires_grad || nodes_.at(p).requires_grad;
    n.parents = std::move(parents);
    // A node without a backward rule is a gradient barrier.
    if (!backward) n.requires_grad = false;
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  const TapeNode& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of a node, valid after backward().
  Tensor& grad_of(std::size_t id) { return nodes_[id].grad; }

  /// Reverse pass from a scalar root. Calling it twice without reset_grads()
  /// is an error because gradients would silently double.
  void backward(const Var& root) {
    if (&root.tape() != this) throw std::invalid_argument("backward: root belongs to another tape");
    if (backward_done_) {
      throw std::logic_error("backward: already run on this tape; call reset_grads() first");
    }
    const TapeNode& r = nodes_.at(root.id());
    if (r.value.size() != 1) {
      throw ShapeError("backward", "root must be scalar, got " + shape_string(r.value.shape()));
    }
    for (TapeNode& n : nodes_) n.grad = Tensor(n.value.shape(), 0.0);
    nodes_[root.id()].grad[0] = 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      TapeNode& n = nodes_[i];
      if (!(n.requires_grad && n.backward)) continue;
      const bool flip = fault_ && *fault_ == n.kind;
      if (flip) negate(n.grad);
      n.backward(*this, n);
      if (flip) negate(n.grad);
    }
    backward_done_ = true;
  }

  void reset_grads() {
    for (TapeNode& n : nodes_) n.grad = Tensor();
    backward_done_ = false;
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Test hook: every node of `kind` propagates a sign-flipped gradient.
  void inject_sign_fault(std::optional<OpKind> kind) { fault_ = kind; }

 private:
  static void negate(Tensor& t) {
    for (double& v : t.data()) v = -v;
  }

  Var push(TapeNode n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<TapeNode> nodes_;
  bool backward_done_ = false;
  std::optional<OpKind> fault_;
};

inline const Tensor& Var::value() const { return tape().node(id_).value; }
inline const Tensor& Var::grad() const { return tape().node(id_).grad; }
inline bool Var::requires_grad() const { return tape().node(id_).requires_grad; }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline Tape& same_tape(const char* op, const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  return a.tape();
}

/// Accumulate `scale * g` into the gradient of node `id` if it needs one.
inline void accumulate(Tape& tape, std::size_t id, std::span<const double> g, double scale = 1.0) {
  if (!tape.needs_grad(id)) return;
  auto dst = tape.grad_of(id).data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * g[i];
}

template <typename F>
Var unary(OpKind kind, const Var& x, F&& fwd, std::function<double(double x, double y)> dydx) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = fwd(xv[i]);
  return x.tape().record(kind, std::move(y), {x.id()},
                         [dydx = std::move(dydx)](Tape& tape, const TapeNode& self) {
                           const std::size_t p = self.parents[0];
                           if (!tape.needs_grad(p)) return;
                           const Tensor& xv = tape.node(p).value;
                           auto gx = tape.grad_of(p).data();
                           for (std::size_t i = 0; i < gx.size(); ++i) {
                             gx[i] += self.grad[i] * dydx(xv[i], self.value[i]);
                           }
                         });
}

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, stride, pad, ho, wo;
  std::size_t k() const { return c * kh * kw; }
  std::size_t p() const { return ho * wo; }
};

inline void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t P = g.p();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((ch * g.kh + ki) * g.kw + kj) * P;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                ix < static_cast<long>(g.w);
            row[oy * g.wo + ox] =
                inside ? x[(ch * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* cols, const ConvGeometry& g, double* x) {
  const std::size_t P = g.p();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((ch * g.kh + ki) * g.kw + kj) * P;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            x[(ch * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape("add", a, b);
  require_same_shape("add", a.value(), b.value());
  Tensor y = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return tape.record(OpKind::add, std::move(y), {a.id(), b.id()}, [](Tape& t, const TapeNode& self) {
    detail::accumulate(t, self.parents[0], self.grad.data());
    detail::accumulate(t, self.parents[1], self.grad.data());
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape("sub", a, b);
  require_same_shape("sub", a.value(), b.value());
  Tensor y = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return tape.record(OpKind::sub, std::move(y), {a.id(), b.id()}, [](Tape& t, const TapeNode& self) {
    detail::accumulate(t, self.parents[0], self.grad.data());
    detail::accumulate(t, self.parents[1], self.grad.data(), -1.0);
  });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape("mul", a, b);
  require_same_shape("mul", a.value(), b.value());
  Tensor y = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return tape.record(OpKind::mul, std::move(y), {a.id(), b.id()}, [](Tape& t, const TapeNode& self) {
    const std::size_t pa = self.parents[0];
    const std::size_t pb = self.parents[1];
    if (t.needs_grad(pa)) {
      const auto bv = t.node(pb).value.data();
      auto ga = t.grad_of(pa).data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bv[i];
    }
    if (t.needs_grad(pb)) {
      const auto av = t.node(pa).value.data();
      auto gb = t.grad_of(pb).data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * av[i];
    }
  });
}

inline Var scale(const Var& x, double k) {
  Tensor y = x.value();
  for (double& v : y.data()) v *= k;
  return x.tape().record(OpKind::scale, std::move(y), {x.id()}, [k](Tape& t, const TapeNode& self) {
    detail::accumulate(t, self.parents[0], self.grad.data(), k);
  });
}

inline Var reshape(const Var& x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return x.tape().record(OpKind::reshape, std::move(y), {x.id()}, [](Tape& t, const TapeNode& self) {
    detail::accumulate(t, self.parents[0], self.grad.data());
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape("matmul", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul", av.shape(), bv.shape());
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor y({m, n});
  detail::MapMat(y.data().data(), m, n).noalias() =
      detail::CMapMat(av.data().data(), m, k) * detail::CMapMat(bv.data().data(), k, n);
  return tape.record(OpKind::matmul, std::move(y), {a.id(), b.id()},
                     [m, k, n](Tape& t, const TapeNode& self) {
                       const std::size_t pa = self.parents[0], pb = self.parents[1];
                       detail::CMapMat g(self.grad.data().data(), m, n);
                       if (t.needs_grad(pa)) {
                         detail::MapMat ga(t.grad_of(pa).data().data(), m, k);
                         ga.noalias() += g * detail::CMapMat(t.node(pb).value.data().data(), k, n).transpose();
                       }
                       if (t.needs_grad(pb)) {
                         detail::MapMat gb(t.grad_of(pb).data().data(), k, n);
                         gb.noalias() += detail::CMapMat(t.node(pa).value.data().data(), m, k).transpose() * g;
                       }
                     });
}

/// 2-D convolution (cross-correlation) of an N×C×H×W input with an
/// O×C×kh×kw kernel. Output is N×O×Ho×Wo with Ho = (H + 2p − kh)/s + 1.
inline Var conv2d(const Var& input, const Var& kernel, std::size_t stride, std::size_t padding) {
  Tape& tape = detail::same_tape("conv2d", input, kernel);
  const Tensor& x = input.value();
  const Tensor& w = kernel.value();
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) {
    throw ShapeError("conv2d", x.shape(), w.shape());
  }
  if (stride == 0) throw ShapeError("conv2d", "stride must be positive");
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3),
                         stride, padding, 0, 0};
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) {
    throw ShapeError("conv2d", "input " + shape_string(x.shape()) + " smaller than kernel " +
                                   shape_string(w.shape()));
  }
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;
  const std::size_t K = g.k(), P = g.p();

  Tensor y({g.n, g.o, g.ho, g.wo});
  std::vector<double> cols(K * P);
  detail::CMapMat wm(w.data().data(), g.o, K);
  for (std::size_t b = 0; b < g.n; ++b) {
    detail::im2col(x.data().data() + b * g.c * g.h * g.w, g, cols.data());
    detail::MapMat(y.data().data() + b * g.o * P, g.o, P).noalias() =
        wm * detail::CMapMat(cols.data(), K, P);
  }
  return tape.record(OpKind::conv2d, std::move(y), {input.id(), kernel.id()},
                     [g](Tape& t, const TapeNode& self) {
                       const std::size_t px = self.parents[0], pw = self.parents[1];
                       const std::size_t K = g.k(), P = g.p();
                       const Tensor& x = t.node(px).value;
                       const Tensor& w = t.node(pw).value;
                       const bool need_x = t.needs_grad(px), need_w = t.needs_grad(pw);
                       std::vector<double> cols(K * P);
                       detail::CMapMat wm(w.data().data(), g.o, K);
                       for (std::size_t b = 0; b < g.n; ++b) {
                         detail::CMapMat gy(self.grad.data().data() + b * g.o * P, g.o, P);
                         if (need_w) {
                           detail::im2col(x.data().data() + b * g.c * g.h * g.w, g, cols.data());
                           detail::MapMat(t.grad_of(pw).data().data(), g.o, K).noalias() +=
                               gy * detail::CMapMat(cols.data(), K, P).transpose();
                         }
                         if (need_x) {
                           detail::MapMat(cols.data(), K, P).noalias() = wm.transpose() * gy;
                           detail::col2im_add(cols.data(), g,
                                              t.grad_of(px).data().data() + b * g.c * g.h * g.w);
                         }
                       }
                     });
}

/// Adds a per-channel bias (length C) to an N×C×... tensor.
inline Var add_bias(const Var& x, const Var& bias) {
  Tape& tape = detail::same_tape("add_bias", x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (xv.rank() < 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    throw ShapeError("add_bias", xv.shape(), bv.shape());
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1), inner = xv.size() / (n * c);
  Tensor y = xv;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < inner; ++i) y[(b * c + ch) * inner + i] += bv[ch];
  return tape.record(OpKind::add_bias, std::move(y), {x.id(), bias.id()},
                     [n, c, inner](Tape& t, const TapeNode& self) {
                       detail::accumulate(t, self.parents[0], self.grad.data());
                       if (!t.needs_grad(self.parents[1])) return;
                       auto gb = t.grad_of(self.parents[1]).data();
                       for (std::size_t b = 0; b < n; ++b)
                         for (std::size_t ch = 0; ch < c; ++ch)
                           for (std::size_t i = 0; i < inner; ++i) gb[ch] += self.grad[(b * c + ch) * inner + i];
                     });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Var leaky_relu(const Var& x, double alpha) {
  return detail::unary(
      OpKind::leaky_relu, x, [alpha](double v) { return v > 0.0 ? v : alpha * v; },
      [alpha](double v, double) { return v > 0.0 ? 1.0 : alpha; });
}

inline Var relu(const Var& x) {
  return detail::unary(
      OpKind::relu, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& x) {
  return detail::unary(
      OpKind::sigmoid, x, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

/// Natural log with the argument clamped below at kLogFloor; the clamped
/// region has zero derivative.
inline Var log(const Var& x) {
  return detail::unary(
      OpKind::log, x, [](double v) { return std::log(std::max(v, kLogFloor)); },
      [](double v, double) { return v > kLogFloor ? 1.0 / v : 0.0; });
}

/// Softmax along `axis`.
inline Var softmax(const Var& x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) throw ShapeError("softmax", "axis " + std::to_string(axis) + " out of range for " + shape_string(xv.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
  const std::size_t c = xv.dim(axis);
  Tensor y(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * c * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, xv[base + k * inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double e = std::exp(xv[base + k * inner] - mx);
        y[base + k * inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < c; ++k) y[base + k * inner] /= s;
    }
  }
  return x.tape().record(OpKind::softmax, std::move(y), {x.id()},
                         [outer, inner, c](Tape& t, const TapeNode& self) {
                           const std::size_t p = self.parents[0];
                           if (!t.needs_grad(p)) return;
                           auto gx = t.grad_of(p).data();
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t i = 0; i < inner; ++i) {
                               const std::size_t base = o * c * inner + i;
                               double s = 0.0;
                               for (std::size_t k = 0; k < c; ++k)
                                 s += self.grad[base + k * inner] * self.value[base + k * inner];
                               for (std::size_t k = 0; k < c; ++k) {
                                 const std::size_t j = base + k * inner;
                                 gx[j] += self.value[j] * (self.grad[j] - s);
                               }
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().record(OpKind::sum, Tensor::scalar(s), {x.id()}, [](Tape& t, const TapeNode& self) {
    const std::size_t p = self.parents[0];
    if (!t.needs_grad(p)) return;
    const double g = self.grad[0];
    for (double& v : t.grad_of(p).data()) v += g;
  });
}

/// Σ x_i·w_i for a fixed weight tensor of the same size.
inline Var weighted_sum(const Var& x, const Tensor& w) {
  if (w.size() != x.value().size()) throw ShapeError("weighted_sum", x.value().shape(), w.shape());
  const double s = dot(x.value().data(), w.data());
  return x.tape().record(OpKind::weighted_sum, Tensor::scalar(s), {x.id()}, [w](Tape& t, const TapeNode& self) {
    const std::size_t p = self.parents[0];
    if (!t.needs_grad(p)) return;
    const double g = self.grad[0];
    auto gx = t.grad_of(p).data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * w[i];
  });
}

inline Var mean(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const double n = static_cast<double>(x.value().size());
  return x.tape().record(OpKind::mean, Tensor::scalar(s / n), {x.id()}, [n](Tape& t, const TapeNode& self) {
    const std::size_t p = self.parents[0];
    if (!t.needs_grad(p)) return;
    const double g = self.grad[0] / n;
    for (double& v : t.grad_of(p).data()) v += g;
  });
}

/// Nearest-neighbour upsampling of the last two axes by an integer factor.
inline Var upsample_nearest(const Var& x, std::size_t factor) {
  const Tensor& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("upsample_nearest", "needs rank >= 2, got " + shape_string(xv.shape()));
  if (factor == 0) throw ShapeError("upsample_nearest", "factor must be positive");
  const std::size_t h = xv.dim(xv.rank() - 2), w = xv.dim(xv.rank() - 1);
  const std::size_t planes = xv.size() / (h * w);
  Shape out_shape = xv.shape();
  out_shape[out_shape.size() - 2] = h * factor;
  out_shape[out_shape.size() - 1] = w * factor;
  Tensor y(out_shape);
  const std::size_t H = h * factor, W = w * factor;
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) y[(pl * H + i) * W + j] = xv[(pl * h + i / factor) * w + j / factor];
  return x.tape().record(OpKind::upsample_nearest, std::move(y), {x.id()},
                         [planes, h, w, factor](Tape& t, const TapeNode& self) {
                           const std::size_t p = self.parents[0];
                           if (!t.needs_grad(p)) return;
                           auto gx = t.grad_of(p).data();
                           const std::size_t H = h * factor, W = w * factor;
                           for (std::size_t pl = 0; pl < planes; ++pl)
                             for (std::size_t i = 0; i < H; ++i)
                               for (std::size_t j = 0; j < W; ++j)
                                 gx[(pl * h + i / factor) * w + j / factor] += self.grad[(pl * H + i) * W + j];
                         });
}

/// Flattens every input and concatenates them into one vector.
inline Var flatten_concat(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("flatten_concat", "empty input list");
  Tape& tape = xs.front().tape();
  std::vector<double> out;
  std::vector<std::size_t> parents;
  for (const Var& v : xs) {
    detail::same_tape("flatten_concat", xs.front(), v);
    const auto d = v.value().data();
    out.insert(out.end(), d.begin(), d.end());
    parents.push_back(v.id());
  }
  return tape.record(OpKind::flatten_concat, Tensor::vector(std::move(out)), std::move(parents),
                     [](Tape& t, const TapeNode& self) {
                       std::size_t offset = 0;
                       for (std::size_t p : self.parents) {
                         const std::size_t n = t.node(p).value.size();
                         detail::accumulate(t, p, self.grad.data().subspan(offset, n));
                         offset += n;
                       }
                     });
}

/// Identity in the forward pass; contributes no gradient to its input.
inline Var stop_gradient(const Var& x) {
  return x.tape().record(OpKind::stop_gradient, x.value(), {x.id()}, nullptr);
}

// ---------------------------------------------------------------------------
// Cosine similarity

struct CosineValue {
  double value = 0.0;
  bool degenerate = false;
};

inline CosineValue cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine_similarity", Shape{a.size()}, Shape{b.size()});
  }
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na < kNormFloor || nb < kNormFloor) return {0.0, true};
  return {std::clamp(dot(a, b) / (na * nb), -1.0, 1.0), false};
}

struct CosineVar {
  Var similarity;
  bool degenerate = false;
};

/// Cosine similarity of two equally sized tensors (flattened). A degenerate
/// input (norm below kNormFloor) yields 0 with zero gradient.
inline CosineVar cosine_similarity(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape("cosine_similarity", a, b);
  if (a.value().size() != b.value().size()) {
    throw ShapeError("cosine_similarity", a.value().shape(), b.value().shape());
  }
  const auto av = a.value().data();
  const auto bv = b.value().data();
  const double na = l2_norm(av), nb = l2_norm(bv);
  const bool degenerate = na < kNormFloor || nb < kNormFloor;
  const double ab = dot(av, bv);
  const double cosv = degenerate ? 0.0 : std::clamp(ab / (na * nb), -1.0, 1.0);
  Var out = tape.record(OpKind::cosine_similarity, Tensor::scalar(cosv), {a.id(), b.id()},
                        [degenerate, na, nb, cosv](Tape& t, const TapeNode& self) {
                          if (degenerate) return;
                          const std::size_t pa = self.parents[0], pb = self.parents[1];
                          const auto av = t.node(pa).value.data();
                          const auto bv = t.node(pb).value.data();
                          const double g = self.grad[0];
                          // d cos / da = b/(|a||b|) - cos * a/|a|^2
                          if (t.needs_grad(pa)) {
                            auto ga = t.grad_of(pa).data();
                            for (std::size_t i = 0; i < ga.size(); ++i)
                              ga[i] += g * (bv[i] / (na * nb) - cosv * av[i] / (na * na));
                          }
                          if (t.needs_grad(pb)) {
                            auto gb = t.grad_of(pb).data();
                            for (std::size_t i = 0; i < gb.size(); ++i)
                              gb[i] += g * (av[i] / (na * nb) - cosv * bv[i] / (nb * nb));
                          }
                        });
  return {out, degenerate};
}

}  // namespace clan_forge
