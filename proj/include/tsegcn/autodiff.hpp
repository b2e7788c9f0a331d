#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tsegcn/param_store.hpp"
#include "tsegcn/tensor.hpp"

namespace tsegcn::ag {

// Reverse-mode tape. Every operation records a node holding its forward
// value and a closure that pushes the node's cotangent into its parents.
// Nodes are replayed in reverse creation order, so a graph must be built by
// the thread that calls backward() on it. Forward values are immutable once
// created; gradient accumulation is the only mutation and happens inside
// backward().

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backprop;
  Tensor* external_grad = nullptr;  // parameter leaves accumulate here
  bool requires_grad = false;
  std::uint64_t order = 0;

  void ensure_grad() {
    if (grad.size() == 0) grad = Tensor(value.shape());
  }
};

inline std::uint64_t next_order() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : n_(std::move(n)) {}

  const Tensor& value() const { return n_->value; }
  const Shape& shape() const { return n_->value.shape(); }
  const NodePtr& node() const { return n_; }
  bool defined() const { return n_ != nullptr; }
  bool requires_grad() const { return n_->requires_grad; }

 private:
  NodePtr n_;
};

inline Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->order = next_order();
  return Var(n);
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

/// Scope guard that disables gradient recording (inference forwards skip
/// the backward closures entirely).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Leaf bound to a ParamStore entry; backward adds into the store's
/// gradient accumulator. Under NoGradGuard the leaf degrades to a constant.
inline Var param(ParamStore& ps, const std::string& name) {
  auto& e = ps.entry(name);
  auto n = std::make_shared<Node>();
  n->value = e.value;
  n->order = next_order();
  if (grad_mode_flag()) {
    n->requires_grad = true;
    n->external_grad = &e.grad;
    n->backprop = [](Node& self) {
      if (self.grad.size() != 0) *self.external_grad += self.grad;
    };
  }
  return Var(n);
}

inline Var make_node(Tensor value, std::vector<NodePtr> parents, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  n->order = next_order();
  if (n->requires_grad) n->backprop = std::move(backprop);
  return Var(n);
}

/// Propagate d(root)/d(leaf) for every reachable differentiable leaf.
/// root must be scalar (a 1-element tensor).
inline void backward(const Var& root) {
  if (root.value().size() != 1)
    throw DimensionError("backward: root must be scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  std::vector<Node*> nodes;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.node().get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    nodes.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(nodes.begin(), nodes.end(), [](const Node* a, const Node* b) { return a->order > b->order; });

  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0;
  for (Node* n : nodes) {
    if (!n->backprop) continue;
    n->ensure_grad();
    n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra primitives
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value()))
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  out += b.value();
  return make_node(std::move(out), {a.node(), b.node()}, [a = a.node(), b = b.node()](Node& self) {
    if (a->requires_grad) {
      a->ensure_grad();
      a->grad += self.grad;
    }
    if (b->requires_grad) {
      b->ensure_grad();
      b->grad += self.grad;
    }
  });
}

inline Var elem_mul(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value()))
    throw DimensionError("elem_mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_node(std::move(out), {a.node(), b.node()}, [a = a.node(), b = b.node()](Node& self) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += b->value[i] * self.grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) b->grad[i] += a->value[i] * self.grad[i];
    }
  });
}

inline Var add_const(const Var& a, double c) {
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c;
  return make_node(std::move(out), {a.node()}, [a = a.node()](Node& self) {
    a->ensure_grad();
    a->grad += self.grad;
  });
}

inline Var mul_const(const Var& a, double c) {
  Tensor out = a.value();
  out *= c;
  return make_node(std::move(out), {a.node()}, [a = a.node(), c](Node& self) {
    a->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += c * self.grad[i];
  });
}

/// s is a 1-element tensor; out = s * x elementwise.
inline Var scalar_mul(const Var& s, const Var& x) {
  if (s.value().size() != 1) throw DimensionError("scalar_mul: scale must have 1 element");
  const double sv = s.value()[0];
  Tensor out = x.value();
  out *= sv;
  return make_node(std::move(out), {s.node(), x.node()}, [s = s.node(), x = x.node(), sv](Node& self) {
    if (s->requires_grad) {
      s->ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * x->value[i];
      s->grad[0] += acc;
    }
    if (x->requires_grad) {
      x->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) x->grad[i] += sv * self.grad[i];
    }
  });
}

/// Elementwise product with a constant mask of the same shape. Entries where
/// the mask is zero receive exactly zero gradient.
inline Var mask_mul(const Var& x, const Tensor& mask) {
  if (!x.value().same_shape(mask))
    throw DimensionError("mask_mul: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(mask.shape()));
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_node(std::move(out), {x.node()}, [x = x.node(), mask](Node& self) {
    x->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) x->grad[i] += mask[i] * self.grad[i];
  });
}

inline double gelu_scalar(double v) {
  // Exact Gaussian-CDF form: v * Phi(v).
  return 0.5 * v * (1.0 + std::erf(v * 0.70710678118654752440));
}

inline double gelu_grad_scalar(double v) {
  const double phi = std::exp(-0.5 * v * v) * 0.39894228040143267794;  // pdf
  const double Phi = 0.5 * (1.0 + std::erf(v * 0.70710678118654752440));
  return Phi + v * phi;
}

inline Var gelu(const Var& x) {
  Tensor out(x.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_scalar(x.value()[i]);
  return make_node(std::move(out), {x.node()}, [x = x.node()](Node& self) {
    x->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      x->grad[i] += gelu_grad_scalar(x->value[i]) * self.grad[i];
  });
}

inline Var tanh_op(const Var& x) {
  Tensor out(x.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.value()[i]);
  return make_node(std::move(out), {x.node()}, [x = x.node()](Node& self) {
    x->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double t = self.value[i];
      x->grad[i] += (1.0 - t * t) * self.grad[i];
    }
  });
}

/// 2-D matrix product a[m,k] * b[k,n].
inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av.at(i, p);
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) += x * bv.at(p, j);
    }
  return make_node(std::move(out), {a.node(), b.node()}, [a = a.node(), b = b.node(), m, k, n](Node& self) {
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = self.grad.at(i, j);
          for (std::size_t p = 0; p < k; ++p) a->grad.at(i, p) += g * b->value.at(p, j);
        }
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = a->value.at(i, p);
          for (std::size_t j = 0; j < n; ++j) b->grad.at(p, j) += x * self.grad.at(i, j);
        }
    }
  });
}

/// Contract the last axis of x with w[c_in, c_out]; optional bias[c_out].
inline Var linear(const Var& x, const Var& w, const Var* bias = nullptr) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || xv.rank() < 1 || xv.shape().back() != wv.dim(0))
    throw DimensionError("linear: input " + shape_str(xv.shape()) + " does not match weight " + shape_str(wv.shape()));
  const std::size_t c_in = wv.dim(0), c_out = wv.dim(1);
  const std::size_t rows = xv.size() / c_in;
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != c_out))
    throw DimensionError("linear: bias shape " + shape_str(bias->value().shape()) + " does not match width " +
                         std::to_string(c_out));

  Shape out_shape = xv.shape();
  out_shape.back() = c_out;
  Tensor out(out_shape);
  const double* xd = xv.data();
  const double* wd = wv.data();
  double* od = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* orow = od + r * c_out;
    if (bias) {
      const double* bd = bias->value().data();
      for (std::size_t j = 0; j < c_out; ++j) orow[j] = bd[j];
    }
    const double* xrow = xd + r * c_in;
    for (std::size_t i = 0; i < c_in; ++i) {
      const double xi = xrow[i];
      if (xi == 0.0) continue;
      const double* wrow = wd + i * c_out;
      for (std::size_t j = 0; j < c_out; ++j) orow[j] += xi * wrow[j];
    }
  }

  std::vector<NodePtr> parents{x.node(), w.node()};
  NodePtr bn = bias ? bias->node() : nullptr;
  if (bn) parents.push_back(bn);
  return make_node(std::move(out), std::move(parents),
                   [x = x.node(), w = w.node(), bn, rows, c_in, c_out](Node& self) {
                     const double* gd = self.grad.data();
                     if (x->requires_grad) {
                       x->ensure_grad();
                       double* xg = x->grad.data();
                       const double* wd = w->value.data();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* grow = gd + r * c_out;
                         double* xgrow = xg + r * c_in;
                         for (std::size_t i = 0; i < c_in; ++i) {
                           const double* wrow = wd + i * c_out;
                           double acc = 0.0;
                           for (std::size_t j = 0; j < c_out; ++j) acc += grow[j] * wrow[j];
                           xgrow[i] += acc;
                         }
                       }
                     }
                     if (w->requires_grad) {
                       w->ensure_grad();
                       double* wg = w->grad.data();
                       const double* xd = x->value.data();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* grow = gd + r * c_out;
                         const double* xrow = xd + r * c_in;
                         for (std::size_t i = 0; i < c_in; ++i) {
                           const double xi = xrow[i];
                           if (xi == 0.0) continue;
                           double* wgrow = wg + i * c_out;
                           for (std::size_t j = 0; j < c_out; ++j) wgrow[j] += xi * grow[j];
                         }
                       }
                     }
                     if (bn && bn->requires_grad) {
                       bn->ensure_grad();
                       double* bg = bn->grad.data();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* grow = gd + r * c_out;
                         for (std::size_t j = 0; j < c_out; ++j) bg[j] += grow[j];
                       }
                     }
                   });
}

/// Slice [from, from+len) of the last axis.
inline Var slice_last(const Var& x, std::size_t from, std::size_t len) {
  const Tensor& xv = x.value();
  const std::size_t c = xv.shape().back();
  if (from + len > c)
    throw DimensionError("slice_last: [" + std::to_string(from) + ", " + std::to_string(from + len) +
                         ") out of range for width " + std::to_string(c));
  Shape out_shape = xv.shape();
  out_shape.back() = len;
  Tensor out(out_shape);
  const std::size_t rows = xv.size() / c;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = xv[r * c + from + j];
  return make_node(std::move(out), {x.node()}, [x = x.node(), from, len, c, rows](Node& self) {
    x->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < len; ++j) x->grad[r * c + from + j] += self.grad[r * len + j];
  });
}

/// Concatenate along the last axis.
inline Var concat_last(const std::vector<Var>& xs) {
  if (xs.empty()) throw DimensionError("concat_last: empty input list");
  Shape base = xs[0].shape();
  std::size_t total = 0;
  for (const Var& v : xs) {
    Shape s = v.shape();
    s.back() = 0;
    Shape b = base;
    b.back() = 0;
    if (s != b) throw DimensionError("concat_last: mismatched leading shapes");
    total += v.shape().back();
  }
  Shape out_shape = base;
  out_shape.back() = total;
  Tensor out(out_shape);
  const std::size_t rows = out.size() / total;
  std::vector<NodePtr> parents;
  std::vector<std::size_t> widths, offsets;
  std::size_t off = 0;
  for (const Var& v : xs) {
    parents.push_back(v.node());
    widths.push_back(v.shape().back());
    offsets.push_back(off);
    const Tensor& t = v.value();
    const std::size_t w = t.shape().back();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < w; ++j) out[r * total + off + j] = t[r * w + j];
    off += w;
  }
  return make_node(std::move(out), std::move(parents),
                   [widths, offsets, rows, total](Node& self) {
                     for (std::size_t k = 0; k < self.parents.size(); ++k) {
                       const NodePtr& p = self.parents[k];
                       if (!p->requires_grad) continue;
                       p->ensure_grad();
                       const std::size_t w = widths[k], o = offsets[k];
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < w; ++j) p->grad[r * w + j] += self.grad[r * total + o + j];
                     }
                   });
}

/// Mean over axis 2 of a rank-4 tensor: [B,N,T,C] -> [B,N,C].
inline Var temporal_mean(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("temporal_mean: expected rank-4 input, got " + shape_str(xv.shape()));
  const std::size_t B = xv.dim(0), N = xv.dim(1), T = xv.dim(2), C = xv.dim(3);
  Tensor out({B, N, C});
  const double inv = 1.0 / static_cast<double>(T);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c) out.at(b, n, c) += xv.at(b, n, t, c) * inv;
  return make_node(std::move(out), {x.node()}, [x = x.node(), B, N, T, C, inv](Node& self) {
    x->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t c = 0; c < C; ++c) x->grad.at(b, n, t, c) += self.grad.at(b, n, c) * inv;
  });
}

/// Mean over joints and frames: [B,N,T,C] -> [B,C].
inline Var global_avg_pool(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("global_avg_pool: expected rank-4 input, got " + shape_str(xv.shape()));
  const std::size_t B = xv.dim(0), N = xv.dim(1), T = xv.dim(2), C = xv.dim(3);
  Tensor out({B, C});
  const double inv = 1.0 / static_cast<double>(N * T);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c) out.at(b, c) += xv.at(b, n, t, c) * inv;
  return make_node(std::move(out), {x.node()}, [x = x.node(), B, N, T, C, inv](Node& self) {
    x->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t c = 0; c < C; ++c) x->grad.at(b, n, t, c) += self.grad.at(b, c) * inv;
  });
}

/// Sum of all elements (scalar output).
inline Var sum(const Var& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.value().size(); ++i) acc += x.value()[i];
  return make_node(Tensor::scalar(acc), {x.node()}, [x = x.node()](Node& self) {
    x->ensure_grad();
    const double g = self.grad[0];
    for (std::size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += g;
  });
}

}  // namespace tsegcn::ag
