#pragma once

// Dense tensors with reverse-mode automatic differentiation over the
// operation set the models need: matmul, layernorm, softmax, GELU,
// elementwise arithmetic, reductions, row/column slicing and gathering,
// l2 normalization, stop-gradient and straight-through rerouting.
//
// Tensors are immutable values once created; a forward pass builds a fresh
// graph whose leaves are the persistent Parameter tensors. backward() may
// only be called on scalar roots and accumulates into leaf gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "vqmim/common.hpp"
#include "vqmim/rng.hpp"

namespace vqmim {

template <typename T>
struct TensorNode {
  std::vector<int64_t> shape;
  std::shared_ptr<std::vector<T>> values;
  std::vector<T> grad;  // sized lazily on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  int64_t numel() const { return static_cast<int64_t>(values->size()); }
  T* grad_data() {
    if (grad.empty()) grad.assign(values->size(), T{});
    return grad.data();
  }
};

namespace detail {

inline int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative dimension");
    n *= d;
  }
  return n;
}

template <typename T>
std::shared_ptr<TensorNode<T>> alloc_node(std::vector<int64_t> shape) {
  auto n = std::make_shared<TensorNode<T>>();
  int64_t count = shape_numel(shape);
  n->shape = std::move(shape);
  n->values = std::make_shared<std::vector<T>>(static_cast<size_t>(count), T{});
  return n;
}

// C(n x m) = A(n x k) * B(k x m); accumulate into C when acc
template <typename T>
void mm_nn(const T* a, const T* b, T* c, int64_t n, int64_t k, int64_t m, bool acc) {
  if (!acc) std::fill(c, c + n * m, T{});
  for (int64_t i = 0; i < n; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * m;
    for (int64_t p = 0; p < k; ++p) {
      T av = arow[p];
      if (av == T{}) continue;
      const T* brow = b + p * m;
      for (int64_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(n x m) = A(n x k) * B(m x k)^T
template <typename T>
void mm_nt(const T* a, const T* b, T* c, int64_t n, int64_t k, int64_t m, bool acc) {
  for (int64_t i = 0; i < n; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * m;
    for (int64_t j = 0; j < m; ++j) {
      const T* brow = b + j * k;
      T s{};
      for (int64_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] = acc ? crow[j] + s : s;
    }
  }
}

// C(n x m) = A(k x n)^T * B(k x m)
template <typename T>
void mm_tn(const T* a, const T* b, T* c, int64_t n, int64_t k, int64_t m, bool acc) {
  if (!acc) std::fill(c, c + n * m, T{});
  for (int64_t p = 0; p < k; ++p) {
    const T* arow = a + p * n;
    const T* brow = b + p * m;
    for (int64_t i = 0; i < n; ++i) {
      T av = arow[i];
      if (av == T{}) continue;
      T* crow = c + i * m;
      for (int64_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : n_(std::move(n)) {}

  static Tensor zeros(std::vector<int64_t> shape) {
    return Tensor(detail::alloc_node<T>(std::move(shape)));
  }

  static Tensor full(std::vector<int64_t> shape, T v) {
    auto n = detail::alloc_node<T>(std::move(shape));
    std::fill(n->values->begin(), n->values->end(), v);
    return Tensor(n);
  }

  static Tensor from_values(std::vector<T> vals, std::vector<int64_t> shape,
                            bool requires_grad = false) {
    if (detail::shape_numel(shape) != static_cast<int64_t>(vals.size()))
      throw ShapeError("from_values: shape does not match value count");
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->values = std::make_shared<std::vector<T>>(std::move(vals));
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor scalar(T v) { return from_values({v}, {1}); }

  bool defined() const { return n_ != nullptr; }
  const std::vector<int64_t>& shape() const { return n_->shape; }
  int64_t rank() const { return static_cast<int64_t>(n_->shape.size()); }
  int64_t dim(int64_t i) const { return n_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return n_->numel(); }
  int64_t rows() const { return rank() == 2 ? dim(0) : numel(); }
  int64_t cols() const { return rank() == 2 ? dim(1) : 1; }

  const std::vector<T>& values() const { return *n_->values; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor");
    return (*n_->values)[0];
  }
  T at(int64_t r, int64_t c) const { return (*n_->values)[static_cast<size_t>(r * cols() + c)]; }

  // Leaf-only in-place access, for parameter initialization and optimizer
  // updates between training steps.
  std::vector<T>& leaf_values() {
    if (!n_->parents.empty()) throw ShapeError("leaf_values() on a non-leaf tensor");
    return *n_->values;
  }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) {
    if (!n_->parents.empty()) throw ShapeError("set_requires_grad on a non-leaf tensor");
    n_->requires_grad = rg;
  }

  const std::vector<T>& grad() const {
    if (n_->grad.empty()) n_->grad.assign(n_->values->size(), T{});
    return n_->grad;
  }
  void zero_grad() { std::fill(n_->grad.begin(), n_->grad.end(), T{}); }

  void backward() {
    if (numel() != 1) throw ShapeError("backward() requires a scalar root");
    if (!n_->requires_grad) return;
    // iterative post-order topo sort
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        TensorNode<T>* p = node->parents[idx++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    n_->grad_data()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode<T>* node = *it;
      if (node->backprop) node->backprop(*node);
    }
  }

  std::shared_ptr<TensorNode<T>> node() const { return n_; }

 private:
  std::shared_ptr<TensorNode<T>> n_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.values())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

namespace detail {

template <typename T, typename F>
Tensor<T> finish_op(std::shared_ptr<TensorNode<T>> out, std::initializer_list<Tensor<T>> parents,
                    F&& back) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.node()->requires_grad;
  if (rg) {
    out->requires_grad = true;
    out->parents.reserve(parents.size());
    for (const auto& p : parents) out->parents.push_back(p.node());
    out->backprop = std::forward<F>(back);
  }
  return Tensor<T>(out);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) throw ShapeError(std::string(what) + ": shape mismatch");
}

template <typename T>
void require_rank2(const Tensor<T>& t, const char* what) {
  if (t.rank() != 2) throw ShapeError(std::string(what) + ": rank-2 tensor required");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  auto out = detail::alloc_node<T>(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = *out->values;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  return detail::finish_op(out, {a, b}, [](TensorNode<T>& n) {
    const T* g = n.grad.data();
    for (int k = 0; k < 2; ++k) {
      auto& p = *n.parents[static_cast<size_t>(k)];
      if (!p.requires_grad) continue;
      T* pg = p.grad_data();
      for (int64_t i = 0; i < n.numel(); ++i) pg[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  auto out = detail::alloc_node<T>(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = *out->values;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  return detail::finish_op(out, {a, b}, [](TensorNode<T>& n) {
    const T* g = n.grad.data();
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      T* pg = pa.grad_data();
      for (int64_t i = 0; i < n.numel(); ++i) pg[i] += g[i];
    }
    if (pb.requires_grad) {
      T* pg = pb.grad_data();
      for (int64_t i = 0; i < n.numel(); ++i) pg[i] -= g[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  auto out = detail::alloc_node<T>(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = *out->values;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  return detail::finish_op(out, {a, b}, [](TensorNode<T>& n) {
    const T* g = n.grad.data();
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    const T* av = pa.values->data();
    const T* bv = pb.values->data();
    if (pa.requires_grad) {
      T* pg = pa.grad_data();
      for (int64_t i = 0; i < n.numel(); ++i) pg[i] += g[i] * bv[i];
    }
    if (pb.requires_grad) {
      T* pg = pb.grad_data();
      for (int64_t i = 0; i < n.numel(); ++i) pg[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Tensor<T> ewdiv(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "ewdiv");
  auto out = detail::alloc_node<T>(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = *out->values;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
  return detail::finish_op(out, {a, b}, [](TensorNode<T>& n) {
    const T* g = n.grad.data();
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    const T* av = pa.values->data();
    const T* bv = pb.values->data();
    if (pa.requires_grad) {
      T* pg = pa.grad_data();
      for (int64_t i = 0; i < n.numel(); ++i) pg[i] += g[i] / bv[i];
    }
    if (pb.requires_grad) {
      T* pg = pb.grad_data();
      for (int64_t i = 0; i < n.numel(); ++i) pg[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  auto out = detail::alloc_node<T>(a.shape());
  const auto& av = a.values();
  auto& ov = *out->values;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + s;
  return detail::finish_op(out, {a}, [](TensorNode<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    const T* g = n.grad.data();
    T* pg = p.grad_data();
    for (int64_t i = 0; i < n.numel(); ++i) pg[i] += g[i];
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  auto out = detail::alloc_node<T>(a.shape());
  const auto& av = a.values();
  auto& ov = *out->values;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
  return detail::finish_op(out, {a}, [s](TensorNode<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    const T* g = n.grad.data();
    T* pg = p.grad_data();
    for (int64_t i = 0; i < n.numel(); ++i) pg[i] += g[i] * s;
  });
}

template <typename T>
Tensor<T> sqrt_ew(const Tensor<T>& a) {
  auto out = detail::alloc_node<T>(a.shape());
  const auto& av = a.values();
  auto& ov = *out->values;
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::sqrt(av[i]);
  return detail::finish_op(out, {a}, [](TensorNode<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    const T* g = n.grad.data();
    const T* y = n.values->data();
    T* pg = p.grad_data();
    for (int64_t i = 0; i < n.numel(); ++i) pg[i] += g[i] * (T{0.5} / y[i]);
  });
}

// ---------------------------------------------------------------------------
// matrix products

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  if (a.dim(1) != b.dim(0)) throw ShapeError("matmul: inner dimensions differ");
  int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  auto out = detail::alloc_node<T>({n, m});
  detail::mm_nn(a.values().data(), b.values().data(), out->values->data(), n, k, m, false);
  return detail::finish_op(out, {a, b}, [n, k, m](TensorNode<T>& node) {
    auto& pa = *node.parents[0];
    auto& pb = *node.parents[1];
    const T* g = node.grad.data();
    if (pa.requires_grad) detail::mm_nt(g, pb.values->data(), pa.grad_data(), n, m, k, true);
    if (pb.requires_grad) detail::mm_tn(pa.values->data(), g, pb.grad_data(), k, n, m, true);
  });
}

// a (n x k) times b (m x k) transposed -> (n x m)
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a, "matmul_nt");
  detail::require_rank2(b, "matmul_nt");
  if (a.dim(1) != b.dim(1)) throw ShapeError("matmul_nt: inner dimensions differ");
  int64_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
  auto out = detail::alloc_node<T>({n, m});
  detail::mm_nt(a.values().data(), b.values().data(), out->values->data(), n, k, m, false);
  return detail::finish_op(out, {a, b}, [n, k, m](TensorNode<T>& node) {
    auto& pa = *node.parents[0];
    auto& pb = *node.parents[1];
    const T* g = node.grad.data();  // n x m
    if (pa.requires_grad) detail::mm_nn(g, pb.values->data(), pa.grad_data(), n, m, k, true);
    if (pb.requires_grad) detail::mm_tn(g, pa.values->data(), pb.grad_data(), m, n, k, true);
  });
}

// x (n x in), w (out x in), b (out) -> x w^T + b
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank2(x, "linear");
  detail::require_rank2(w, "linear");
  if (x.dim(1) != w.dim(1)) throw ShapeError("linear: input dim does not match weight");
  if (b.numel() != w.dim(0)) throw ShapeError("linear: bias dim does not match weight");
  int64_t n = x.dim(0), in = x.dim(1), outd = w.dim(0);
  auto out = detail::alloc_node<T>({n, outd});
  detail::mm_nt(x.values().data(), w.values().data(), out->values->data(), n, in, outd, false);
  {
    auto& ov = *out->values;
    const auto& bv = b.values();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < outd; ++j) ov[static_cast<size_t>(i * outd + j)] += bv[static_cast<size_t>(j)];
  }
  return detail::finish_op(out, {x, w, b}, [n, in, outd](TensorNode<T>& node) {
    auto& px = *node.parents[0];
    auto& pw = *node.parents[1];
    auto& pb = *node.parents[2];
    const T* g = node.grad.data();  // n x out
    if (px.requires_grad) detail::mm_nn(g, pw.values->data(), px.grad_data(), n, outd, in, true);
    if (pw.requires_grad) detail::mm_tn(g, px.values->data(), pw.grad_data(), outd, n, in, true);
    if (pb.requires_grad) {
      T* bg = pb.grad_data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < outd; ++j) bg[j] += g[i * outd + j];
    }
  });
}

template <typename T>
Tensor<T> linear_nobias(const Tensor<T>& x, const Tensor<T>& w) {
  return matmul_nt(x, w);
}

// ---------------------------------------------------------------------------
// normalization and activations

template <typename T>
Tensor<T> layernorm_rows(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                         T eps = T{1e-5}) {
  detail::require_rank2(x, "layernorm_rows");
  int64_t n = x.dim(0), d = x.dim(1);
  if (gain.numel() != d || bias.numel() != d) throw ShapeError("layernorm_rows: affine dim mismatch");
  auto out = detail::alloc_node<T>(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(n * d));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  auto& ov = *out->values;
  for (int64_t i = 0; i < n; ++i) {
    const T* row = xv.data() + i * d;
    T mean{};
    for (int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var{};
    for (int64_t j = 0; j < d; ++j) {
      T c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    T is = T{1} / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = is;
    for (int64_t j = 0; j < d; ++j) {
      T xh = (row[j] - mean) * is;
      (*xhat)[static_cast<size_t>(i * d + j)] = xh;
      ov[static_cast<size_t>(i * d + j)] = gv[static_cast<size_t>(j)] * xh + bv[static_cast<size_t>(j)];
    }
  }
  return detail::finish_op(out, {x, gain, bias}, [n, d, xhat, inv_std](TensorNode<T>& node) {
    auto& px = *node.parents[0];
    auto& pg = *node.parents[1];
    auto& pbias = *node.parents[2];
    const T* g = node.grad.data();
    const T* gv = pg.values->data();
    for (int64_t i = 0; i < n; ++i) {
      const T* grow = g + i * d;
      const T* xh = xhat->data() + i * d;
      if (px.requires_grad) {
        T* xg = px.grad_data() + i * d;
        T s1{}, s2{};
        for (int64_t j = 0; j < d; ++j) {
          T dxh = grow[j] * gv[j];
          s1 += dxh;
          s2 += dxh * xh[j];
        }
        T is = (*inv_std)[static_cast<size_t>(i)];
        T inv_d = T{1} / static_cast<T>(d);
        for (int64_t j = 0; j < d; ++j) {
          T dxh = grow[j] * gv[j];
          xg[j] += (dxh - s1 * inv_d - xh[j] * s2 * inv_d) * is;
        }
      }
      if (pg.requires_grad) {
        T* gg = pg.grad_data();
        for (int64_t j = 0; j < d; ++j) gg[j] += grow[j] * xh[j];
      }
      if (pbias.requires_grad) {
        T* bg = pbias.grad_data();
        for (int64_t j = 0; j < d; ++j) bg[j] += grow[j];
      }
    }
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  detail::require_rank2(x, "softmax_rows");
  int64_t n = x.dim(0), d = x.dim(1);
  auto out = detail::alloc_node<T>(x.shape());
  const auto& xv = x.values();
  auto& ov = *out->values;
  for (int64_t i = 0; i < n; ++i) {
    const T* row = xv.data() + i * d;
    T* orow = ov.data() + i * d;
    T mx = row[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    T sum{};
    for (int64_t j = 0; j < d; ++j) {
      T e = std::exp(row[j] - mx);
      orow[j] = e;
      sum += e;
    }
    T inv = T{1} / sum;
    for (int64_t j = 0; j < d; ++j) orow[j] *= inv;
  }
  return detail::finish_op(out, {x}, [n, d](TensorNode<T>& node) {
    auto& px = *node.parents[0];
    if (!px.requires_grad) return;
    const T* g = node.grad.data();
    const T* y = node.values->data();
    T* xg = px.grad_data();
    for (int64_t i = 0; i < n; ++i) {
      const T* grow = g + i * d;
      const T* yrow = y + i * d;
      T dot{};
      for (int64_t j = 0; j < d; ++j) dot += grow[j] * yrow[j];
      T* xrow = xg + i * d;
      for (int64_t j = 0; j < d; ++j) xrow[j] += yrow[j] * (grow[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  auto out = detail::alloc_node<T>(x.shape());
  const auto& xv = x.values();
  auto& ov = *out->values;
  const T inv_sqrt2 = T{1} / std::sqrt(T{2});
  for (size_t i = 0; i < ov.size(); ++i) {
    T v = xv[i];
    ov[i] = T{0.5} * v * (T{1} + std::erf(v * inv_sqrt2));
  }
  return detail::finish_op(out, {x}, [inv_sqrt2](TensorNode<T>& node) {
    auto& px = *node.parents[0];
    if (!px.requires_grad) return;
    const T* g = node.grad.data();
    const T* xv = px.values->data();
    T* xg = px.grad_data();
    const T inv_sqrt2pi = T{1} / std::sqrt(T{2} * static_cast<T>(M_PI));
    for (int64_t i = 0; i < node.numel(); ++i) {
      T v = xv[i];
      T cdf = T{0.5} * (T{1} + std::erf(v * inv_sqrt2));
      T pdf = inv_sqrt2pi * std::exp(T{-0.5} * v * v);
      xg[i] += g[i] * (cdf + v * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  auto out = detail::alloc_node<T>({1});
  T s{};
  for (T v : x.values()) s += v;
  (*out->values)[0] = s;
  return detail::finish_op(out, {x}, [](TensorNode<T>& node) {
    auto& px = *node.parents[0];
    if (!px.requires_grad) return;
    T g = node.grad[0];
    T* xg = px.grad_data();
    for (int64_t i = 0; i < px.numel(); ++i) xg[i] += g;
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean_all: empty tensor");
  return mul_scalar(sum_all(x), T{1} / static_cast<T>(x.numel()));
}

// per-row dot product of two (n x d) tensors -> (n)
template <typename T>
Tensor<T> rowwise_dot(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "rowwise_dot");
  detail::require_rank2(a, "rowwise_dot");
  int64_t n = a.dim(0), d = a.dim(1);
  auto out = detail::alloc_node<T>({n});
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int64_t i = 0; i < n; ++i) {
    T s{};
    for (int64_t j = 0; j < d; ++j) s += av[static_cast<size_t>(i * d + j)] * bv[static_cast<size_t>(i * d + j)];
    (*out->values)[static_cast<size_t>(i)] = s;
  }
  return detail::finish_op(out, {a, b}, [n, d](TensorNode<T>& node) {
    auto& pa = *node.parents[0];
    auto& pb = *node.parents[1];
    const T* g = node.grad.data();
    const T* av = pa.values->data();
    const T* bv = pb.values->data();
    if (pa.requires_grad) {
      T* ag = pa.grad_data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) ag[i * d + j] += g[i] * bv[i * d + j];
    }
    if (pb.requires_grad) {
      T* bg = pb.grad_data();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) bg[i * d + j] += g[i] * av[i * d + j];
    }
  });
}

// ---------------------------------------------------------------------------
// l2 normalization (Eq. 1 geometry)

inline constexpr double kNormGuard = 1e-12;

// Slices along `axis` are scaled to unit Euclidean norm. Vectors with norm
// below kNormGuard are rejected rather than regularized so that
// scale-invariance properties stay exact.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, int64_t axis) {
  if (x.rank() == 1) {
    if (axis != 0) throw ShapeError("l2_normalize: axis out of range for rank-1 tensor");
  } else if (x.rank() == 2) {
    if (axis != 0 && axis != 1) throw ShapeError("l2_normalize: axis out of range");
  } else {
    throw ShapeError("l2_normalize: rank-1 or rank-2 tensor required");
  }
  int64_t n_slices, d, stride_slice, stride_elem;
  if (x.rank() == 1 || axis == 1) {
    n_slices = x.rank() == 1 ? 1 : x.dim(0);
    d = x.rank() == 1 ? x.numel() : x.dim(1);
    stride_slice = d;
    stride_elem = 1;
  } else {  // axis == 0: normalize columns
    n_slices = x.dim(1);
    d = x.dim(0);
    stride_slice = 1;
    stride_elem = x.dim(1);
  }
  auto out = detail::alloc_node<T>(x.shape());
  auto inv_norm = std::make_shared<std::vector<T>>(static_cast<size_t>(n_slices));
  const auto& xv = x.values();
  auto& ov = *out->values;
  for (int64_t s = 0; s < n_slices; ++s) {
    T sq{};
    for (int64_t j = 0; j < d; ++j) {
      T v = xv[static_cast<size_t>(s * stride_slice + j * stride_elem)];
      sq += v * v;
    }
    T norm = std::sqrt(sq);
    if (!(norm >= static_cast<T>(kNormGuard)))
      throw NumericError("l2_normalize: degenerate vector (norm below 1e-12)");
    T inv = T{1} / norm;
    (*inv_norm)[static_cast<size_t>(s)] = inv;
    for (int64_t j = 0; j < d; ++j) {
      size_t at = static_cast<size_t>(s * stride_slice + j * stride_elem);
      ov[at] = xv[at] * inv;
    }
  }
  return detail::finish_op(
      out, {x}, [n_slices, d, stride_slice, stride_elem, inv_norm](TensorNode<T>& node) {
        auto& px = *node.parents[0];
        if (!px.requires_grad) return;
        const T* g = node.grad.data();
        const T* y = node.values->data();
        T* xg = px.grad_data();
        for (int64_t s = 0; s < n_slices; ++s) {
          T dot{};
          for (int64_t j = 0; j < d; ++j) {
            size_t at = static_cast<size_t>(s * stride_slice + j * stride_elem);
            dot += g[at] * y[at];
          }
          T inv = (*inv_norm)[static_cast<size_t>(s)];
          for (int64_t j = 0; j < d; ++j) {
            size_t at = static_cast<size_t>(s * stride_slice + j * stride_elem);
            xg[at] += (g[at] - y[at] * dot) * inv;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// gradient rerouting

// Forward identity (shares the value buffer bit-for-bit); contributes zero
// gradient on the backward pass.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = x.shape();
  n->values = x.node()->values;
  return Tensor<T>(n);
}

// Forward value of `quantized`; the incoming gradient is copied verbatim to
// `continuous`. Algebraically continuous + sg(quantized - continuous).
template <typename T>
Tensor<T> straight_through(const Tensor<T>& quantized, const Tensor<T>& continuous) {
  detail::require_same_shape(quantized, continuous, "straight_through");
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = quantized.shape();
  n->values = quantized.node()->values;
  return detail::finish_op(n, {continuous}, [](TensorNode<T>& node) {
    auto& pc = *node.parents[0];
    if (!pc.requires_grad) return;
    const T* g = node.grad.data();
    T* cg = pc.grad_data();
    for (int64_t i = 0; i < node.numel(); ++i) cg[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// indexing and layout

template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, const std::vector<int64_t>& idx) {
  detail::require_rank2(x, "take_rows");
  int64_t d = x.dim(1);
  for (int64_t i : idx)
    if (i < 0 || i >= x.dim(0)) throw ShapeError("take_rows: index out of range");
  auto out = detail::alloc_node<T>({static_cast<int64_t>(idx.size()), d});
  const auto& xv = x.values();
  auto& ov = *out->values;
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy_n(xv.data() + idx[r] * d, d, ov.data() + static_cast<int64_t>(r) * d);
  return detail::finish_op(out, {x}, [idx, d](TensorNode<T>& node) {
    auto& px = *node.parents[0];
    if (!px.requires_grad) return;
    const T* g = node.grad.data();
    T* xg = px.grad_data();
    for (size_t r = 0; r < idx.size(); ++r) {
      const T* grow = g + static_cast<int64_t>(r) * d;
      T* xrow = xg + idx[r] * d;
      for (int64_t j = 0; j < d; ++j) xrow[j] += grow[j];
    }
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, int64_t start, int64_t count) {
  detail::require_rank2(x, "slice_rows");
  if (start < 0 || count < 0 || start + count > x.dim(0))
    throw ShapeError("slice_rows: range out of bounds");
  int64_t d = x.dim(1);
  auto out = detail::alloc_node<T>({count, d});
  std::copy_n(x.values().data() + start * d, count * d, out->values->data());
  return detail::finish_op(out, {x}, [start, count, d](TensorNode<T>& node) {
    auto& px = *node.parents[0];
    if (!px.requires_grad) return;
    const T* g = node.grad.data();
    T* xg = px.grad_data() + start * d;
    for (int64_t i = 0; i < count * d; ++i) xg[i] += g[i];
  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  int64_t d = parts[0].cols();
  int64_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_rows");
    if (p.dim(1) != d) throw ShapeError("concat_rows: column mismatch");
    total += p.dim(0);
  }
  auto out = detail::alloc_node<T>({total, d});
  auto& ov = *out->values;
  int64_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.values().data(), p.numel(), ov.data() + off * d);
    off += p.dim(0);
  }
  bool rg = false;
  for (const auto& p : parts) rg = rg || p.requires_grad();
  if (!rg) return Tensor<T>(out);
  out->requires_grad = true;
  for (const auto& p : parts) out->parents.push_back(p.node());
  out->backprop = [d](TensorNode<T>& node) {
    const T* g = node.grad.data();
    int64_t off = 0;
    for (auto& pp : node.parents) {
      int64_t rows = pp->shape[0];
      if (pp->requires_grad) {
        T* pg = pp->grad_data();
        for (int64_t i = 0; i < rows * d; ++i) pg[i] += g[off * d + i];
      }
      off += rows;
    }
  };
  return Tensor<T>(out);
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int64_t start, int64_t count) {
  detail::require_rank2(x, "slice_cols");
  if (start < 0 || count < 0 || start + count > x.dim(1))
    throw ShapeError("slice_cols: range out of bounds");
  int64_t n = x.dim(0), d = x.dim(1);
  auto out = detail::alloc_node<T>({n, count});
  const auto& xv = x.values();
  auto& ov = *out->values;
  for (int64_t i = 0; i < n; ++i)
    std::copy_n(xv.data() + i * d + start, count, ov.data() + i * count);
  return detail::finish_op(out, {x}, [start, count, n, d](TensorNode<T>& node) {
    auto& px = *node.parents[0];
    if (!px.requires_grad) return;
    const T* g = node.grad.data();
    T* xg = px.grad_data();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < count; ++j) xg[i * d + start + j] += g[i * count + j];
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  int64_t n = parts[0].rows();
  int64_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.dim(0) != n) throw ShapeError("concat_cols: row mismatch");
    total += p.dim(1);
  }
  auto out = detail::alloc_node<T>({n, total});
  auto& ov = *out->values;
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t w = p.dim(1);
    const auto& pv = p.values();
    for (int64_t i = 0; i < n; ++i)
      std::copy_n(pv.data() + i * w, w, ov.data() + i * total + off);
    off += w;
  }
  bool rg = false;
  for (const auto& p : parts) rg = rg || p.requires_grad();
  if (!rg) return Tensor<T>(out);
  out->requires_grad = true;
  for (const auto& p : parts) out->parents.push_back(p.node());
  out->backprop = [n, total](TensorNode<T>& node) {
    const T* g = node.grad.data();
    int64_t off = 0;
    for (auto& pp : node.parents) {
      int64_t w = pp->shape[1];
      if (pp->requires_grad) {
        T* pg = pp->grad_data();
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < w; ++j) pg[i * w + j] += g[i * total + off + j];
      }
      off += w;
    }
  };
  return Tensor<T>(out);
}

// Copy of x with the given rows replaced by `row` (1 x d). Gradient flows to
// x at untouched rows and to `row` from every replaced row.
template <typename T>
Tensor<T> overwrite_rows(const Tensor<T>& x, const std::vector<int64_t>& positions,
                         const Tensor<T>& row) {
  detail::require_rank2(x, "overwrite_rows");
  int64_t n = x.dim(0), d = x.dim(1);
  if (row.numel() != d) throw ShapeError("overwrite_rows: replacement width mismatch");
  for (int64_t p : positions)
    if (p < 0 || p >= n) throw ShapeError("overwrite_rows: position out of range");
  auto out = detail::alloc_node<T>(x.shape());
  *out->values = x.values();
  auto& ov = *out->values;
  const auto& rv = row.values();
  for (int64_t p : positions) std::copy_n(rv.data(), d, ov.data() + p * d);
  auto replaced = std::make_shared<std::vector<char>>(static_cast<size_t>(n), char{0});
  for (int64_t p : positions) (*replaced)[static_cast<size_t>(p)] = 1;
  return detail::finish_op(out, {x, row}, [n, d, replaced](TensorNode<T>& node) {
    auto& px = *node.parents[0];
    auto& prow = *node.parents[1];
    const T* g = node.grad.data();
    if (px.requires_grad) {
      T* xg = px.grad_data();
      for (int64_t i = 0; i < n; ++i) {
        if ((*replaced)[static_cast<size_t>(i)]) continue;
        for (int64_t j = 0; j < d; ++j) xg[i * d + j] += g[i * d + j];
      }
    }
    if (prow.requires_grad) {
      T* rg = prow.grad_data();
      for (int64_t i = 0; i < n; ++i) {
        if (!(*replaced)[static_cast<size_t>(i)]) continue;
        for (int64_t j = 0; j < d; ++j) rg[j] += g[i * d + j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// classification loss

// Mean over rows of -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, const std::vector<int64_t>& targets) {
  detail::require_rank2(logits, "cross_entropy_mean");
  int64_t n = logits.dim(0), k = logits.dim(1);
  if (n == 0) throw ShapeError("cross_entropy_mean: no rows");
  if (static_cast<int64_t>(targets.size()) != n)
    throw ShapeError("cross_entropy_mean: target count mismatch");
  for (int64_t t : targets)
    if (t < 0 || t >= k) throw ShapeError("cross_entropy_mean: target out of range");
  auto out = detail::alloc_node<T>({1});
  const auto& lv = logits.values();
  T total{};
  for (int64_t i = 0; i < n; ++i) {
    const T* row = lv.data() + i * k;
    T mx = row[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T sum{};
    for (int64_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    total += mx + std::log(sum) - row[targets[static_cast<size_t>(i)]];
  }
  (*out->values)[0] = total / static_cast<T>(n);
  return detail::finish_op(out, {logits}, [n, k, targets](TensorNode<T>& node) {
    auto& pl = *node.parents[0];
    if (!pl.requires_grad) return;
    T g = node.grad[0] / static_cast<T>(n);
    const T* lv = pl.values->data();
    T* lg = pl.grad_data();
    std::vector<T> p(static_cast<size_t>(k));
    for (int64_t i = 0; i < n; ++i) {
      const T* row = lv + i * k;
      T mx = row[0];
      for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      T sum{};
      for (int64_t j = 0; j < k; ++j) {
        p[static_cast<size_t>(j)] = std::exp(row[j] - mx);
        sum += p[static_cast<size_t>(j)];
      }
      T inv = T{1} / sum;
      T* grow = lg + i * k;
      for (int64_t j = 0; j < k; ++j) grow[j] += g * p[static_cast<size_t>(j)] * inv;
      grow[targets[static_cast<size_t>(i)]] -= g;
    }
  });
}

// ---------------------------------------------------------------------------
// dropout (inverted scaling; pass-through when disabled)

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng* rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout: rate must be below 1");
  if (rng == nullptr) throw ConfigError("dropout: rng required in training mode");
  auto out = detail::alloc_node<T>(x.shape());
  auto mask = std::make_shared<std::vector<T>>(x.values().size());
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  const auto& xv = x.values();
  auto& ov = *out->values;
  for (size_t i = 0; i < ov.size(); ++i) {
    T m = rng->uniform01() < p ? T{} : scale;
    (*mask)[i] = m;
    ov[i] = xv[i] * m;
  }
  return detail::finish_op(out, {x}, [mask](TensorNode<T>& node) {
    auto& px = *node.parents[0];
    if (!px.requires_grad) return;
    const T* g = node.grad.data();
    T* xg = px.grad_data();
    for (int64_t i = 0; i < node.numel(); ++i) xg[i] += g[i] * (*mask)[static_cast<size_t>(i)];
  });
}

// ---------------------------------------------------------------------------
// parameters

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
  bool decay = true;  // subject to weight decay

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool train = true, bool wd = true)
      : name(std::move(n)), value(std::move(v)), trainable(train), decay(wd) {
    value.set_requires_grad(trainable);
  }

  int64_t numel() const { return value.numel(); }
  void zero_grad() { value.zero_grad(); }
};

template <typename T>
Parameter<T> param_trunc_normal(std::string name, std::vector<int64_t> shape, double stddev,
                                Rng& rng, bool trainable = true, bool decay = true) {
  auto t = Tensor<T>::zeros(std::move(shape));
  for (auto& v : t.leaf_values()) v = static_cast<T>(rng.truncated_normal(stddev));
  return Parameter<T>(std::move(name), std::move(t), trainable, decay);
}

template <typename T>
Parameter<T> param_const(std::string name, std::vector<int64_t> shape, T fill, bool trainable = true,
                         bool decay = true) {
  return Parameter<T>(std::move(name), Tensor<T>::full(std::move(shape), fill), trainable, decay);
}

template <typename T>
uint64_t parameter_hash(const std::vector<Parameter<T>*>& params) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto* p : params) {
    h = fnv1a64(p->name.data(), p->name.size(), h);
    h = fnv1a64(p->value.values().data(), p->value.values().size() * sizeof(T), h);
  }
  return h;
}

}  // namespace vqmim
