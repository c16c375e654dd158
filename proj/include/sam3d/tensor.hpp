#pragma once

// Minimal reverse-mode automatic differentiation over dense float64 tensors of
// rank <= 2. Every op records a closure that pushes the output gradient into
// its parents; Tensor::backward() replays them in reverse topological order.
//
// Broadcasting exists only for bias-add over the leading axis ([n, m] + [m]).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace sam3d {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class TensorError : public std::runtime_error {
 public:
  enum class Kind { shape_mismatch, non_finite, invalid_argument };

  TensorError(Kind kind, std::string op, const std::string& detail)
      : std::runtime_error(std::string(op) + ": " + detail), kind_(kind), op_(std::move(op)) {}

  Kind kind() const noexcept { return kind_; }
  const std::string& op() const noexcept { return op_; }

 private:
  Kind kind_;
  std::string op_;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_size(shape) != values.size()) {
      throw TensorError(TensorError::Kind::shape_mismatch, "tensor",
                        "shape " + shape_string(shape) + " does not hold " +
                            std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  // Rank-2 view: rank 1 [m] reads as [1, m], rank 0 as [1, 1].
  std::size_t rows() const { return rank() == 2 ? shape()[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape().back(); }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  double item() const {
    if (size() != 1) {
      throw TensorError(TensorError::Kind::shape_mismatch, "item",
                        "tensor of shape " + shape_string(shape()) + " is not a scalar");
    }
    return node_->value[0];
  }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  const char* op() const { return node_->op; }

  // Value copy with no history.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  // Accumulates d(this)/d(leaf) into every reachable leaf that requires grad.
  // `this` must be a scalar.
  void backward() const {
    if (size() != 1) {
      throw TensorError(TensorError::Kind::shape_mismatch, "backward",
                        "loss must be scalar, got " + shape_string(shape()));
    }
    if (!node_->requires_grad) return;
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        detail::Node* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    for (detail::Node* n : order) {
      if (n->backward) n->grad.clear();
    }
    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw TensorError(TensorError::Kind::non_finite, op, "non-finite result");
    }
  }
}

inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> parents, std::function<void(Node&)> backward) {
  check_finite(op, value);
  Tensor out(std::move(shape), std::move(value));
  bool needs = false;
  if (grad_enabled) {
    for (const Tensor& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    Node& n = *out.node();
    n.requires_grad = true;
    n.op = op;
    for (const Tensor& p : parents) n.parents.push_back(p.node());
    n.backward = std::move(backward);
  } else {
    out.node()->op = op;
  }
  return out;
}

inline void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw TensorError(TensorError::Kind::shape_mismatch, op, what);
}

inline void require_rank2(const Tensor& t, const char* op) {
  require(t.rank() == 2, op, "expected rank-2 tensor, got " + shape_string(t.shape()));
}

inline void accumulate(Node* p, const std::vector<double>& g) {
  if (!p->requires_grad) return;
  auto& dst = p->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

// C[n,m] (+)= A[n,k] * B[k,m]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
                    std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c + i * m;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[n,k] += G[n,m] * B[k,m]^T
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t n, std::size_t k,
                    std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* gi = g + i * m;
    double* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * m;
      double s = 0;
      for (std::size_t j = 0; j < m; ++j) s += gi[j] * bp[j];
      ci[p] += s;
    }
  }
}

// C[k,m] += A[n,k]^T * G[n,m]
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t n, std::size_t k,
                    std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * k;
    const double* gi = g + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += av * gi[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and elementwise ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  detail::require(b.rows() == k, "matmul",
                  shape_string(a.shape()) + " x " + shape_string(b.shape()));
  std::vector<double> c(n * m, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), c.data(), n, k, m);
  auto* an = a.node().get();
  auto* bn = b.node().get();
  return detail::make_result("matmul", {n, m}, std::move(c), {a, b},
                             [an, bn, n, k, m](detail::Node& self) {
                               if (an->requires_grad) {
                                 detail::gemm_nt(self.grad.data(), bn->value.data(),
                                                 an->ensure_grad().data(), n, k, m);
                               }
                               if (bn->requires_grad) {
                                 detail::gemm_tn(an->value.data(), self.grad.data(),
                                                 bn->ensure_grad().data(), n, k, m);
                               }
                             });
}

// Same-shape sum, or [n, m] + bias where bias is [m] or [1, m].
inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
    auto* an = a.node().get();
    auto* bn = b.node().get();
    return detail::make_result("add", a.shape(), std::move(v), {a, b}, [an, bn](detail::Node& self) {
      detail::accumulate(an, self.grad);
      detail::accumulate(bn, self.grad);
    });
  }
  const bool bias = a.rank() == 2 && b.rows() == 1 && b.rank() <= 2 && b.rank() >= 1 &&
                    b.cols() == a.cols();
  detail::require(bias, "add", shape_string(a.shape()) + " + " + shape_string(b.shape()));
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) v[i * m + j] = a.data()[i * m + j] + b.data()[j];
  }
  auto* an = a.node().get();
  auto* bn = b.node().get();
  return detail::make_result("add", a.shape(), std::move(v), {a, b},
                             [an, bn, n, m](detail::Node& self) {
                               detail::accumulate(an, self.grad);
                               if (bn->requires_grad) {
                                 auto& g = bn->ensure_grad();
                                 for (std::size_t i = 0; i < n; ++i) {
                                   for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
                                 }
                               }
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "sub",
                  shape_string(a.shape()) + " - " + shape_string(b.shape()));
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  auto* an = a.node().get();
  auto* bn = b.node().get();
  return detail::make_result("sub", a.shape(), std::move(v), {a, b}, [an, bn](detail::Node& self) {
    detail::accumulate(an, self.grad);
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(), "mul",
                  shape_string(a.shape()) + " * " + shape_string(b.shape()));
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  auto* an = a.node().get();
  auto* bn = b.node().get();
  return detail::make_result("mul", a.shape(), std::move(v), {a, b}, [an, bn](detail::Node& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * s;
  auto* an = a.node().get();
  return detail::make_result("scale", a.shape(), std::move(v), {a}, [an, s](detail::Node& self) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) v[j * n + i] = a.data()[i * m + j];
  }
  auto* an = a.node().get();
  return detail::make_result("transpose", {m, n}, std::move(v), {a},
                             [an, n, m](detail::Node& self) {
                               if (!an->requires_grad) return;
                               auto& g = an->ensure_grad();
                               for (std::size_t i = 0; i < n; ++i) {
                                 for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[j * n + i];
                               }
                             });
}

// Concatenation of rank-2 tensors along axis 0 (rows) or 1 (columns).
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  detail::require(!parts.empty(), "concat", "no inputs");
  detail::require(axis == 0 || axis == 1, "concat", "axis must be 0 or 1");
  for (const Tensor& p : parts) detail::require_rank2(p, "concat");
  std::size_t n = 0, m = 0;
  if (axis == 0) {
    m = parts[0].cols();
    for (const Tensor& p : parts) {
      detail::require(p.cols() == m, "concat", "column count mismatch");
      n += p.rows();
    }
  } else {
    n = parts[0].rows();
    for (const Tensor& p : parts) {
      detail::require(p.rows() == n, "concat", "row count mismatch");
      m += p.cols();
    }
  }
  std::vector<double> v(n * m);
  std::vector<detail::Node*> nodes;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    nodes.push_back(p.node().get());
    offsets.push_back(off);
    const std::size_t pr = p.rows(), pc = p.cols();
    for (std::size_t i = 0; i < pr; ++i) {
      for (std::size_t j = 0; j < pc; ++j) {
        const std::size_t dst = axis == 0 ? (off + i) * m + j : i * m + off + j;
        v[dst] = p.data()[i * pc + j];
      }
    }
    off += axis == 0 ? pr : pc;
  }
  return detail::make_result("concat", {n, m}, std::move(v), parts,
                             [nodes, offsets, axis, m](detail::Node& self) {
                               for (std::size_t t = 0; t < nodes.size(); ++t) {
                                 detail::Node* p = nodes[t];
                                 if (!p->requires_grad) continue;
                                 auto& g = p->ensure_grad();
                                 const std::size_t pr = p->shape[0], pc = p->shape[1];
                                 for (std::size_t i = 0; i < pr; ++i) {
                                   for (std::size_t j = 0; j < pc; ++j) {
                                     const std::size_t src = axis == 0 ? (offsets[t] + i) * m + j
                                                                       : i * m + offsets[t] + j;
                                     g[i * pc + j] += self.grad[src];
                                   }
                                 }
                               }
                             });
}

// Half-open range [begin, end) along `axis` of a rank-2 tensor.
inline Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end) {
  detail::require_rank2(a, "slice");
  detail::require(axis == 0 || axis == 1, "slice", "axis must be 0 or 1");
  const std::size_t n = a.rows(), m = a.cols();
  const std::size_t extent = axis == 0 ? n : m;
  detail::require(begin <= end && end <= extent, "slice", "range out of bounds");
  const std::size_t on = axis == 0 ? end - begin : n;
  const std::size_t om = axis == 0 ? m : end - begin;
  std::vector<double> v(on * om);
  for (std::size_t i = 0; i < on; ++i) {
    for (std::size_t j = 0; j < om; ++j) {
      v[i * om + j] = axis == 0 ? a.data()[(begin + i) * m + j] : a.data()[i * m + begin + j];
    }
  }
  auto* an = a.node().get();
  return detail::make_result("slice", {on, om}, std::move(v), {a},
                             [an, axis, begin, on, om, m](detail::Node& self) {
                               if (!an->requires_grad) return;
                               auto& g = an->ensure_grad();
                               for (std::size_t i = 0; i < on; ++i) {
                                 for (std::size_t j = 0; j < om; ++j) {
                                   const std::size_t dst =
                                       axis == 0 ? (begin + i) * m + j : i * m + begin + j;
                                   g[dst] += self.grad[i * om + j];
                                 }
                               }
                             });
}

// Rows of `a` in the given order (repeats allowed).
inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows) {
  detail::require_rank2(a, "gather_rows");
  const std::size_t m = a.cols();
  std::vector<double> v(rows.size() * m);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::require(rows[i] < a.rows(), "gather_rows", "row index out of range");
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * m), m, v.begin() + i * m);
  }
  auto* an = a.node().get();
  return detail::make_result("gather_rows", {rows.size(), m}, std::move(v), {a},
                             [an, rows, m](detail::Node& self) {
                               if (!an->requires_grad) return;
                               auto& g = an->ensure_grad();
                               for (std::size_t i = 0; i < rows.size(); ++i) {
                                 for (std::size_t j = 0; j < m; ++j) g[rows[i] * m + j] += self.grad[i * m + j];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Pooling

// Mean over `axis` of a rank-2 tensor, keeping the reduced axis with size 1.
inline Tensor mean_pool(const Tensor& a, int axis) {
  detail::require_rank2(a, "mean_pool");
  detail::require(axis == 0 || axis == 1, "mean_pool", "axis must be 0 or 1");
  const std::size_t n = a.rows(), m = a.cols();
  detail::require(n > 0 && m > 0, "mean_pool", "empty input");
  const Shape out_shape = axis == 0 ? Shape{1, m} : Shape{n, 1};
  std::vector<double> v(shape_size(out_shape), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) v[axis == 0 ? j : i] += a.data()[i * m + j];
  }
  const double inv = 1.0 / static_cast<double>(axis == 0 ? n : m);
  for (double& x : v) x *= inv;
  auto* an = a.node().get();
  return detail::make_result("mean_pool", out_shape, std::move(v), {a},
                             [an, axis, n, m, inv](detail::Node& self) {
                               if (!an->requires_grad) return;
                               auto& g = an->ensure_grad();
                               for (std::size_t i = 0; i < n; ++i) {
                                 for (std::size_t j = 0; j < m; ++j) {
                                   g[i * m + j] += inv * self.grad[axis == 0 ? j : i];
                                 }
                               }
                             });
}

// Max over `axis`; gradient routes to the first argmax of each pooled slice.
inline Tensor max_pool(const Tensor& a, int axis) {
  detail::require_rank2(a, "max_pool");
  detail::require(axis == 0 || axis == 1, "max_pool", "axis must be 0 or 1");
  const std::size_t n = a.rows(), m = a.cols();
  detail::require(n > 0 && m > 0, "max_pool", "empty input");
  const std::size_t slices = axis == 0 ? m : n;
  const std::size_t len = axis == 0 ? n : m;
  std::vector<double> v(slices);
  std::vector<std::size_t> arg(slices);
  for (std::size_t s = 0; s < slices; ++s) {
    std::size_t best = axis == 0 ? s : s * m;
    for (std::size_t t = 1; t < len; ++t) {
      const std::size_t idx = axis == 0 ? t * m + s : s * m + t;
      if (a.data()[idx] > a.data()[best]) best = idx;
    }
    arg[s] = best;
    v[s] = a.data()[best];
  }
  const Shape out_shape = axis == 0 ? Shape{1, m} : Shape{n, 1};
  auto* an = a.node().get();
  return detail::make_result("max_pool", out_shape, std::move(v), {a},
                             [an, arg](detail::Node& self) {
                               if (!an->requires_grad) return;
                               auto& g = an->ensure_grad();
                               for (std::size_t s = 0; s < arg.size(); ++s) g[arg[s]] += self.grad[s];
                             });
}

// Column-wise max over consecutive row segments: segment s spans rows
// [offsets[s], offsets[s + 1]). Output is [segments, m].
inline Tensor segment_max_pool(const Tensor& a, const std::vector<std::size_t>& offsets) {
  detail::require_rank2(a, "segment_max_pool");
  detail::require(offsets.size() >= 2 && offsets.front() == 0 && offsets.back() == a.rows(),
                  "segment_max_pool", "offsets must run from 0 to row count");
  const std::size_t segs = offsets.size() - 1, m = a.cols();
  std::vector<double> v(segs * m);
  std::vector<std::size_t> arg(segs * m);
  for (std::size_t s = 0; s < segs; ++s) {
    detail::require(offsets[s] < offsets[s + 1], "segment_max_pool", "empty segment");
    for (std::size_t j = 0; j < m; ++j) {
      std::size_t best = offsets[s] * m + j;
      for (std::size_t r = offsets[s] + 1; r < offsets[s + 1]; ++r) {
        if (a.data()[r * m + j] > a.data()[best]) best = r * m + j;
      }
      arg[s * m + j] = best;
      v[s * m + j] = a.data()[best];
    }
  }
  auto* an = a.node().get();
  return detail::make_result("segment_max_pool", {segs, m}, std::move(v), {a},
                             [an, arg](detail::Node& self) {
                               if (!an->requires_grad) return;
                               auto& g = an->ensure_grad();
                               for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
                             });
}

// ---------------------------------------------------------------------------
// Activations and normalization

inline Tensor relu(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] > 0 ? a.data()[i] : 0.0;
  auto* an = a.node().get();
  return detail::make_result("relu", a.shape(), std::move(v), {a}, [an](detail::Node& self) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (an->value[i] > 0) g[i] += self.grad[i];
    }
  });
}

// tanh approximation of GELU, with its exact derivative.
inline Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double k = 0.044715;
  std::vector<double> v(a.size());
  std::vector<double> t(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = a.data()[i];
    t[i] = std::tanh(c * (x + k * x * x * x));
    v[i] = 0.5 * x * (1.0 + t[i]);
  }
  auto* an = a.node().get();
  return detail::make_result("gelu", a.shape(), std::move(v), {a},
                             [an, t = std::move(t)](detail::Node& self) {
                               if (!an->requires_grad) return;
                               auto& g = an->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 const double x = an->value[i];
                                 const double d = 0.5 * (1.0 + t[i]) +
                                                  0.5 * x * (1.0 - t[i] * t[i]) * c * (1.0 + 3.0 * k * x * x);
                                 g[i] += self.grad[i] * d;
                               }
                             });
}

// Softmax along `axis` of a rank-2 tensor.
inline Tensor softmax(const Tensor& a, int axis = 1) {
  detail::require_rank2(a, "softmax");
  detail::require(axis == 0 || axis == 1, "softmax", "axis must be 0 or 1");
  const std::size_t n = a.rows(), m = a.cols();
  const std::size_t slices = axis == 1 ? n : m, len = axis == 1 ? m : n;
  const std::size_t stride = axis == 1 ? 1 : m;
  auto base = [=](std::size_t s) { return axis == 1 ? s * m : s; };
  std::vector<double> v(a.size());
  for (std::size_t s = 0; s < slices; ++s) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, a.data()[base(s) + t * stride]);
    double sum = 0;
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t idx = base(s) + t * stride;
      v[idx] = std::exp(a.data()[idx] - mx);
      sum += v[idx];
    }
    for (std::size_t t = 0; t < len; ++t) v[base(s) + t * stride] /= sum;
  }
  auto* an = a.node().get();
  return detail::make_result(
      "softmax", a.shape(), v, {a}, [an, y = v, slices, len, stride, base](detail::Node& self) {
        if (!an->requires_grad) return;
        auto& g = an->ensure_grad();
        for (std::size_t s = 0; s < slices; ++s) {
          double dot = 0;
          for (std::size_t t = 0; t < len; ++t) {
            const std::size_t idx = base(s) + t * stride;
            dot += self.grad[idx] * y[idx];
          }
          for (std::size_t t = 0; t < len; ++t) {
            const std::size_t idx = base(s) + t * stride;
            g[idx] += y[idx] * (self.grad[idx] - dot);
          }
        }
      });
}

// Normalizes each row of a rank-2 tensor to zero mean and unit variance
// (variance + eps under the root), then applies the optional per-column gain
// and bias (shape [m]).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  detail::require_rank2(x, "layer_norm");
  if (!(eps > 0)) throw TensorError(TensorError::Kind::invalid_argument, "layer_norm", "eps must be > 0");
  const std::size_t n = x.rows(), m = x.cols();
  if (gain.defined()) detail::require(gain.size() == m, "layer_norm", "gain size mismatch");
  if (bias.defined()) detail::require(bias.size() == m, "layer_norm", "bias size mismatch");
  std::vector<double> xhat(x.size()), inv_std(n), v(x.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.data().data() + i * m;
    double mean = 0;
    for (std::size_t j = 0; j < m; ++j) mean += row[j];
    mean /= static_cast<double>(m);
    double var = 0;
    for (std::size_t j = 0; j < m; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(m);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) {
      const double h = (row[j] - mean) * inv_std[i];
      xhat[i * m + j] = h;
      v[i * m + j] = h * (gain.defined() ? gain.data()[j] : 1.0) + (bias.defined() ? bias.data()[j] : 0.0);
    }
  }
  std::vector<Tensor> parents{x};
  detail::Node* gn = gain.defined() ? gain.node().get() : nullptr;
  detail::Node* bn = bias.defined() ? bias.node().get() : nullptr;
  if (gain.defined()) parents.push_back(gain);
  if (bias.defined()) parents.push_back(bias);
  auto* xn = x.node().get();
  return detail::make_result(
      "layer_norm", x.shape(), std::move(v), parents,
      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), n, m](detail::Node& self) {
        const auto& dy = self.grad;
        if (gn && gn->requires_grad) {
          auto& g = gn->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) g[j] += dy[i * m + j] * xhat[i * m + j];
          }
        }
        if (bn && bn->requires_grad) {
          auto& g = bn->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) g[j] += dy[i * m + j];
          }
        }
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        std::vector<double> dh(m);
        for (std::size_t i = 0; i < n; ++i) {
          double mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < m; ++j) {
            dh[j] = dy[i * m + j] * (gn ? gn->value[j] : 1.0);
            mean_dh += dh[j];
            mean_dh_h += dh[j] * xhat[i * m + j];
          }
          mean_dh /= static_cast<double>(m);
          mean_dh_h /= static_cast<double>(m);
          for (std::size_t j = 0; j < m; ++j) {
            g[i * m + j] += inv_std[i] * (dh[j] - mean_dh - xhat[i * m + j] * mean_dh_h);
          }
        }
      });
}

inline Tensor layer_norm(const Tensor& x, double eps = 1e-5) {
  return layer_norm(x, Tensor(), Tensor(), eps);
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Tensor sum(const Tensor& a) {
  double s = 0;
  for (double x : a.data()) s += x;
  auto* an = a.node().get();
  return detail::make_result("sum", {}, {s}, {a}, [an](detail::Node& self) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    for (double& x : g) x += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  detail::require(a.size() > 0, "mean", "empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// Mean squared error over all elements.
inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape() && a.size() > 0, "mse",
                  shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const double inv = 1.0 / static_cast<double>(a.size());
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  auto* an = a.node().get();
  auto* bn = b.node().get();
  return detail::make_result("mse", {}, {s * inv}, {a, b}, [an, bn, inv](detail::Node& self) {
    const double gs = self.grad[0] * 2.0 * inv;
    for (std::size_t i = 0; i < an->value.size(); ++i) {
      const double d = gs * (an->value[i] - bn->value[i]);
      if (an->requires_grad) an->ensure_grad()[i] += d;
      if (bn->requires_grad) bn->ensure_grad()[i] -= d;
    }
  });
}

namespace detail {

inline double smooth_l1_value(double d, double beta) {
  const double ad = std::abs(d);
  return ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
}

inline double smooth_l1_slope(double d, double beta) {
  if (std::abs(d) < beta) return d / beta;
  return d > 0 ? 1.0 : -1.0;
}

inline void require_beta(double beta, const char* op) {
  if (!(beta > 0)) throw TensorError(TensorError::Kind::invalid_argument, op, "beta must be > 0");
}

}  // namespace detail

// Mean over elements of 0.5 d^2 / beta (|d| < beta) or |d| - 0.5 beta.
inline Tensor smooth_l1(const Tensor& a, const Tensor& b, double beta = 1.0) {
  detail::require_beta(beta, "smooth_l1");
  detail::require(a.shape() == b.shape() && a.size() > 0, "smooth_l1",
                  shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const double inv = 1.0 / static_cast<double>(a.size());
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += detail::smooth_l1_value(a.data()[i] - b.data()[i], beta);
  auto* an = a.node().get();
  auto* bn = b.node().get();
  return detail::make_result("smooth_l1", {}, {s * inv}, {a, b},
                             [an, bn, inv, beta](detail::Node& self) {
                               const double gs = self.grad[0] * inv;
                               for (std::size_t i = 0; i < an->value.size(); ++i) {
                                 const double d =
                                     gs * detail::smooth_l1_slope(an->value[i] - bn->value[i], beta);
                                 if (an->requires_grad) an->ensure_grad()[i] += d;
                                 if (bn->requires_grad) bn->ensure_grad()[i] -= d;
                               }
                             });
}

// Per-row smooth L1 (mean over columns), shape [n, 1].
inline Tensor smooth_l1_rows(const Tensor& a, const Tensor& b, double beta = 1.0) {
  detail::require_beta(beta, "smooth_l1_rows");
  detail::require_rank2(a, "smooth_l1_rows");
  detail::require(a.shape() == b.shape() && a.cols() > 0, "smooth_l1_rows",
                  shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const std::size_t n = a.rows(), m = a.cols();
  const double inv = 1.0 / static_cast<double>(m);
  std::vector<double> v(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      v[i] += detail::smooth_l1_value(a.data()[i * m + j] - b.data()[i * m + j], beta);
    }
    v[i] *= inv;
  }
  auto* an = a.node().get();
  auto* bn = b.node().get();
  return detail::make_result("smooth_l1_rows", {n, 1}, std::move(v), {a, b},
                             [an, bn, inv, beta, m](detail::Node& self) {
                               for (std::size_t i = 0; i < an->value.size(); ++i) {
                                 const double d = self.grad[i / m] * inv *
                                                  detail::smooth_l1_slope(an->value[i] - bn->value[i], beta);
                                 if (an->requires_grad) an->ensure_grad()[i] += d;
                                 if (bn->requires_grad) bn->ensure_grad()[i] -= d;
                               }
                             });
}

// Cosine similarity of the two tensors viewed as flat vectors.
inline Tensor cosine_sim(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape() && a.size() > 0, "cosine_sim",
                  shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a.data()[i] * b.data()[i];
    na += a.data()[i] * a.data()[i];
    nb += b.data()[i] * b.data()[i];
  }
  if (na == 0 || nb == 0) {
    throw TensorError(TensorError::Kind::invalid_argument, "cosine_sim", "zero-norm input");
  }
  const double la = std::sqrt(na), lb = std::sqrt(nb);
  const double c = dot / (la * lb);
  auto* an = a.node().get();
  auto* bn = b.node().get();
  return detail::make_result("cosine_sim", {}, {c}, {a, b},
                             [an, bn, c, la, lb, na, nb](detail::Node& self) {
                               const double gs = self.grad[0];
                               for (std::size_t i = 0; i < an->value.size(); ++i) {
                                 const double ai = an->value[i], bi = bn->value[i];
                                 if (an->requires_grad) an->ensure_grad()[i] += gs * (bi / (la * lb) - c * ai / na);
                                 if (bn->requires_grad) bn->ensure_grad()[i] += gs * (ai / (la * lb) - c * bi / nb);
                               }
                             });
}

// Mean softmax cross-entropy of logits [n, c] against integer labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  detail::require_rank2(logits, "cross_entropy");
  const std::size_t n = logits.rows(), c = logits.cols();
  detail::require(labels.size() == n && n > 0, "cross_entropy", "label count mismatch");
  std::vector<double> prob(logits.size());
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    detail::require(labels[i] < c, "cross_entropy", "label out of range");
    const double* row = logits.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      prob[i * c + j] = std::exp(row[j] - mx);
      z += prob[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) prob[i * c + j] /= z;
    loss += -(row[labels[i]] - mx - std::log(z));
  }
  const double inv = 1.0 / static_cast<double>(n);
  auto* ln = logits.node().get();
  return detail::make_result("cross_entropy", {}, {loss * inv}, {logits},
                             [ln, prob = std::move(prob), labels, c, inv](detail::Node& self) {
                               if (!ln->requires_grad) return;
                               auto& g = ln->ensure_grad();
                               const double gs = self.grad[0] * inv;
                               for (std::size_t i = 0; i < labels.size(); ++i) {
                                 for (std::size_t j = 0; j < c; ++j) {
                                   g[i * c + j] += gs * (prob[i * c + j] - (j == labels[i] ? 1.0 : 0.0));
                                 }
                               }
                             });
}

}  // namespace sam3d
