#pragma once

// Dense row-major tensor with a dynamically recorded autodiff graph.
//
// A Tensor is a cheap handle onto a shared node. Every op that sees an input
// requiring gradients (and runs with grad mode on) records a backward closure
// on its result; backward() walks the graph in reverse topological order and
// then drops the recorded closures.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "deaot/errors.hpp"
#include "deaot/random.hpp"

#ifdef DEAOT_USE_CBLAS
#include <cblas.h>
#endif

namespace deaot {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline thread_local bool grad_mode = true;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool has_grad() const { return grad.size() == data.size() && !data.empty(); }

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

// Disables graph recording for the enclosing scope (inference, benchmarks,
// finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodeType = detail::Node<T>;

  Tensor() : node_(std::make_shared<NodeType>()) { node_->shape = {0}; }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<NodeType>()) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)));
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
  static Tensor full(Shape shape, T value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor scalar(T value) { return Tensor({1}, {value}); }
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    const auto n = shape_numel(shape);
    std::vector<T> data(n);
    for (auto& v : data) v = static_cast<T>(rng.normal(0.0, stddev));
    return Tensor(std::move(shape), std::move(data));
  }
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    const auto n = shape_numel(shape);
    std::vector<T> data(n);
    for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
    return Tensor(std::move(shape), std::move(data));
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return ndim() == 0 ? 0 : node_->shape.front(); }
  std::size_t cols() const { return ndim() < 2 ? 1 : numel() / std::max<std::size_t>(rows(), 1); }
  bool empty() const { return node_->data.empty(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return node_->has_grad(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  // Copy of the values with no graph attached.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  // Same values viewed under a different shape; gradient passes straight back.
  Tensor reshape(Shape new_shape) const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<NodeType>& node() const { return node_; }

 private:
  std::shared_ptr<NodeType> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_mode) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Wraps freshly computed data into a result tensor. When any input needs
// gradients, the backward closure is attached; it receives the output node
// (whose grad is populated) and must accumulate into the captured inputs.
template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs, Backward&& backward) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (any_requires_grad<T>(inputs)) {
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto* t : inputs)
      if (t->requires_grad()) node.parents.push_back(t->node());
    node.backward = std::forward<Backward>(backward);
  }
  return out;
}

// c[n x m] += a[n x k] * b[k x m], all row-major and contiguous. Portable
// kernel; gemm() prefers CBLAS when it is compiled in.
template <typename T>
void gemm_nn_portable(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c) {
  constexpr std::size_t kBlock = 128;
  for (std::size_t k0 = 0; k0 < k; k0 += kBlock) {
    const std::size_t k1 = std::min(k, k0 + kBlock);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
      T* c0 = c + i * m;
      T* c1 = c0 + m;
      T* c2 = c1 + m;
      T* c3 = c2 + m;
      const T* a0 = a + i * k;
      const T* a1 = a0 + k;
      const T* a2 = a1 + k;
      const T* a3 = a2 + k;
      for (std::size_t p = k0; p < k1; ++p) {
        const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
        const T* br = b + p * m;
        for (std::size_t j = 0; j < m; ++j) {
          const T bv = br[j];
          c0[j] += v0 * bv;
          c1[j] += v1 * bv;
          c2[j] += v2 * bv;
          c3[j] += v3 * bv;
        }
      }
    }
    for (; i < n; ++i) {
      T* ci = c + i * m;
      const T* ai = a + i * k;
      for (std::size_t p = k0; p < k1; ++p) {
        const T v = ai[p];
        const T* br = b + p * m;
        for (std::size_t j = 0; j < m; ++j) ci[j] += v * br[j];
      }
    }
  }
}

template <typename T>
std::vector<T> transposed(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = a[r * cols + c];
  return out;
}

// c[n x m] += op(a) * op(b); op(a) is n x k and op(b) is k x m. Transposed
// operands are stored as their untransposed shapes (a: k x n, b: m x k).
template <typename T>
void gemm(std::size_t n, std::size_t k, std::size_t m, const T* a, bool trans_a, const T* b,
          bool trans_b, T* c) {
  if (n == 0 || m == 0 || k == 0) return;
#ifdef DEAOT_USE_CBLAS
  if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
    const auto ta = trans_a ? CblasTrans : CblasNoTrans, tb = trans_b ? CblasTrans : CblasNoTrans;
    const auto ni = static_cast<blasint>(n), ki = static_cast<blasint>(k), mi = static_cast<blasint>(m);
    const blasint lda = trans_a ? ni : ki, ldb = trans_b ? ki : mi;
    if constexpr (std::is_same_v<T, float>)
      cblas_sgemm(CblasRowMajor, ta, tb, ni, mi, ki, 1.0f, a, lda, b, ldb, 1.0f, c, mi);
    else
      cblas_dgemm(CblasRowMajor, ta, tb, ni, mi, ki, 1.0, a, lda, b, ldb, 1.0, c, mi);
    return;
  }
#endif
  std::vector<T> a_buf, b_buf;
  if (trans_a) {
    a_buf = transposed(a, k, n);
    a = a_buf.data();
  }
  if (trans_b) {
    b_buf = transposed(b, m, k);
    b = b_buf.data();
  }
  gemm_nn_portable(n, k, m, a, b, c);
}

template <typename T>
void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const T* a, const T* b, T* c) {
  gemm(n, k, m, a, false, b, false, c);
}

template <typename T>
void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape new_shape) const {
  if (shape_numel(new_shape) != numel())
    throw DimensionError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
  auto in = node_;
  return detail::make_result<T>(std::move(new_shape), node_->data, {this},
                                [in](detail::Node<T>& self) {
                                  detail::accumulate(in->ensure_grad(), self.grad);
                                });
}

// ---------------------------------------------------------------------------
// Reverse pass

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (node->backward && node->has_grad()) node->backward(*node);
  }
  for (NodeT* node : order) {
    if (!node->backward) continue;  // leaves keep their gradients
    node->backward = nullptr;
    node->parents.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

// ---------------------------------------------------------------------------
// Element-wise arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto na = a.node(), nb = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b},
                                [na, nb](detail::Node<T>& self) {
                                  if (na->requires_grad) detail::accumulate(na->ensure_grad(), self.grad);
                                  if (nb->requires_grad) detail::accumulate(nb->ensure_grad(), self.grad);
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto na = a.node(), nb = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b},
                                [na, nb](detail::Node<T>& self) {
                                  if (na->requires_grad) detail::accumulate(na->ensure_grad(), self.grad);
                                  if (nb->requires_grad) {
                                    auto& g = nb->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                                  }
                                });
}

// Hadamard product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto na = a.node(), nb = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b},
                                [na, nb](detail::Node<T>& self) {
                                  if (na->requires_grad) {
                                    auto& g = na->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb->data[i];
                                  }
                                  if (nb->requires_grad) {
                                    auto& g = nb->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na->data[i];
                                  }
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  auto na = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a},
                                [na, factor](detail::Node<T>& self) {
                                  auto& g = na->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  auto na = a.node();
  return detail::make_result<T>({1}, {total}, {&a}, [na](detail::Node<T>& self) {
    auto& g = na->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Matrix ops (2-D tensors; a leading shape of [n, ...] is treated as n rows)

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<T> out(n * m, T(0));
  detail::gemm_nn(n, k, m, a.data().data(), b.data().data(), out.data());
  auto na = a.node(), nb = b.node();
  return detail::make_result<T>({n, m}, std::move(out), {&a, &b},
                                [na, nb, n, k, m](detail::Node<T>& self) {
                                  if (na->requires_grad)  // dA = dC * B^T
                                    detail::gemm(n, m, k, self.grad.data(), false, nb->data.data(), true,
                                                 na->ensure_grad().data());
                                  if (nb->requires_grad)  // dB = A^T * dC
                                    detail::gemm(k, n, m, na->data.data(), true, self.grad.data(), false,
                                                 nb->ensure_grad().data());
                                });
}

// a * b^T for a [n x k], b [m x k].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw DimensionError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
  std::vector<T> out(n * m, T(0));
  detail::gemm(n, k, m, a.data().data(), false, b.data().data(), true, out.data());
  auto na = a.node(), nb = b.node();
  return detail::make_result<T>({n, m}, std::move(out), {&a, &b},
                                [na, nb, n, k, m](detail::Node<T>& self) {
                                  if (na->requires_grad)  // dA = dC * B
                                    detail::gemm(n, m, k, self.grad.data(), false, nb->data.data(), false,
                                                 na->ensure_grad().data());
                                  if (nb->requires_grad)  // dB = dC^T * A
                                    detail::gemm(m, n, k, self.grad.data(), true, na->data.data(), false,
                                                 nb->ensure_grad().data());
                                });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.ndim() != 2) throw DimensionError("transpose needs a matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto na = a.node();
  return detail::make_result<T>({c, r}, detail::transposed(a.data().data(), r, c), {&a},
                                [na, r, c](detail::Node<T>& self) {
                                  auto& g = na->ensure_grad();
                                  for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
                                });
}

// Channel (column) concatenation of [n x c1] and [n x c2].
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0))
    throw DimensionError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t n = a.dim(0), c1 = a.dim(1), c2 = b.dim(1), c = c1 + c2;
  std::vector<T> out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * c1, c1, out.data() + i * c);
    std::copy_n(b.data().data() + i * c2, c2, out.data() + i * c + c1);
  }
  auto na = a.node(), nb = b.node();
  return detail::make_result<T>({n, c}, std::move(out), {&a, &b},
                                [na, nb, n, c1, c2, c](detail::Node<T>& self) {
                                  if (na->requires_grad) {
                                    auto& g = na->ensure_grad();
                                    for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t j = 0; j < c1; ++j) g[i * c1 + j] += self.grad[i * c + j];
                                  }
                                  if (nb->requires_grad) {
                                    auto& g = nb->ensure_grad();
                                    for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t j = 0; j < c2; ++j)
                                        g[i * c2 + j] += self.grad[i * c + c1 + j];
                                  }
                                });
}

// Row concatenation of matrices with equal column counts.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  if (parts.size() == 1) return parts.front();
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(1) != c) throw DimensionError("concat_rows: column mismatch");
    total += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(total * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor<T> result({total, c}, std::move(out));
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parts) needs = needs || p.requires_grad();
  if (needs) {
    auto& node = *result.node();
    node.requires_grad = true;
    std::vector<std::shared_ptr<detail::Node<T>>> inputs;
    for (const auto& p : parts) inputs.push_back(p.node());
    for (const auto& p : parts)
      if (p.requires_grad()) node.parents.push_back(p.node());
    node.backward = [inputs](detail::Node<T>& self) {
      std::size_t offset = 0;
      for (const auto& in : inputs) {
        if (in->requires_grad) {
          auto& g = in->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
        }
        offset += in->data.size();
      }
    };
  }
  return result;
}

// Columns [begin, begin + count) of a matrix.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t count) {
  if (a.ndim() != 2 || begin + count > a.dim(1))
    throw DimensionError("slice_cols out of range on " + shape_str(a.shape()));
  const std::size_t n = a.dim(0), c = a.dim(1);
  std::vector<T> out(n * count);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(a.data().data() + i * c + begin, count, out.data() + i * count);
  auto na = a.node();
  return detail::make_result<T>({n, count}, std::move(out), {&a},
                                [na, n, c, begin, count](detail::Node<T>& self) {
                                  auto& g = na->ensure_grad();
                                  for (std::size_t i = 0; i < n; ++i)
                                    for (std::size_t j = 0; j < count; ++j)
                                      g[i * c + begin + j] += self.grad[i * count + j];
                                });
}

// Rows [begin, begin + count) of a matrix.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t count) {
  if (a.ndim() != 2 || begin + count > a.dim(0))
    throw DimensionError("slice_rows out of range on " + shape_str(a.shape()));
  const std::size_t c = a.dim(1);
  std::vector<T> out(a.data().begin() + begin * c, a.data().begin() + (begin + count) * c);
  auto na = a.node();
  return detail::make_result<T>({count, c}, std::move(out), {&a},
                                [na, begin, c](detail::Node<T>& self) {
                                  auto& g = na->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * c + i] += self.grad[i];
                                });
}

// out[i] = table[index[i]] (row lookup); gradients scatter-add into the table.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::vector<std::size_t> index) {
  if (table.ndim() != 2) throw DimensionError("gather_rows needs a matrix table");
  const std::size_t rows = table.dim(0), c = table.dim(1);
  std::vector<T> out(index.size() * c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) throw IdentityError("gather_rows index " + std::to_string(index[i]) + " >= " + std::to_string(rows));
    std::copy_n(table.data().data() + index[i] * c, c, out.data() + i * c);
  }
  auto nt = table.node();
  const std::size_t n = index.size();
  return detail::make_result<T>({n, c}, std::move(out), {&table},
                                [nt, idx = std::move(index), c](detail::Node<T>& self) {
                                  auto& g = nt->ensure_grad();
                                  for (std::size_t i = 0; i < idx.size(); ++i)
                                    for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
                                });
}

// Row-wise softmax of (factor * a), stabilized by subtracting the row max.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a, T factor = T(1)) {
  if (a.ndim() < 1) throw DimensionError("softmax_rows needs rows");
  const std::size_t m = a.shape().back();
  const std::size_t n = m == 0 ? 0 : a.numel() / m;
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < n; ++i) {
    const T* x = a.data().data() + i * m;
    T* y = out.data() + i * m;
    T top = x[0];
    for (std::size_t j = 1; j < m; ++j) top = std::max(top, x[j]);
    T total = T(0);
    for (std::size_t j = 0; j < m; ++j) {
      y[j] = std::exp(factor * (x[j] - top));
      total += y[j];
    }
    const T inv = T(1) / total;
    for (std::size_t j = 0; j < m; ++j) y[j] *= inv;
  }
  auto na = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a},
                                [na, n, m, factor](detail::Node<T>& self) {
                                  auto& g = na->ensure_grad();
                                  for (std::size_t i = 0; i < n; ++i) {
                                    const T* y = self.data.data() + i * m;
                                    const T* dy = self.grad.data() + i * m;
                                    T dot = T(0);
                                    for (std::size_t j = 0; j < m; ++j) dot += y[j] * dy[j];
                                    for (std::size_t j = 0; j < m; ++j) g[i * m + j] += factor * y[j] * (dy[j] - dot);
                                  }
                                });
}

// Converts between precisions; the result is a fresh leaf.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& a) {
  std::vector<To> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(a[i]);
  return Tensor<To>(a.shape(), std::move(out));
}

template <typename T>
bool all_finite(const Tensor<T>& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace deaot
