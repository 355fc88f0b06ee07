// SPDX-License-Identifier: Apache-2.0
#include "hptr/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "hptr/error.hpp"

namespace hptr {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

thread_local MemoryStats g_memory;
thread_local std::uint64_t g_flops = 0;
thread_local bool g_grad_enabled = true;

}  // namespace

void MemoryTracker::allocate(std::size_t bytes) {
  g_memory.live_bytes += bytes;
  g_memory.peak_bytes = std::max(g_memory.peak_bytes, g_memory.live_bytes);
}

void MemoryTracker::release(std::size_t bytes) {
  g_memory.live_bytes -= std::min(bytes, g_memory.live_bytes);
}

MemoryStats MemoryTracker::stats() { return g_memory; }

void MemoryTracker::reset_peak() { g_memory.peak_bytes = g_memory.live_bytes; }

void FlopCounter::add(std::uint64_t flops) { g_flops += flops; }
std::uint64_t FlopCounter::count() { return g_flops; }
void FlopCounter::reset() { g_flops = 0; }

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

// ---------------------------------------------------------------------------
// Node / handle

template <typename T>
TensorNode<T>::TensorNode(Shape s, std::vector<T> v) : shape(std::move(s)), value(std::move(v)) {
  if (numel_of(shape) != value.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(value.size()) + " values");
  }
  MemoryTracker::allocate(value.size() * sizeof(T));
}

template <typename T>
TensorNode<T>::~TensorNode() {
  MemoryTracker::release((value.size() + grad.size()) * sizeof(T));
}

template <typename T>
std::vector<T>& TensorNode<T>::ensure_grad() {
  if (grad.size() != value.size()) {
    grad.assign(value.size(), T(0));
    MemoryTracker::allocate(grad.size() * sizeof(T));
  }
  return grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T fill, bool requires_grad) {
  const std::size_t n = numel_of(shape);
  return from(std::move(shape), std::vector<T>(n, fill), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  auto node = std::make_shared<Node>(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return node_ ? node_->value.size() : 0;
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->value;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  if (!node_) throw ContractError("use of an undefined tensor");
  node_->requires_grad = on;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return node_ && node_->grad.size() == node_->value.size();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw ContractError("tensor has no grad buffer");
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::backward() const {
  if (!node_) throw ContractError("backward on an undefined tensor");
  if (node_->value.size() != 1) {
    throw ContractError("backward requires a scalar root, got shape " + shape_str(node_->shape));
  }
  // Iterative post-order DFS gives a topological order with parents first.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  // Interior grads are per-pass; leaves accumulate across passes.
  for (Node* n : order) {
    if (!n->is_leaf()) {
      auto& g = n->ensure_grad();
      std::fill(g.begin(), g.end(), T(0));
    }
  }
  node_->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), node_->value, false);
}

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& parents,
                  std::function<void(TensorNode<T>&)> backward) {
  auto node = std::make_shared<TensorNode<T>>(std::move(shape), std::move(value));
  if (GradMode::enabled()) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor<T>& p) { return p.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->backward = std::move(backward);
      for (const auto& p : parents) node->parents.push_back(p.node_ptr());
    }
  }
  return Tensor<T>(std::move(node));
}

namespace {

// ---------------------------------------------------------------------------
// matmul

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

}  // namespace

template <typename T>
static Tensor<T> matmul_core(const Tensor<T>& a, const Tensor<T>& b, Shape out_shape,
                             std::vector<T> out, std::size_t batch, std::size_t m, std::size_t k,
                             std::size_t n, bool a_batched, bool b_batched);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&]() {
    return DimensionError("matmul shape mismatch: " + shape_str(sa) + " x " + shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) throw fail();
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t kb = sb[sb.size() - 2], n = sb.back();
  if (k != kb) throw fail();
  const Shape lead_a(sa.begin(), sa.end() - 2);
  const Shape lead_b(sb.begin(), sb.end() - 2);
  Shape lead;
  if (lead_a == lead_b || lead_b.empty()) {
    lead = lead_a;
  } else if (lead_a.empty()) {
    lead = lead_b;
  } else {
    throw fail();
  }
  const std::size_t batch = numel_of(lead);
  const bool a_batched = !lead_a.empty();
  const bool b_batched = !lead_b.empty();
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(batch * m * n);
  FlopCounter::add(2ull * batch * m * k * n);
  // A shared right operand lets the batch fold into one tall product.
  const bool fold = a_batched && !b_batched;
  const std::size_t gb = fold ? 1 : batch;
  const std::size_t gm = fold ? batch * m : m;
  return matmul_core<T>(a, b, std::move(out_shape), std::move(out), gb, gm, k, n, a_batched && !fold,
                        b_batched);
}

template <typename T>
static Tensor<T> matmul_core(const Tensor<T>& a, const Tensor<T>& b, Shape out_shape,
                             std::vector<T> out, std::size_t batch, std::size_t m, std::size_t k,
                             std::size_t n, bool a_batched, bool b_batched) {
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    MapC<T> ma(pa + (a_batched ? i * m * k : 0), m, k);
    MapC<T> mb(pb + (b_batched ? i * k * n : 0), k, n);
    MapM<T> mo(out.data() + i * m * n, m, n);
    mo.noalias() = ma * mb;
  }

  auto na = a.node_ptr().get();
  auto nb = b.node_ptr().get();
  return make_op<T>(std::move(out_shape), std::move(out), {a, b},
                    [na, nb, batch, m, k, n, a_batched, b_batched](TensorNode<T>& self) {
                      const T* g = self.grad.data();
                      if (na->requires_grad) {
                        auto& ga = na->ensure_grad();
                        for (std::size_t i = 0; i < batch; ++i) {
                          MapC<T> mg(g + i * m * n, m, n);
                          MapC<T> mb(nb->value.data() + (b_batched ? i * k * n : 0), k, n);
                          MapM<T> mga(ga.data() + (a_batched ? i * m * k : 0), m, k);
                          mga.noalias() += mg * mb.transpose();
                        }
                      }
                      if (nb->requires_grad) {
                        auto& gb = nb->ensure_grad();
                        for (std::size_t i = 0; i < batch; ++i) {
                          MapC<T> mg(g + i * m * n, m, n);
                          MapC<T> ma(na->value.data() + (a_batched ? i * m * k : 0), m, k);
                          MapM<T> mgb(gb.data() + (b_batched ? i * k * n : 0), k, n);
                          mgb.noalias() += ma.transpose() * mg;
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// binary elementwise

namespace {

enum class BinOp { kAdd, kSub, kMul };

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// An operand of `size` elements is either the full output, a suffix repeated
// across it, or a scalar. Calls f(out_offset, a_offset, b_offset, len) over
// contiguous runs; within a run a scalar operand stays at its offset.
template <typename F>
void for_each_pair(std::size_t n, std::size_t na, std::size_t nb, F&& f) {
  if (n == 0) return;
  const std::size_t run = std::max<std::size_t>(std::min(na == 1 ? n : na, nb == 1 ? n : nb), 1);
  for (std::size_t o = 0; o < n; o += run) {
    f(o, na == 1 ? 0 : o % na, nb == 1 ? 0 : o % nb, std::min(run, n - o));
  }
}

inline bool ia_scalar(std::size_t size, std::size_t len) { return size == 1 && len > 1; }

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp op, const char* name) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  Shape out_shape;
  if (sa == sb || b.numel() == 1 || is_suffix(sb, sa)) {
    out_shape = sa;
  } else if (a.numel() == 1 || is_suffix(sa, sb)) {
    out_shape = sb;
  } else {
    throw DimensionError(std::string(name) + " shape mismatch: " + shape_str(sa) + " vs " +
                         shape_str(sb));
  }
  const std::size_t n = numel_of(out_shape);
  const std::size_t na_ = a.numel(), nb_ = b.numel();
  std::vector<T> out(n);
  for_each_pair(n, na_, nb_, [&](std::size_t o, std::size_t ia, std::size_t ib, std::size_t len) {
    const T* x = a.data().data() + ia;
    const T* y = b.data().data() + ib;
    T* z = out.data() + o;
    const bool sx = ia_scalar(na_, len), sy = ia_scalar(nb_, len);
    switch (op) {
      case BinOp::kAdd:
        for (std::size_t j = 0; j < len; ++j) z[j] = x[sx ? 0 : j] + y[sy ? 0 : j];
        break;
      case BinOp::kSub:
        for (std::size_t j = 0; j < len; ++j) z[j] = x[sx ? 0 : j] - y[sy ? 0 : j];
        break;
      case BinOp::kMul:
        for (std::size_t j = 0; j < len; ++j) z[j] = x[sx ? 0 : j] * y[sy ? 0 : j];
        break;
    }
  });
  auto ra = a.node_ptr().get();
  auto rb = b.node_ptr().get();
  return make_op<T>(
      std::move(out_shape), std::move(out), {a, b}, [ra, rb, op, n, na_, nb_](TensorNode<T>& self) {
        const bool need_a = ra->requires_grad, need_b = rb->requires_grad;
        T* ga = need_a ? ra->ensure_grad().data() : nullptr;
        T* gb = need_b ? rb->ensure_grad().data() : nullptr;
        for_each_pair(n, na_, nb_, [&](std::size_t o, std::size_t ia, std::size_t ib,
                                       std::size_t len) {
          const T* g = self.grad.data() + o;
          const bool sx = ia_scalar(na_, len), sy = ia_scalar(nb_, len);
          if (need_a) {
            T* d = ga + ia;
            const T* other = rb->value.data() + ib;
            for (std::size_t j = 0; j < len; ++j) {
              const T v = op == BinOp::kMul ? g[j] * other[sy ? 0 : j] : g[j];
              d[sx ? 0 : j] += v;
            }
          }
          if (need_b) {
            T* d = gb + ib;
            const T* other = ra->value.data() + ia;
            for (std::size_t j = 0; j < len; ++j) {
              T v = op == BinOp::kMul ? g[j] * other[sx ? 0 : j] : g[j];
              if (op == BinOp::kSub) v = -v;
              d[sy ? 0 : j] += v;
            }
          }
        });
      });
}

// Unary op from a value function and a derivative expressed in (x, y).
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  const auto src = x.data();
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = f(src[i]);
  auto rx = x.node_ptr().get();
  return make_op<T>(x.shape(), std::move(out), {x}, [rx, df](TensorNode<T>& self) {
    auto& gx = rx->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += self.grad[i] * df(rx->value[i], self.value[i]);
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::kAdd, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::kSub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::kMul, "mul");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sin(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return std::sin(v); }, [](T v, T) { return std::cos(v); });
}

template <typename T>
Tensor<T> cos(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return std::cos(v); }, [](T v, T) { return -std::sin(v); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  for (T v : x.data()) {
    if (!(v > T(0))) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return unary(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(
      x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return unary(
      x, [offset](T v) { return v + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  // lo + relu(x - lo) - relu(x - hi)
  auto lower = relu(add_scalar(x, -lo));
  auto upper = relu(add_scalar(x, -hi));
  return add_scalar(sub(lower, upper), lo);
}

// ---------------------------------------------------------------------------
// softmax / layer norm

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) {
    throw DimensionError("softmax axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  }
  const std::size_t len = s[axis];
  const std::size_t inner = numel_of(Shape(s.begin() + axis + 1, s.end()));
  const std::size_t outer = numel_of(Shape(s.begin(), s.begin() + axis));
  const auto src = x.data();
  std::vector<T> out(src.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, src[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(src[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  auto rx = x.node_ptr().get();
  return make_op<T>(s, std::move(out), {x}, [rx, outer, inner, len](TensorNode<T>& self) {
    auto& gx = rx->ensure_grad();
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t p = base + j * inner;
          gx[p] += y[p] * (g[p] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("layer_norm on a scalar");
  const std::size_t d = s.back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm affine shapes " + shape_str(gain.shape()) + ", " +
                         shape_str(bias.shape()) + " do not match last axis of " + shape_str(s));
  }
  const std::size_t rows = x.numel() / d;
  const auto src = x.data();
  const auto g = gain.data();
  const auto b = bias.data();
  std::vector<T> out(src.size());
  std::vector<T> xhat(src.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = src.data() + r * d;
    T mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= T(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= T(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      const std::size_t p = r * d + i;
      xhat[p] = (row[i] - mu) * rstd[r];
      out[p] = xhat[p] * g[i] + b[i];
    }
  }
  auto rx = x.node_ptr().get();
  auto rg = gain.node_ptr().get();
  auto rb = bias.node_ptr().get();
  return make_op<T>(s, std::move(out), {x, gain, bias},
                    [rx, rg, rb, rows, d, xhat = std::move(xhat),
                     rstd = std::move(rstd)](TensorNode<T>& self) {
                      const auto& gy = self.grad;
                      if (rg->requires_grad || rb->requires_grad) {
                        auto& gg = rg->ensure_grad();
                        auto& gb = rb->ensure_grad();
                        for (std::size_t r = 0; r < rows; ++r) {
                          for (std::size_t i = 0; i < d; ++i) {
                            gg[i] += gy[r * d + i] * xhat[r * d + i];
                            gb[i] += gy[r * d + i];
                          }
                        }
                      }
                      if (rx->requires_grad) {
                        auto& gx = rx->ensure_grad();
                        for (std::size_t r = 0; r < rows; ++r) {
                          T mean_dx = 0, mean_dx_xhat = 0;
                          for (std::size_t i = 0; i < d; ++i) {
                            const T dxh = gy[r * d + i] * rg->value[i];
                            mean_dx += dxh;
                            mean_dx_xhat += dxh * xhat[r * d + i];
                          }
                          mean_dx /= T(d);
                          mean_dx_xhat /= T(d);
                          for (std::size_t i = 0; i < d; ++i) {
                            const std::size_t p = r * d + i;
                            const T dxh = gy[p] * rg->value[i];
                            gx[p] += rstd[r] * (dxh - mean_dx - xhat[p] * mean_dx_xhat);
                          }
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// gather / pooling

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& src, const IndexMatrix& idx) {
  const Shape& s = src.shape();
  if (s.empty()) throw DimensionError("gather_rows on a scalar");
  const std::size_t n = s[0];
  const std::size_t width = src.numel() / std::max<std::size_t>(n, 1);
  for (auto i : idx.data) {
    if (i < 0 || static_cast<std::size_t>(i) >= n) {
      throw IndexError("gather index " + std::to_string(i) + " out of range [0, " +
                       std::to_string(n) + ")");
    }
  }
  Shape out_shape{idx.rows, idx.cols};
  out_shape.insert(out_shape.end(), s.begin() + 1, s.end());
  const auto values = src.data();
  std::vector<T> out(idx.data.size() * width);
  for (std::size_t p = 0; p < idx.data.size(); ++p) {
    std::copy_n(values.data() + idx.data[p] * width, width, out.data() + p * width);
  }
  auto rs = src.node_ptr().get();
  return make_op<T>(std::move(out_shape), std::move(out), {src},
                    [rs, idx, width](TensorNode<T>& self) {
                      auto& gs = rs->ensure_grad();
                      for (std::size_t p = 0; p < idx.data.size(); ++p) {
                        T* dst = gs.data() + idx.data[p] * width;
                        const T* g = self.grad.data() + p * width;
                        for (std::size_t c = 0; c < width; ++c) dst[c] += g[c];
                      }
                    });
}

template <typename T>
Tensor<T> masked_max(const Tensor<T>& x, const Mask& mask) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw DimensionError("masked_max needs rank >= 2, got " + shape_str(s));
  const std::size_t d = s.back();
  const std::size_t n = s[s.size() - 2];
  const std::size_t groups = x.numel() / (n * d);
  if (mask.size() != groups * n) {
    throw DimensionError("masked_max mask has " + std::to_string(mask.size()) +
                         " entries for input " + shape_str(s));
  }
  Shape out_shape(s.begin(), s.end() - 2);
  out_shape.push_back(d);
  const auto src = x.data();
  std::vector<T> out(groups * d);
  std::vector<std::size_t> arg(groups * d);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    bool any = false;
    for (std::size_t r = 0; r < n; ++r) {
      if (!mask[gi * n + r]) continue;
      const T* row = src.data() + (gi * n + r) * d;
      for (std::size_t c = 0; c < d; ++c) {
        if (!any || row[c] > out[gi * d + c]) {
          out[gi * d + c] = row[c];
          arg[gi * d + c] = (gi * n + r) * d + c;
        }
      }
      any = true;
    }
    if (!any) throw EmptyGroupError("masked_max group " + std::to_string(gi) + " has no valid rows");
  }
  auto rx = x.node_ptr().get();
  return make_op<T>(std::move(out_shape), std::move(out), {x},
                    [rx, arg = std::move(arg)](TensorNode<T>& self) {
                      auto& gx = rx->ensure_grad();
                      for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += self.grad[i];
                    });
}

// ---------------------------------------------------------------------------
// reductions and structure

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  auto rx = x.node_ptr().get();
  return make_op<T>({}, {total}, {x}, [rx](TensorNode<T>& self) {
    auto& gx = rx->ensure_grad();
    for (auto& g : gx) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(std::max<std::size_t>(x.numel(), 1)));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  const auto src = x.data();
  auto rx = x.node_ptr().get();
  return make_op<T>(std::move(shape), std::vector<T>(src.begin(), src.end()), {x},
                    [rx](TensorNode<T>& self) {
                      auto& gx = rx->ensure_grad();
                      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                    });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order) {
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  std::vector<bool> used(r, false);
  if (order.size() != r) throw DimensionError("permute order rank mismatch for " + shape_str(s));
  for (auto o : order) {
    if (o >= r || used[o]) throw DimensionError("invalid permutation for " + shape_str(s));
    used[o] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[order[i]];
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  // Source offset for each output element, walked with an odometer.
  const std::size_t n = x.numel();
  std::vector<std::size_t> src_index(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    src_index[i] = offset;
    for (std::size_t ax = r; ax-- > 0;) {
      ++counter[ax];
      offset += in_stride[order[ax]];
      if (counter[ax] < out_shape[ax]) break;
      offset -= in_stride[order[ax]] * out_shape[ax];
      counter[ax] = 0;
    }
  }
  const auto src = x.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = src[src_index[i]];
  auto rx = x.node_ptr().get();
  return make_op<T>(std::move(out_shape), std::move(out), {x},
                    [rx, src_index = std::move(src_index)](TensorNode<T>& self) {
                      auto& gx = rx->ensure_grad();
                      for (std::size_t i = 0; i < src_index.size(); ++i) {
                        gx[src_index[i]] += self.grad[i];
                      }
                    });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat axis out of range for " + shape_str(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) {
      throw DimensionError("concat shape mismatch: " + shape_str(s0) + " vs " + shape_str(s));
    }
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = numel_of(Shape(s0.begin(), s0.begin() + axis));
  const std::size_t inner = numel_of(Shape(s0.begin() + axis + 1, s0.end()));
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<T> out(numel_of(out_shape));
  std::vector<std::size_t> widths;
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * inner;
    const auto src = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * w, w, out.data() + o * out_row + col);
    }
    widths.push_back(w);
    col += w;
  }
  std::vector<TensorNode<T>*> raw;
  for (const auto& p : parts) raw.push_back(p.node());
  return make_op<T>(std::move(out_shape), std::move(out), parts,
                    [raw, widths, outer, out_row](TensorNode<T>& self) {
                      std::size_t c = 0;
                      for (std::size_t i = 0; i < raw.size(); ++i) {
                        const std::size_t w = widths[i];
                        if (raw[i]->requires_grad) {
                          auto& g = raw[i]->ensure_grad();
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t j = 0; j < w; ++j) {
                              g[o * w + j] += self.grad[o * out_row + c + j];
                            }
                          }
                        }
                        c += w;
                      }
                    });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) {
    throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") on axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  }
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  const std::size_t outer = numel_of(Shape(s.begin(), s.begin() + axis));
  const std::size_t inner = numel_of(Shape(s.begin() + axis + 1, s.end()));
  const std::size_t in_row = s[axis] * inner;
  const std::size_t w = (end - begin) * inner;
  const std::size_t off = begin * inner;
  const auto src = x.data();
  std::vector<T> out(outer * w);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src.data() + o * in_row + off, w, out.data() + o * w);
  }
  auto rx = x.node_ptr().get();
  return make_op<T>(std::move(out_shape), std::move(out), {x},
                    [rx, outer, w, in_row, off](TensorNode<T>& self) {
                      auto& gx = rx->ensure_grad();
                      for (std::size_t o = 0; o < outer; ++o) {
                        for (std::size_t j = 0; j < w; ++j) {
                          gx[o * in_row + off + j] += self.grad[o * w + j];
                        }
                      }
                    });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::mt19937_64& rng) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw DomainError("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const T factor = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> m(x.numel());
  for (auto& v : m) v = keep(rng) ? factor : T(0);
  return mul(x, Tensor<T>::from(x.shape(), std::move(m)));
}

#define HPTR_INSTANTIATE(T)                                                                    \
  template struct TensorNode<T>;                                                               \
  template class Tensor<T>;                                                                    \
  template Tensor<T> make_op<T>(Shape, std::vector<T>, const std::vector<Tensor<T>>&,          \
                                std::function<void(TensorNode<T>&)>);                          \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                \
  template Tensor<T> sin<T>(const Tensor<T>&);                                                 \
  template Tensor<T> cos<T>(const Tensor<T>&);                                                 \
  template Tensor<T> exp<T>(const Tensor<T>&);                                                 \
  template Tensor<T> log<T>(const Tensor<T>&);                                                 \
  template Tensor<T> tanh<T>(const Tensor<T>&);                                                \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                            \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                       \
  template Tensor<T> clamp<T>(const Tensor<T>&, T, T);                                         \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                                \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);   \
  template Tensor<T> gather_rows<T>(const Tensor<T>&, const IndexMatrix&);                      \
  template Tensor<T> masked_max<T>(const Tensor<T>&, const Mask&);                             \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                 \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                      \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<std::size_t>&);            \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);                    \
  template Tensor<T> slice<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t);        \
  template Tensor<T> dropout<T>(const Tensor<T>&, double, bool, std::mt19937_64&);

HPTR_INSTANTIATE(float)
HPTR_INSTANTIATE(double)

#undef HPTR_INSTANTIATE

}  // namespace hptr
