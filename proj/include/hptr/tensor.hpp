// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with a small differentiable op set and
// reverse-mode gradient accumulation.
//
// A Tensor is a shared handle to a node. Ops record their parents and a
// backward closure only when grad mode is on and some input requires grad,
// so inference paths never hold on to the graph.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace hptr {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t numel_of(const Shape& shape);

/// Live and peak bytes held by tensor value and grad buffers on this thread.
struct MemoryStats {
  std::size_t live_bytes = 0;
  std::size_t peak_bytes = 0;
};

class MemoryTracker {
 public:
  static void allocate(std::size_t bytes);
  static void release(std::size_t bytes);
  static MemoryStats stats();
  /// Sets peak to the current live size.
  static void reset_peak();
};

/// Counts matmul floating-point operations (2 per multiply-add) on this thread.
class FlopCounter {
 public:
  static void add(std::uint64_t flops);
  static std::uint64_t count();
  static void reset();
};

class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Row-major integer matrix used for gather indices.
struct IndexMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int64_t> data;

  IndexMatrix() = default;
  IndexMatrix(std::size_t r, std::size_t c, std::int64_t fill = 0)
      : rows(r), cols(c), data(r * c, fill) {}
  std::int64_t& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  std::int64_t at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

/// Boolean array stored one byte per element.
using Mask = std::vector<std::uint8_t>;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  /// Reads this node's grad and accumulates into the parents' grads.
  std::function<void(TensorNode&)> backward;

  TensorNode(Shape s, std::vector<T> v);
  ~TensorNode();
  TensorNode(const TensorNode&) = delete;
  TensorNode& operator=(const TensorNode&) = delete;

  /// Allocates a zeroed grad buffer if absent.
  std::vector<T>& ensure_grad();
  bool is_leaf() const { return !backward; }
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T fill, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const T> data() const;
  /// Direct write access, for parameter updates and test perturbations.
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const T> grad() const;
  void zero_grad();

  /// Runs reverse-mode accumulation from this scalar root.
  void backward() const;
  /// Same values, no graph history.
  Tensor detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds a result node. `backward` is attached only if grad mode is on and
/// some parent requires grad. Exposed so tests and callers can define ops.
template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& parents,
                  std::function<void(TensorNode<T>&)> backward);

// Contraction over the last axis of `a` and the second-to-last of `b`.
// Leading dimensions must be equal, or one side must be 2-D.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Binary elementwise ops. Shapes must be equal, one side a scalar, or the
// smaller shape a suffix of the larger one (leading-dimension expansion).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sin(const Tensor<T>& x);
template <typename T>
Tensor<T> cos(const Tensor<T>& x);
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
/// Throws DomainError on any non-positive input.
template <typename T>
Tensor<T> log(const Tensor<T>& x);
template <typename T>
Tensor<T> tanh(const Tensor<T>& x);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset);
/// Elementwise clamp to [lo, hi], composed from relu so kinks follow relu's rule.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);

/// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5));

/// out[m, k, ...] = src[idx(m, k), ...]; backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& src, const IndexMatrix& idx);

/// Max over axis -2 restricted to rows with mask set. mask has the shape of
/// x without its last axis.
template <typename T>
Tensor<T> masked_max(const Tensor<T>& x, const Mask& mask);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);

/// Inverted dropout. Identity when `training` is false or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::mt19937_64& rng);

/// Converts between precisions; the result is a detached leaf.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> v(x.numel());
  auto src = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<To>(src[i]);
  return Tensor<To>::from(x.shape(), std::move(v), x.requires_grad());
}

}  // namespace hptr
