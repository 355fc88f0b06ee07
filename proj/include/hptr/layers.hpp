// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "hptr/tensor.hpp"
#include "hptr/weight_store.hpp"

namespace hptr {

/// Either creates freshly initialized parameters in a store, or binds to
/// parameters that already exist there (checking shapes).
template <typename T>
class ParamBuilder {
 public:
  enum class Mode { kInitialize, kBind };

  ParamBuilder(WeightStore<T>& store, Mode mode, std::uint64_t seed = 0)
      : store_(store), mode_(mode), rng_(seed) {}

  /// Xavier-uniform [in, out] matrix, scaled by `gain`.
  Tensor<T> matrix(const std::string& name, std::size_t in, std::size_t out, double gain = 1.0);
  Tensor<T> zeros(const std::string& name, Shape shape);
  Tensor<T> ones(const std::string& name, Shape shape);
  /// Xavier-uniform over a [.., fan_in, fan_out]-style tensor, times `gain`.
  Tensor<T> xavier(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out,
                   double gain);

  /// Number of tensors created or bound so far.
  std::size_t requested() const { return requested_; }

 private:
  Tensor<T> fetch(const std::string& name, const Shape& shape);

  WeightStore<T>& store_;
  Mode mode_;
  std::mt19937_64 rng_;
  std::size_t requested_ = 0;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  static Linear build(ParamBuilder<T>& pb, const std::string& name, std::size_t in,
                      std::size_t out);
  /// x[.., in] -> [.., out]
  Tensor<T> operator()(const Tensor<T>& x) const;
};

/// Three linear layers with relu between them (none after the last).
template <typename T>
struct Mlp3 {
  Linear<T> l0, l1, l2;

  static Mlp3 build(ParamBuilder<T>& pb, const std::string& name, std::size_t in,
                    std::size_t hidden, std::size_t out);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;

  static LayerNormParams build(ParamBuilder<T>& pb, const std::string& name, std::size_t dim);
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias, T(1e-5)); }
};

/// Training flag and dropout RNG threaded through a forward pass.
struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

}  // namespace hptr
