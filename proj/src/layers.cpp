// SPDX-License-Identifier: Apache-2.0
#include "hptr/layers.hpp"

#include <cmath>

#include "hptr/error.hpp"

namespace hptr {

template <typename T>
Tensor<T> ParamBuilder<T>::fetch(const std::string& name, const Shape& shape) {
  const auto& t = store_.get(name);
  if (t.shape() != shape) {
    throw DimensionError("weight " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                         shape_str(shape));
  }
  return t;
}

template <typename T>
Tensor<T> ParamBuilder<T>::xavier(const std::string& name, Shape shape, std::size_t fan_in,
                                  std::size_t fan_out, double gain) {
  ++requested_;
  if (mode_ == Mode::kBind) return fetch(name, shape);
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng_));
  return store_.add(name, Tensor<T>::from(std::move(shape), std::move(v)));
}

template <typename T>
Tensor<T> ParamBuilder<T>::matrix(const std::string& name, std::size_t in, std::size_t out,
                                  double gain) {
  return xavier(name, {in, out}, in, out, gain);
}

template <typename T>
Tensor<T> ParamBuilder<T>::zeros(const std::string& name, Shape shape) {
  ++requested_;
  if (mode_ == Mode::kBind) return fetch(name, shape);
  return store_.add(name, Tensor<T>::zeros(std::move(shape)));
}

template <typename T>
Tensor<T> ParamBuilder<T>::ones(const std::string& name, Shape shape) {
  ++requested_;
  if (mode_ == Mode::kBind) return fetch(name, shape);
  return store_.add(name, Tensor<T>::full(std::move(shape), T(1)));
}

template <typename T>
Linear<T> Linear<T>::build(ParamBuilder<T>& pb, const std::string& name, std::size_t in,
                           std::size_t out) {
  Linear l;
  l.weight = pb.matrix(name + ".weight", in, out);
  l.bias = pb.zeros(name + ".bias", {out});
  return l;
}

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
  return add(matmul(x, weight), bias);
}

template <typename T>
Mlp3<T> Mlp3<T>::build(ParamBuilder<T>& pb, const std::string& name, std::size_t in,
                       std::size_t hidden, std::size_t out) {
  Mlp3 m;
  m.l0 = Linear<T>::build(pb, name + ".l0", in, hidden);
  m.l1 = Linear<T>::build(pb, name + ".l1", hidden, hidden);
  m.l2 = Linear<T>::build(pb, name + ".l2", hidden, out);
  return m;
}

template <typename T>
Tensor<T> Mlp3<T>::operator()(const Tensor<T>& x) const {
  return l2(relu(l1(relu(l0(x)))));
}

template <typename T>
LayerNormParams<T> LayerNormParams<T>::build(ParamBuilder<T>& pb, const std::string& name,
                                             std::size_t dim) {
  return {pb.ones(name + ".gain", {dim}), pb.zeros(name + ".bias", {dim})};
}

template class ParamBuilder<float>;
template class ParamBuilder<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct Mlp3<float>;
template struct Mlp3<double>;
template struct LayerNormParams<float>;
template struct LayerNormParams<double>;

}  // namespace hptr
