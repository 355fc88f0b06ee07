// SPDX-License-Identifier: Apache-2.0
//
// Named parameter tensors and their on-disk form.
//
// File layout:
//   line 1   "HPTR-WEIGHTS <version> <header_bytes>\n"
//   header   JSON object, exactly header_bytes long:
//              {"dtype": "f32le", "payload_bytes": N, "checksum": "<fnv1a64 hex>",
//               "tensors": [{"name", "shape", "count", "offset"}, ...]}
//   payload  little-endian IEEE-754 binary32 values, offsets in bytes
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hptr/tensor.hpp"

namespace hptr {

template <typename T>
class WeightStore {
 public:
  /// Registers a tensor; names must be unique.
  Tensor<T>& add(const std::string& name, Tensor<T> tensor);
  const Tensor<T>& get(const std::string& name) const;
  Tensor<T>& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  /// Names in registration order.
  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }
  std::size_t total_elements() const;

  void set_requires_grad(bool on);
  void zero_grad();

  template <typename U>
  WeightStore<U> cast() const {
    WeightStore<U> out;
    for (const auto& n : names_) out.add(n, hptr::cast<U>(get(n).detach()));
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(const std::vector<unsigned char>& bytes);

template <typename T>
void save_weights(const std::filesystem::path& path, const WeightStore<T>& store);

/// Throws CorruptionError on header/payload length or checksum mismatch.
template <typename T>
WeightStore<T> load_weights(const std::filesystem::path& path);

}  // namespace hptr
