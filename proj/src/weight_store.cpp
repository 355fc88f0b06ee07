// SPDX-License-Identifier: Apache-2.0
#include "hptr/weight_store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"

#include "hptr/error.hpp"

namespace hptr {

namespace {

constexpr const char* kMagic = "HPTR-WEIGHTS";
constexpr int kVersion = 1;

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

void put_f32le(std::vector<unsigned char>& out, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xffu));
}

float get_f32le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

template <typename T>
Tensor<T>& WeightStore<T>::add(const std::string& name, Tensor<T> tensor) {
  if (index_.count(name)) throw ContractError("duplicate weight name: " + name);
  index_[name] = tensors_.size();
  names_.push_back(name);
  tensors_.push_back(std::move(tensor));
  return tensors_.back();
}

template <typename T>
const Tensor<T>& WeightStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown weight: " + name);
  return tensors_[it->second];
}

template <typename T>
Tensor<T>& WeightStore<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown weight: " + name);
  return tensors_[it->second];
}

template <typename T>
std::size_t WeightStore<T>::total_elements() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

template <typename T>
void WeightStore<T>::set_requires_grad(bool on) {
  for (auto& t : tensors_) t.set_requires_grad(on);
}

template <typename T>
void WeightStore<T>::zero_grad() {
  for (auto& t : tensors_) t.zero_grad();
}

std::uint64_t fnv1a64(const std::vector<unsigned char>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

template <typename T>
void save_weights(const std::filesystem::path& path, const WeightStore<T>& store) {
  std::vector<unsigned char> payload;
  payload.reserve(store.total_elements() * 4);
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& name : store.names()) {
    const auto& t = store.get(name);
    entries.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"count", t.numel()},
                       {"offset", payload.size()}});
    for (T v : t.data()) put_f32le(payload, static_cast<float>(v));
  }
  nlohmann::json header = {{"dtype", "f32le"},
                           {"payload_bytes", payload.size()},
                           {"checksum", hex64(fnv1a64(payload))},
                           {"tensors", entries}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << kMagic << ' ' << kVersion << ' ' << text.size() << '\n' << text;
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  if (!out) throw Error("failed writing " + path.string());
}

template <typename T>
WeightStore<T> load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open weights file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw CorruptionError("empty weights file");
  std::istringstream first(line);
  std::string magic;
  int version = 0;
  std::size_t header_bytes = 0;
  if (!(first >> magic >> version >> header_bytes) || magic != kMagic) {
    throw CorruptionError("bad weights magic line: " + line);
  }
  if (version != kVersion) {
    throw CorruptionError("unsupported weights version " + std::to_string(version));
  }
  std::string text(header_bytes, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_bytes));
  if (static_cast<std::size_t>(in.gcount()) != header_bytes) {
    throw CorruptionError("truncated weights header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("unparseable weights header: ") + e.what());
  }
  std::vector<unsigned char> payload((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
  const std::size_t declared = header.at("payload_bytes").get<std::size_t>();
  if (payload.size() != declared) {
    throw CorruptionError("payload is " + std::to_string(payload.size()) + " bytes, header says " +
                          std::to_string(declared));
  }
  if (header.at("checksum").get<std::string>() != hex64(fnv1a64(payload))) {
    throw CorruptionError("payload checksum mismatch");
  }
  WeightStore<T> store;
  std::size_t expected_offset = 0;
  for (const auto& e : header.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    const auto count = e.at("count").get<std::size_t>();
    const auto offset = e.at("offset").get<std::size_t>();
    if (count != numel_of(shape) || offset != expected_offset || offset + 4 * count > declared) {
      throw CorruptionError("inconsistent manifest entry for " + name);
    }
    std::vector<T> values(count);
    for (std::size_t i = 0; i < count; ++i) {
      values[i] = static_cast<T>(get_f32le(payload.data() + offset + 4 * i));
    }
    store.add(name, Tensor<T>::from(shape, std::move(values)));
    expected_offset += 4 * count;
  }
  if (expected_offset != declared) throw CorruptionError("payload has unlisted trailing bytes");
  return store;
}

template class WeightStore<float>;
template class WeightStore<double>;
template void save_weights<float>(const std::filesystem::path&, const WeightStore<float>&);
template void save_weights<double>(const std::filesystem::path&, const WeightStore<double>&);
template WeightStore<float> load_weights<float>(const std::filesystem::path&);
template WeightStore<double> load_weights<double>(const std::filesystem::path&);

}  // namespace hptr
