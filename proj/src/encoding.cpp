// SPDX-License-Identifier: Apache-2.0
#include "hptr/encoding.hpp"

#include <cmath>
#include <string>

#include "hptr/error.hpp"

namespace hptr {

void EncodingConfig::validate() const {
  if (dim <= 0 || dim % 2 != 0) {
    throw ContractError("encoding dim must be even and positive, got " + std::to_string(dim));
  }
  if (!(omega > 0.0)) throw ContractError("encoding omega must be positive");
  if (pe_exponent_sign != 1 && pe_exponent_sign != -1) {
    throw ContractError("pe_exponent_sign must be +1 or -1");
  }
}

namespace {

std::vector<double> frequencies(const EncodingConfig& cfg) {
  std::vector<double> f(static_cast<std::size_t>(cfg.dim / 2));
  for (std::size_t i = 0; i < f.size(); ++i) {
    f[i] = std::pow(cfg.omega, cfg.pe_exponent_sign * 2.0 * static_cast<double>(i) /
                                   static_cast<double>(cfg.dim));
  }
  return f;
}

void pe_into(double x, const std::vector<double>& freqs, double* out) {
  for (std::size_t i = 0; i < freqs.size(); ++i) {
    out[2 * i] = std::sin(x * freqs[i]);
    out[2 * i + 1] = std::cos(x * freqs[i]);
  }
}

void ae_into(double theta, std::size_t half, double* out) {
  for (std::size_t i = 0; i < half; ++i) {
    const double k = static_cast<double>(i + 1);
    out[2 * i] = std::sin(theta * k);
    out[2 * i + 1] = std::cos(theta * k);
  }
}

}  // namespace

std::vector<double> pe(double x, const EncodingConfig& cfg) {
  cfg.validate();
  std::vector<double> out(static_cast<std::size_t>(cfg.dim));
  pe_into(x, frequencies(cfg), out.data());
  return out;
}

std::vector<double> ae(double theta, const EncodingConfig& cfg) {
  cfg.validate();
  std::vector<double> out(static_cast<std::size_t>(cfg.dim));
  ae_into(theta, out.size() / 2, out.data());
  return out;
}

RelativePoseEncoder::RelativePoseEncoder(const EncodingConfig& cfg) {
  cfg.validate();
  freqs_ = frequencies(cfg);
}

void RelativePoseEncoder::encode(const RelPose& r, std::span<double> out) const {
  const std::size_t d = 2 * freqs_.size();
  if (out.size() != 3 * d) throw DimensionError("rpe output buffer must have length 3D");
  pe_into(r.dx, freqs_, out.data());
  pe_into(r.dy, freqs_, out.data() + d);
  ae_into(r.dtheta, freqs_.size(), out.data() + 2 * d);
}

std::vector<double> rpe(const RelPose& r, const EncodingConfig& cfg) {
  RelativePoseEncoder enc(cfg);
  std::vector<double> out(enc.width());
  enc.encode(r, out);
  return out;
}

}  // namespace hptr
