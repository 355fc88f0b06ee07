// SPDX-License-Identifier: Apache-2.0
//
// Sinusoidal positional encoding of relative positions, angular encoding of
// relative headings, and their concatenation (relative pose encoding).
#pragma once

#include <span>
#include <vector>

#include "hptr/geometry.hpp"
#include "hptr/tensor.hpp"

namespace hptr {

struct EncodingConfig {
  int dim = 256;
  double omega = 1000.0;
  /// +1: frequency omega^(2i/D) multiplies x (as written). -1: omega^(-2i/D),
  /// the usual inverse-frequency convention.
  int pe_exponent_sign = +1;

  /// Throws ContractError unless dim is even and positive, omega > 0, sign is ±1.
  void validate() const;
};

/// out[2i] = sin(x f_i), out[2i+1] = cos(x f_i), f_i = omega^(sign 2i/D).
std::vector<double> pe(double x, const EncodingConfig& cfg);

/// out[2i] = sin(theta (i+1)), out[2i+1] = cos(theta (i+1)).
std::vector<double> ae(double theta, const EncodingConfig& cfg);

/// [pe(dx); pe(dy); ae(dtheta)], length 3D.
std::vector<double> rpe(const RelPose& r, const EncodingConfig& cfg);

/// rpe with the frequency table computed once, for encoding many pairs.
class RelativePoseEncoder {
 public:
  explicit RelativePoseEncoder(const EncodingConfig& cfg);
  std::size_t width() const { return 3 * freqs_.size() * 2; }
  /// Writes rpe(r) into `out`, which must have length 3D.
  void encode(const RelPose& r, std::span<double> out) const;

 private:
  std::vector<double> freqs_;
};

}  // namespace hptr
