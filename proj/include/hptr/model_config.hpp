// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include "hptr/encoding.hpp"
#include "hptr/knarpe.hpp"

namespace hptr {

/// Which blocks of the class-by-class attention matrix are computed.
///   lower_tri  intra-MP, TL -> MP, AG -> MP+TL
///   diag       intra-MP, intra-TL, intra-AG
///   full       all tokens attend to all tokens
///   diag_full  diag followed by full
/// Every topology ends with anchors attending to MP+TL+AG.
enum class Topology { kLowerTri, kDiag, kFull, kDiagFull };

const char* topology_name(Topology t);
/// Throws ParseError on an unknown name.
Topology parse_topology(const std::string& name);

struct LayerCounts {
  int intra_mp = 6;
  int intra_tl = 3;
  int intra_ag = 3;
  int enhance_tl = 2;
  int enhance_ag = 2;
  int all2all = 6;
  int ac2all = 2;
};

struct ModelConfig {
  std::size_t dim = 256;
  std::size_t heads = 4;
  std::size_t ff_dim = 1024;
  double dropout = 0.1;
  double omega = 1000.0;
  int pe_exponent_sign = +1;
  bool per_head_scaling = true;
  std::size_t k = 36;
  std::size_t gamma_tl = 2;
  std::size_t gamma_ag = 4;
  std::size_t gamma_ac = 10;
  std::size_t n_anchors = 6;
  LayerCounts layers;
  Topology topology = Topology::kLowerTri;
  int t_f = 80;
  int agent_types = 3;
  int c_mp = 11;
  int c_tl = 5;
  /// Anchor embeddings are Xavier-initialized and then multiplied by this.
  double anchor_init_scale = 5.0;

  /// D = 16, one layer per stage, T_f = 4. Used by gradient checks and tests.
  static ModelConfig tiny();
  /// D = 64 with the default layer counts and neighbor multipliers; sized for
  /// desk-scale benchmarks.
  static ModelConfig bench();

  /// Throws ContractError on inconsistent values.
  void validate() const;

  EncodingConfig encoding() const;
  AttentionOptions attention() const;
};

std::string model_config_to_json(const ModelConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig model_config_from_json(const std::string& text);
ModelConfig load_model_config(const std::filesystem::path& path);
void save_model_config(const std::filesystem::path& path, const ModelConfig& cfg);

}  // namespace hptr
