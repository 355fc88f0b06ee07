// SPDX-License-Identifier: Apache-2.0
//
// Scaling benchmark. The pairwise-relative mode runs the model as is. The
// agent-centric emulation copies every context token once per target agent,
// re-expresses the copies in that agent's frame, and runs the full-attention
// topology separately for each agent, which reproduces the cost structure of
// duplicating the scene per prediction target.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "hptr/model.hpp"

namespace hptr {

enum class BenchMode { kPairwiseRelative, kAgentCentricEmulation };

const char* bench_mode_name(BenchMode m);
BenchMode parse_bench_mode(const std::string& name);

struct BenchConfig {
  std::vector<std::size_t> agent_counts{8, 16, 32, 64};
  std::size_t n_map = 1024;
  std::size_t n_lights = 4;
  std::size_t repetitions = 20;
  std::size_t warmup = 3;
  std::uint64_t seed = 0;
  ModelConfig model = ModelConfig::bench();
  /// Memory only: skips the timed forward passes.
  bool memory_only = false;
};

struct BenchResult {
  BenchMode mode = BenchMode::kPairwiseRelative;
  std::size_t n_agents = 0;
  std::size_t context_tokens = 0;
  /// Bytes of the context token sets (attribute buffers and poses).
  std::size_t context_bytes = 0;
  /// Peak live tensor bytes during one offline forward.
  std::size_t peak_bytes = 0;
  double forward_ms = 0.0;  // median
  double online_ms = 0.0;   // median cached step
  std::uint64_t flops = 0;  // counted matmul FLOPs of one forward
};

/// Scenario family: n_map lanes, n_lights lights, n_agents agents, all of
/// them prediction targets.
Scenario bench_scenario(const BenchConfig& cfg, std::size_t n_agents);

/// Median of `values` (the upper middle element for even sizes is averaged
/// with the lower one).
double median(std::vector<double> values);

std::vector<BenchResult> bench_scaling(const BenchConfig& cfg, BenchMode mode);

/// "mode,n_agents,context_tokens,context_bytes,peak_bytes,forward_ms,online_ms,flops"
void write_bench_results(std::ostream& os, const std::vector<BenchResult>& rows,
                         bool header = true);

}  // namespace hptr
