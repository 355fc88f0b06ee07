// SPDX-License-Identifier: Apache-2.0
#include "hptr/bench.hpp"

#include <algorithm>
#include <cmath>
#include <chrono>
#include <ostream>

#include "hptr/error.hpp"
#include "hptr/runtime.hpp"

namespace hptr {

const char* bench_mode_name(BenchMode m) {
  return m == BenchMode::kPairwiseRelative ? "pairwise_relative" : "agent_centric_emulation";
}

BenchMode parse_bench_mode(const std::string& name) {
  if (name == "pairwise_relative") return BenchMode::kPairwiseRelative;
  if (name == "agent_centric_emulation") return BenchMode::kAgentCentricEmulation;
  throw ParseError("unknown bench mode '" + name + "'");
}

Scenario bench_scenario(const BenchConfig& cfg, std::size_t n_agents) {
  SynthConfig sc;
  sc.seed = cfg.seed;
  sc.n_lanes = cfg.n_map;
  sc.n_agents = n_agents;
  sc.n_lights = cfg.n_lights;
  sc.target_fraction = 1.0;
  sc.t_f = cfg.model.t_f;
  sc.c_mp = cfg.model.c_mp;
  sc.c_tl = cfg.model.c_tl;
  // Keep lane density roughly constant as the map grows.
  sc.extent = std::max(60.0, 120.0 * std::sqrt(static_cast<double>(cfg.n_map) / 32.0));
  return generate_synthetic(sc);
}

double median(std::vector<double> values) {
  if (values.empty()) throw ContractError("median of an empty sample");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

using Clock = std::chrono::steady_clock;
using T = float;

template <typename F>
double time_ms(F&& f) {
  const auto start = Clock::now();
  f();
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

template <typename F>
double median_ms(const BenchConfig& cfg, F&& f) {
  for (std::size_t i = 0; i < cfg.warmup; ++i) f();
  std::vector<double> samples;
  for (std::size_t i = 0; i < cfg.repetitions; ++i) samples.push_back(time_ms(f));
  return median(samples);
}

std::size_t feature_bytes(const StageFeatures<T>& s) {
  return s.features.numel() * sizeof(T) + s.poses.size() * sizeof(Pose2);
}

StageFeatures<T> in_frame_of(const StageFeatures<T>& s, const Pose2& frame) {
  StageFeatures<T> out;
  const Pose2 inv = frame.inverse();
  for (const auto& p : s.poses) out.poses.push_back(inv.compose(p));
  const auto d = s.features.data();
  out.features = Tensor<T>::from(s.features.shape(), std::vector<T>(d.begin(), d.end()));
  return out;
}

BenchResult run_pairwise(const BenchConfig& cfg, const Scenario& s, const HptrModel<T>& model) {
  BenchResult r;
  r.mode = BenchMode::kPairwiseRelative;
  r.n_agents = s.agents.size();
  NoGradGuard no_grad;
  {
    const auto mp_tokens = model.encode_map(s.map);
    const StageFeatures<T> mp{mp_tokens.poses, mp_tokens.attrs};
    const auto tl = model.encode_lights(s.lights);
    const auto ag = model.encode_agents(s.agents, s.meta.dt);
    r.context_tokens = mp.size() + tl.size() + ag.size();
    r.context_bytes = feature_bytes(mp) + feature_bytes(StageFeatures<T>{tl.poses, tl.attrs}) +
                      feature_bytes(StageFeatures<T>{ag.poses, ag.attrs});
  }
  if (cfg.memory_only) return r;

  const auto live = MemoryTracker::stats().live_bytes;
  MemoryTracker::reset_peak();
  FlopCounter::reset();
  (void)model.forward(s);
  r.flops = FlopCounter::count();
  r.peak_bytes = MemoryTracker::stats().peak_bytes - live;
  r.forward_ms = median_ms(cfg, [&] { (void)model.forward(s); });

  Session<T> session(model, s.map);
  std::vector<double> steps;
  for (std::size_t i = 0; i < cfg.warmup + cfg.repetitions; ++i) {
    const auto res = session.step(s);
    if (i >= cfg.warmup) steps.push_back(res.trace.latency_us / 1000.0);
  }
  r.online_ms = median(steps);
  return r;
}

BenchResult run_agent_centric(const BenchConfig& cfg, const Scenario& s,
                              const HptrModel<T>& model) {
  BenchResult r;
  r.mode = BenchMode::kAgentCentricEmulation;
  r.n_agents = s.agents.size();
  NoGradGuard no_grad;
  const auto mp_tokens = model.encode_map(s.map);
  const auto tl_tokens = model.encode_lights(s.lights);
  const auto ag_tokens = model.encode_agents(s.agents, s.meta.dt);
  const StageFeatures<T> mp{mp_tokens.poses, mp_tokens.attrs};
  const StageFeatures<T> tl{tl_tokens.poses, tl_tokens.attrs};
  const StageFeatures<T> ag{ag_tokens.poses, ag_tokens.attrs};
  const auto targets = s.target_indices();

  auto run = [&](bool keep_bytes) {
    // Every target gets its own copy of the whole context in its own frame.
    std::vector<std::array<StageFeatures<T>, 3>> copies;
    for (auto t : targets) {
      const Pose2 frame = s.agents[t].current_pose();
      copies.push_back({in_frame_of(mp, frame), in_frame_of(tl, frame), in_frame_of(ag, frame)});
    }
    if (keep_bytes) {
      r.context_tokens = 0;
      r.context_bytes = 0;
      for (const auto& c : copies) {
        for (const auto& part : c) {
          r.context_tokens += part.size();
          r.context_bytes += feature_bytes(part);
        }
      }
    }
    if (cfg.memory_only) return;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const auto fused = model.fuse_stage(copies[i][0], copies[i][1], copies[i][2]);
      const std::size_t target = targets[i];
      const AgentType type = s.agents[target].type;
      const auto z = model.anchor_stage(fused[0], fused[1], fused[2],
                                        std::span<const std::size_t>(&target, 1),
                                        std::span<const AgentType>(&type, 1));
      (void)model.decode_heads(z, 1);
    }
  };
  const auto live = MemoryTracker::stats().live_bytes;
  MemoryTracker::reset_peak();
  FlopCounter::reset();
  run(true);
  if (cfg.memory_only) return r;
  r.flops = FlopCounter::count();
  r.peak_bytes = MemoryTracker::stats().peak_bytes - live;
  r.forward_ms = median_ms(cfg, [&] { run(false); });
  // Nothing carries over between queries when the context is re-expressed
  // per agent, so an online step costs a full forward.
  r.online_ms = r.forward_ms;
  return r;
}

}  // namespace

std::vector<BenchResult> bench_scaling(const BenchConfig& cfg, BenchMode mode) {
  if (cfg.repetitions == 0) throw ContractError("bench needs at least one repetition");
  ModelConfig mcfg = cfg.model;
  if (mode == BenchMode::kAgentCentricEmulation) mcfg.topology = Topology::kFull;
  const HptrModel<T> model(mcfg, cfg.seed);
  std::vector<BenchResult> rows;
  for (auto n : cfg.agent_counts) {
    if (n == 0) throw ContractError("agent counts must be positive");
    const auto s = bench_scenario(cfg, n);
    rows.push_back(mode == BenchMode::kPairwiseRelative ? run_pairwise(cfg, s, model)
                                                        : run_agent_centric(cfg, s, model));
  }
  return rows;
}

void write_bench_results(std::ostream& os, const std::vector<BenchResult>& rows, bool header) {
  if (header) {
    os << "mode,n_agents,context_tokens,context_bytes,peak_bytes,forward_ms,online_ms,flops\n";
  }
  os.precision(4);
  os << std::fixed;
  for (const auto& r : rows) {
    os << bench_mode_name(r.mode) << ',' << r.n_agents << ',' << r.context_tokens << ','
       << r.context_bytes << ',' << r.peak_bytes << ',' << r.forward_ms << ',' << r.online_ms
       << ',' << r.flops << '\n';
  }
}

}  // namespace hptr
