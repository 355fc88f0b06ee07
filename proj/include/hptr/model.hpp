// SPDX-License-Identifier: Apache-2.0
//
// The hierarchical transformer. A forward pass runs in stages so that a
// streaming session can cache the ones whose inputs did not change:
//
//   map_stage    encode lanes, intra-MP self-attention
//   light_stage  encode lights, TL attention (cross to MP, or intra-TL)
//   agent_stage  encode agents, AG attention (cross to MP+TL, or intra-AG)
//   fuse_stage   all-to-all self-attention (full and diag_full only)
//   anchor_stage anchor tokens per target, anchors attend to MP+TL+AG
//   decode_heads confidence and trajectory heads
//
// Weight names follow `stage.layer.tensor`, see docs/weights.md.
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "hptr/knarpe.hpp"
#include "hptr/layers.hpp"
#include "hptr/model_config.hpp"
#include "hptr/polyline.hpp"
#include "hptr/scenario.hpp"
#include "hptr/weight_store.hpp"

namespace hptr {

/// Channels of one predicted step, target agent frame at t = 0.
enum TrajChannel : std::size_t {
  kMuX = 0, kMuY, kLogSigmaX, kLogSigmaY, kRho, kVx, kVy, kTheta, kSpeed, kTrajChannels
};

inline constexpr double kLogSigmaLimit = 5.0;
inline constexpr double kRhoLimit = 0.99;

/// Token poses and their current features [N, D].
template <typename T>
struct StageFeatures {
  std::vector<Pose2> poses;
  Tensor<T> features;

  std::size_t size() const { return poses.size(); }
  bool empty() const { return poses.empty(); }
};

/// Differentiable model output for the target agents.
template <typename T>
struct ModelOutput {
  Tensor<T> conf_logits;  // [targets, modes]
  Tensor<T> traj;         // [targets, modes, T_f, 9]
  std::vector<std::size_t> target_index;  // into Scenario::agents
  std::vector<int> target_id;
  std::vector<Pose2> target_pose;
  std::vector<AgentType> target_type;
};

template <typename T>
struct ModelParams {
  EncoderParams<T> encoders;
  std::vector<KnarpeBlockParams<T>> intra_mp, intra_tl, intra_ag, enhance_tl, enhance_ag, all2all,
      ac2all;
  Tensor<T> anchor_embed;  // [agent_types, N_AC, D]
  Linear<T> anchor_proj;   // 2D -> D
  Mlp3<T> head_conf;       // D -> 1
  Mlp3<T> head_traj;       // D -> T_f * 9

  static ModelParams build(ParamBuilder<T>& pb, const ModelConfig& cfg);
};

/// Shapes needed to count forward FLOPs without running the model.
struct SceneCounts {
  std::size_t n_mp = 0;
  std::size_t mp_nodes = 0;  // padded node count per lane
  std::size_t n_tl = 0;
  std::size_t n_ag = 0;
  std::size_t t_h = 0;
  std::size_t n_targets = 0;
};

SceneCounts count_scene(const Scenario& s);

/// Matmul FLOPs of one forward pass (2 per multiply-add), from shapes alone.
std::uint64_t analytic_forward_flops(const ModelConfig& cfg, const SceneCounts& counts);

template <typename T>
class HptrModel {
 public:
  /// Freshly initialized weights.
  HptrModel(const ModelConfig& cfg, std::uint64_t seed);
  /// Binds to existing weights; throws if a tensor is missing or misshapen.
  HptrModel(const ModelConfig& cfg, WeightStore<T> weights);

  const ModelConfig& config() const { return cfg_; }
  const WeightStore<T>& weights() const { return store_; }
  WeightStore<T>& weights() { return store_; }
  const ModelParams<T>& params() const { return params_; }

  TokenSet<T> encode_map(std::span<const RawMapPolyline> map) const;
  TokenSet<T> encode_lights(std::span<const RawTrafficLight> lights) const;
  TokenSet<T> encode_agents(std::span<const RawAgent> agents, double dt) const;

  StageFeatures<T> map_stage(const TokenSet<T>& mp, const ForwardContext& ctx = {}) const;
  StageFeatures<T> light_stage(const StageFeatures<T>& mp, const TokenSet<T>& tl,
                               const ForwardContext& ctx = {}) const;
  StageFeatures<T> agent_stage(const StageFeatures<T>& mp, const StageFeatures<T>& tl,
                               const TokenSet<T>& ag, const ForwardContext& ctx = {}) const;
  /// All-to-all over MP, TL and AG; returns the three sets updated. A no-op
  /// for topologies without the full block.
  std::array<StageFeatures<T>, 3> fuse_stage(const StageFeatures<T>& mp,
                                             const StageFeatures<T>& tl,
                                             const StageFeatures<T>& ag,
                                             const ForwardContext& ctx = {}) const;

  /// N_AC anchor tokens per target: proj([agent attr ; embedding of its type]).
  /// ag_attrs [N_AG, D] -> [targets * N_AC, D], grouped by target.
  Tensor<T> make_anchor_tokens(const Tensor<T>& ag_attrs, std::span<const std::size_t> targets,
                               std::span<const AgentType> types) const;

  /// Anchor features after the AC-to-all stage, [targets * N_AC, D].
  Tensor<T> anchor_stage(const StageFeatures<T>& mp, const StageFeatures<T>& tl,
                         const StageFeatures<T>& ag, std::span<const std::size_t> targets,
                         std::span<const AgentType> types, const ForwardContext& ctx = {}) const;

  /// z [targets * N_AC, D] -> logits [targets, N_AC], traj [targets, N_AC, T_f, 9]
  /// with log-sigmas clamped and rho squashed.
  std::pair<Tensor<T>, Tensor<T>> decode_heads(const Tensor<T>& z, std::size_t targets) const;

  /// Everything downstream of the cached stages, for one scenario.
  ModelOutput<T> finish(const StageFeatures<T>& mp, const StageFeatures<T>& tl,
                        const Scenario& s, const ForwardContext& ctx = {}) const;

  /// Throws ContractError when the scenario has no target agent or no map.
  ModelOutput<T> forward(const Scenario& s, const ForwardContext& ctx = {}) const;

 private:
  ModelConfig cfg_;
  WeightStore<T> store_;
  ModelParams<T> params_;
  RelativePoseEncoder encoder_;
};

// ---------------------------------------------------------------------------
// Plain prediction records

struct ModePrediction {
  double conf_logit = 0.0;
  std::vector<std::array<double, kTrajChannels>> steps;
};

struct AgentPrediction {
  int agent_id = 0;
  std::size_t agent_index = 0;
  AgentType type = AgentType::kVehicle;
  Pose2 pose;  // agent pose at t = 0
  std::vector<ModePrediction> modes;
  std::vector<double> confidences;
};

struct PredictionSet {
  std::vector<AgentPrediction> agents;
};

/// Detaches the output; confidences are softmax(logits / temperature).
template <typename T>
PredictionSet to_prediction_set(const ModelOutput<T>& out, double temperature = 1.0);

/// Positions and velocities rotated and translated by the agent pose, headings
/// shifted and wrapped. Log-sigmas, rho and speed are left as they are.
AgentPrediction predictions_to_global(const AgentPrediction& local, const Pose2& agent_pose);
AgentPrediction predictions_to_local(const AgentPrediction& global, const Pose2& agent_pose);
/// Each agent with its own pose.
PredictionSet predictions_to_global(const PredictionSet& local);

}  // namespace hptr
