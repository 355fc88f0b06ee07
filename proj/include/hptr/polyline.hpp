// SPDX-License-Identifier: Apache-2.0
//
// Polyline encoders: raw map lanes, traffic lights and agent histories become
// tokens made of a global pose and a local attribute vector. Every feature a
// network sees is expressed in the token's own frame.
#pragma once

#include <span>
#include <string>
#include <vector>

#include "hptr/geometry.hpp"
#include "hptr/layers.hpp"
#include "hptr/scenario.hpp"
#include "hptr/tensor.hpp"

namespace hptr {

enum class TokenClass { kMap, kLight, kAgent };

const char* token_class_name(TokenClass c);

/// One token, detached from any graph.
struct PolylineToken {
  TokenClass cls = TokenClass::kMap;
  Pose2 pose;
  std::vector<double> attr;
  bool valid = true;
};

/// All tokens of one class; attrs is [N, D] and may carry a graph.
template <typename T>
struct TokenSet {
  TokenClass cls = TokenClass::kMap;
  std::vector<Pose2> poses;
  Tensor<T> attrs;

  std::size_t size() const { return poses.size(); }
  bool empty() const { return poses.empty(); }
  PolylineToken token(std::size_t i) const;
};

/// Per-step agent feature width: local pos, local dir, local vel, speed,
/// yaw rate, acceleration.
inline constexpr std::size_t kAgentStepFeatures = 9;
/// Agent size (3) and type one-hot (3).
inline constexpr std::size_t kAgentStaticFeatures = 6;
inline constexpr std::size_t kMapNodeBaseFeatures = 4;

template <typename T>
struct EncoderParams {
  Mlp3<T> map;    // (4 + C_MP) -> D
  Mlp3<T> agent;  // 15 -> D
  Mlp3<T> light;  // C_TL -> D

  static EncoderParams build(ParamBuilder<T>& pb, std::size_t dim, int c_mp, int c_tl);
};

/// Per-node MLP then masked max over valid nodes.
/// features [P, N, F], valid [P*N] -> [P, D]. Throws EmptyGroupError if a
/// polyline has no valid node.
template <typename T>
Tensor<T> pointnet(const Tensor<T>& features, const Mask& valid, const Mlp3<T>& mlp);

/// Token pose of a lane: first valid node, heading of its direction.
Pose2 map_polyline_pose(const RawMapPolyline& p);

/// Node features [N_node, 4 + c_mp] in the lane's own frame.
std::vector<double> map_node_features(const RawMapPolyline& p, int c_mp);

/// Step features [T_h, 15] in the frame of the agent at t = 0, invalid steps
/// zeroed. Throws ContractError if the current step is invalid.
std::vector<double> agent_step_features(const RawAgent& a, double dt);

template <typename T>
TokenSet<T> encode_map(std::span<const RawMapPolyline> map, int c_mp, const Mlp3<T>& mlp);

template <typename T>
TokenSet<T> encode_agents(std::span<const RawAgent> agents, double dt, const Mlp3<T>& mlp);

template <typename T>
TokenSet<T> encode_traffic_lights(std::span<const RawTrafficLight> lights, int c_tl,
                                  const Mlp3<T>& mlp);

// Single-token forms.
template <typename T>
PolylineToken encode_map_polyline(const RawMapPolyline& p, int c_mp, const Mlp3<T>& mlp);
template <typename T>
PolylineToken encode_agent(const RawAgent& a, double dt, const Mlp3<T>& mlp);
template <typename T>
PolylineToken encode_traffic_light(const RawTrafficLight& l, int c_tl, const Mlp3<T>& mlp);

}  // namespace hptr
