// SPDX-License-Identifier: Apache-2.0
//
// Scenario records, the JSON scenario file format, and a seeded synthetic
// scenario generator. See docs/scenario_format.md for the file schema.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hptr/geometry.hpp"

namespace hptr {

inline constexpr int kScenarioSchemaVersion = 1;
inline constexpr std::size_t kMaxMapPolylines = 1024;
inline constexpr std::size_t kMaxTrafficLights = 40;
inline constexpr std::size_t kMaxAgents = 64;
inline constexpr std::size_t kMaxPolylineNodes = 20;
inline constexpr int kAgentTypeCount = 3;

enum class AgentType { kVehicle = 0, kPedestrian = 1, kCyclist = 2 };

const char* agent_type_name(AgentType t);
AgentType parse_agent_type(const std::string& name);

struct RawMapPolyline {
  std::vector<Vec2> node_pos;  // global, meters
  std::vector<Vec2> node_dir;  // unit vectors
  Mask node_valid;
  int lane_type = 0;  // index into the C_MP one-hot
};

struct RawTrafficLight {
  Pose2 stop_point;
  int state = 0;  // index into the C_TL one-hot
};

struct AgentState {
  double x = 0, y = 0, theta = 0, vx = 0, vy = 0;
  bool valid = false;
};

struct AgentSize {
  double length = 0, width = 0, height = 0;
};

/// One future step of ground truth, global frame.
struct FutureState {
  double x = 0, y = 0, vx = 0, vy = 0, theta = 0, speed = 0;
  bool valid = false;
};

using GroundTruthTrack = std::vector<FutureState>;

struct RawAgent {
  int id = 0;
  /// Oldest first; the last entry is the current step t = 0.
  std::vector<AgentState> history;
  AgentSize size;
  AgentType type = AgentType::kVehicle;
  bool is_target = false;
  /// Whether the agent contributes to the training loss.
  bool optimize = false;
  /// Empty when the scenario carries no ground truth for this agent.
  GroundTruthTrack future;

  const AgentState& current() const { return history.back(); }
  Pose2 current_pose() const { return {current().x, current().y, current().theta}; }
};

struct ScenarioMeta {
  std::string id;
  int t_h = 11;
  int t_f = 80;
  double dt = 0.1;
  int c_mp = 11;
  int c_tl = 5;
};

struct Scenario {
  ScenarioMeta meta;
  std::vector<RawMapPolyline> map;
  std::vector<RawTrafficLight> lights;
  std::vector<RawAgent> agents;

  std::vector<std::size_t> target_indices() const;
};

/// Throws ParseError (with a field path) or CapacityError.
void validate_scenario(const Scenario& s);

std::string scenario_to_json(const Scenario& s);
Scenario scenario_from_json(const std::string& text);
void save_scenario(const std::filesystem::path& path, const Scenario& s);
Scenario load_scenario(const std::filesystem::path& path);

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t n_lanes = 32;
  std::size_t n_agents = 8;
  std::size_t n_lights = 4;
  /// Fraction of lanes that are discretized circular arcs.
  double arc_fraction = 0.3;
  double speed_min = 2.0;
  double speed_max = 12.0;
  double target_fraction = 0.5;
  /// Agents on arcs keep a constant turn rate; others keep constant velocity.
  bool turning_agents = true;
  /// Side length of the square the lanes are scattered in, meters.
  double extent = 120.0;
  int t_h = 11;
  int t_f = 80;
  double dt = 0.1;
  int c_mp = 11;
  int c_tl = 5;
};

/// Deterministic for a given config; futures are filled for every agent.
Scenario generate_synthetic(const SynthConfig& cfg);

}  // namespace hptr
