// SPDX-License-Identifier: Apache-2.0
#include "hptr/scenario.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"

#include "hptr/error.hpp"

namespace hptr {

using nlohmann::json;

const char* agent_type_name(AgentType t) {
  switch (t) {
    case AgentType::kVehicle: return "vehicle";
    case AgentType::kPedestrian: return "pedestrian";
    case AgentType::kCyclist: return "cyclist";
  }
  return "vehicle";
}

AgentType parse_agent_type(const std::string& name) {
  if (name == "vehicle") return AgentType::kVehicle;
  if (name == "pedestrian") return AgentType::kPedestrian;
  if (name == "cyclist") return AgentType::kCyclist;
  throw ParseError("unknown agent type '" + name + "'");
}

std::vector<std::size_t> Scenario::target_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < agents.size(); ++i) {
    if (agents[i].is_target) out.push_back(i);
  }
  return out;
}

namespace {

std::string at(const std::string& base, std::size_t i) {
  return base + "[" + std::to_string(i) + "]";
}

bool finite_all(std::initializer_list<double> vs) {
  for (double v : vs) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool wrapped(double theta) { return theta > -kPi && theta <= kPi; }

}  // namespace

void validate_scenario(const Scenario& s) {
  const auto& m = s.meta;
  if (m.t_h < 1) throw ParseError("meta.t_h: must be >= 1");
  if (m.t_f < 1) throw ParseError("meta.t_f: must be >= 1");
  if (!(m.dt > 0.0)) throw ParseError("meta.dt: must be positive");
  if (m.c_mp < 1) throw ParseError("meta.c_mp: must be >= 1");
  if (m.c_tl < 1) throw ParseError("meta.c_tl: must be >= 1");
  if (s.map.size() > kMaxMapPolylines) {
    throw CapacityError("map: " + std::to_string(s.map.size()) + " polylines exceed the limit of " +
                        std::to_string(kMaxMapPolylines));
  }
  if (s.lights.size() > kMaxTrafficLights) {
    throw CapacityError("lights: " + std::to_string(s.lights.size()) +
                        " traffic lights exceed the limit of " +
                        std::to_string(kMaxTrafficLights));
  }
  if (s.agents.size() > kMaxAgents) {
    throw CapacityError("agents: " + std::to_string(s.agents.size()) +
                        " agents exceed the limit of " + std::to_string(kMaxAgents));
  }
  for (std::size_t i = 0; i < s.map.size(); ++i) {
    const auto& p = s.map[i];
    const std::string path = at("map", i);
    const std::size_t n = p.node_pos.size();
    if (n == 0 || n > kMaxPolylineNodes) {
      throw CapacityError(path + ".nodes: must hold 1.." + std::to_string(kMaxPolylineNodes) +
                          " nodes, got " + std::to_string(n));
    }
    if (p.node_dir.size() != n || p.node_valid.size() != n) {
      throw ParseError(path + ".nodes: inconsistent node arrays");
    }
    bool any = false;
    for (std::size_t k = 0; k < n; ++k) {
      if (!finite_all({p.node_pos[k].x, p.node_pos[k].y, p.node_dir[k].x, p.node_dir[k].y})) {
        throw ParseError(at(path + ".nodes", k) + ": non-finite value");
      }
      if (p.node_valid[k]) {
        any = true;
        const double norm = std::hypot(p.node_dir[k].x, p.node_dir[k].y);
        if (std::abs(norm - 1.0) > 1e-3) {
          throw ParseError(at(path + ".nodes", k) + ": direction is not a unit vector");
        }
      }
    }
    if (!any) throw ParseError(path + ".nodes: no valid node");
    if (p.lane_type < 0 || p.lane_type >= m.c_mp) {
      throw ParseError(path + ".lane_type: " + std::to_string(p.lane_type) + " outside [0, " +
                       std::to_string(m.c_mp) + ")");
    }
  }
  for (std::size_t i = 0; i < s.lights.size(); ++i) {
    const auto& l = s.lights[i];
    const std::string path = at("lights", i);
    if (!finite_all({l.stop_point.x, l.stop_point.y, l.stop_point.theta}) ||
        !wrapped(l.stop_point.theta)) {
      throw ParseError(path + ".stop_point: non-finite or unwrapped pose");
    }
    if (l.state < 0 || l.state >= m.c_tl) {
      throw ParseError(path + ".state: " + std::to_string(l.state) + " outside [0, " +
                       std::to_string(m.c_tl) + ")");
    }
  }
  for (std::size_t i = 0; i < s.agents.size(); ++i) {
    const auto& a = s.agents[i];
    const std::string path = at("agents", i);
    if (a.history.size() != static_cast<std::size_t>(m.t_h)) {
      throw ParseError(path + ".history: expected " + std::to_string(m.t_h) + " steps, got " +
                       std::to_string(a.history.size()));
    }
    if (!a.history.back().valid) throw ParseError(path + ".history: current step is not valid");
    for (std::size_t k = 0; k < a.history.size(); ++k) {
      const auto& h = a.history[k];
      if (h.valid && (!finite_all({h.x, h.y, h.theta, h.vx, h.vy}) || !wrapped(h.theta))) {
        throw ParseError(at(path + ".history", k) + ": non-finite or unwrapped state");
      }
    }
    if (!finite_all({a.size.length, a.size.width, a.size.height})) {
      throw ParseError(path + ".size: non-finite value");
    }
    if (!a.future.empty() && a.future.size() != static_cast<std::size_t>(m.t_f)) {
      throw ParseError(path + ".future: expected " + std::to_string(m.t_f) + " steps, got " +
                       std::to_string(a.future.size()));
    }
    for (std::size_t k = 0; k < a.future.size(); ++k) {
      const auto& f = a.future[k];
      if (f.valid && !finite_all({f.x, f.y, f.vx, f.vy, f.theta, f.speed})) {
        throw ParseError(at(path + ".future", k) + ": non-finite state");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// JSON

std::string scenario_to_json(const Scenario& s) {
  json doc;
  doc["schema_version"] = kScenarioSchemaVersion;
  doc["meta"] = {{"id", s.meta.id},     {"t_h", s.meta.t_h},   {"t_f", s.meta.t_f},
                 {"dt", s.meta.dt},     {"c_mp", s.meta.c_mp}, {"c_tl", s.meta.c_tl}};
  json map = json::array();
  for (const auto& p : s.map) {
    json nodes = json::array();
    for (std::size_t k = 0; k < p.node_pos.size(); ++k) {
      nodes.push_back({p.node_pos[k].x, p.node_pos[k].y, p.node_dir[k].x, p.node_dir[k].y,
                       p.node_valid[k] ? 1 : 0});
    }
    map.push_back({{"lane_type", p.lane_type}, {"nodes", nodes}});
  }
  doc["map"] = map;
  json lights = json::array();
  for (const auto& l : s.lights) {
    lights.push_back({{"stop_point", {l.stop_point.x, l.stop_point.y, l.stop_point.theta}},
                      {"state", l.state}});
  }
  doc["lights"] = lights;
  json agents = json::array();
  for (const auto& a : s.agents) {
    json hist = json::array();
    for (const auto& h : a.history) hist.push_back({h.x, h.y, h.theta, h.vx, h.vy, h.valid ? 1 : 0});
    json rec = {{"id", a.id},
                {"type", agent_type_name(a.type)},
                {"size", {a.size.length, a.size.width, a.size.height}},
                {"is_target", a.is_target},
                {"optimize", a.optimize},
                {"history", hist}};
    if (!a.future.empty()) {
      json fut = json::array();
      for (const auto& f : a.future) {
        fut.push_back({f.x, f.y, f.vx, f.vy, f.theta, f.speed, f.valid ? 1 : 0});
      }
      rec["future"] = fut;
    }
    agents.push_back(rec);
  }
  doc["agents"] = agents;
  return doc.dump(1);
}

namespace {

const json& require(const json& obj, const std::string& key, const std::string& path) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw ParseError(path + (path.empty() ? "" : ".") + key + ": required field missing");
  }
  return obj.at(key);
}

template <typename V>
V get_as(const json& j, const std::string& path) {
  try {
    return j.get<V>();
  } catch (const json::exception&) {
    throw ParseError(path + ": wrong type");
  }
}

std::vector<double> numbers(const json& j, std::size_t count, const std::string& path) {
  if (!j.is_array() || j.size() != count) {
    throw ParseError(path + ": expected an array of " + std::to_string(count) + " numbers");
  }
  std::vector<double> out;
  for (std::size_t i = 0; i < count; ++i) {
    if (!j[i].is_number()) throw ParseError(at(path, i) + ": expected a number");
    out.push_back(j[i].get<double>());
  }
  return out;
}

const json& array_field(const json& obj, const std::string& key, const std::string& path) {
  const json& j = require(obj, key, path);
  if (!j.is_array()) throw ParseError(path + (path.empty() ? "" : ".") + key + ": expected an array");
  return j;
}

}  // namespace

Scenario scenario_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("not valid JSON: ") + e.what());
  }
  const int version = get_as<int>(require(doc, "schema_version", ""), "schema_version");
  if (version != kScenarioSchemaVersion) {
    throw ParseError("schema_version: unsupported version " + std::to_string(version));
  }
  Scenario s;
  const json& meta = require(doc, "meta", "");
  s.meta.id = get_as<std::string>(require(meta, "id", "meta"), "meta.id");
  s.meta.t_h = get_as<int>(require(meta, "t_h", "meta"), "meta.t_h");
  s.meta.t_f = get_as<int>(require(meta, "t_f", "meta"), "meta.t_f");
  s.meta.dt = get_as<double>(require(meta, "dt", "meta"), "meta.dt");
  s.meta.c_mp = get_as<int>(require(meta, "c_mp", "meta"), "meta.c_mp");
  s.meta.c_tl = get_as<int>(require(meta, "c_tl", "meta"), "meta.c_tl");

  const json& map = array_field(doc, "map", "");
  for (std::size_t i = 0; i < map.size(); ++i) {
    const std::string path = at("map", i);
    RawMapPolyline p;
    p.lane_type = get_as<int>(require(map[i], "lane_type", path), path + ".lane_type");
    const json& nodes = array_field(map[i], "nodes", path);
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      auto v = numbers(nodes[k], 5, at(path + ".nodes", k));
      p.node_pos.push_back({v[0], v[1]});
      p.node_dir.push_back({v[2], v[3]});
      p.node_valid.push_back(v[4] != 0.0 ? 1 : 0);
    }
    s.map.push_back(std::move(p));
  }
  const json& lights = array_field(doc, "lights", "");
  for (std::size_t i = 0; i < lights.size(); ++i) {
    const std::string path = at("lights", i);
    auto v = numbers(require(lights[i], "stop_point", path), 3, path + ".stop_point");
    RawTrafficLight l;
    l.stop_point.x = v[0];
    l.stop_point.y = v[1];
    l.stop_point.theta = v[2];
    l.state = get_as<int>(require(lights[i], "state", path), path + ".state");
    s.lights.push_back(l);
  }
  const json& agents = array_field(doc, "agents", "");
  for (std::size_t i = 0; i < agents.size(); ++i) {
    const std::string path = at("agents", i);
    const json& rec = agents[i];
    RawAgent a;
    a.id = get_as<int>(require(rec, "id", path), path + ".id");
    try {
      a.type = parse_agent_type(get_as<std::string>(require(rec, "type", path), path + ".type"));
    } catch (const ParseError& e) {
      throw ParseError(path + ".type: " + e.what());
    }
    auto sz = numbers(require(rec, "size", path), 3, path + ".size");
    a.size = {sz[0], sz[1], sz[2]};
    a.is_target = get_as<bool>(require(rec, "is_target", path), path + ".is_target");
    a.optimize = get_as<bool>(require(rec, "optimize", path), path + ".optimize");
    const json& hist = array_field(rec, "history", path);
    for (std::size_t k = 0; k < hist.size(); ++k) {
      auto v = numbers(hist[k], 6, at(path + ".history", k));
      a.history.push_back({v[0], v[1], v[2], v[3], v[4], v[5] != 0.0});
    }
    if (rec.contains("future")) {
      const json& fut = array_field(rec, "future", path);
      for (std::size_t k = 0; k < fut.size(); ++k) {
        auto v = numbers(fut[k], 7, at(path + ".future", k));
        a.future.push_back({v[0], v[1], v[2], v[3], v[4], v[5], v[6] != 0.0});
      }
    }
    s.agents.push_back(std::move(a));
  }
  validate_scenario(s);
  return s;
}

void save_scenario(const std::filesystem::path& path, const Scenario& s) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << scenario_to_json(s) << '\n';
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open scenario file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return scenario_from_json(buf.str());
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

AgentSize default_size(AgentType t) {
  switch (t) {
    case AgentType::kVehicle: return {4.5, 2.0, 1.6};
    case AgentType::kPedestrian: return {0.5, 0.5, 1.8};
    case AgentType::kCyclist: return {1.8, 0.6, 1.7};
  }
  return {4.5, 2.0, 1.6};
}

struct Lane {
  RawMapPolyline poly;
  double turn_per_meter = 0.0;
};

// Chain of one-meter segments whose heading turns by a constant angle per
// segment; the last segment may be shorter.
Lane make_lane(Vec2 start, double heading, double length, double turn, int lane_type) {
  Lane lane;
  lane.turn_per_meter = turn;
  auto& p = lane.poly;
  p.lane_type = lane_type;
  Vec2 pos = start;
  double h = heading;
  double remaining = length;
  p.node_pos.push_back(pos);
  while (remaining > 1e-9 && p.node_pos.size() < kMaxPolylineNodes) {
    const double seg = std::min(1.0, remaining);
    p.node_dir.push_back({std::cos(h), std::sin(h)});
    pos = {pos.x + seg * std::cos(h), pos.y + seg * std::sin(h)};
    p.node_pos.push_back(pos);
    remaining -= seg;
    h += turn * seg;
  }
  // The final node repeats the direction of the segment that reaches it.
  p.node_dir.push_back(p.node_dir.back());
  p.node_valid.assign(p.node_pos.size(), 1);
  return lane;
}

// Unicycle with constant speed and turn rate, evaluated at time t.
AgentState unicycle(const Pose2& origin, double speed, double yaw_rate, double t) {
  const double th = origin.theta + yaw_rate * t;
  double x, y;
  if (std::abs(yaw_rate) < 1e-12) {
    x = origin.x + speed * t * std::cos(origin.theta);
    y = origin.y + speed * t * std::sin(origin.theta);
  } else {
    x = origin.x + speed / yaw_rate * (std::sin(th) - std::sin(origin.theta));
    y = origin.y - speed / yaw_rate * (std::cos(th) - std::cos(origin.theta));
  }
  return {x, y, wrap_angle(th), speed * std::cos(th), speed * std::sin(th), true};
}

}  // namespace

Scenario generate_synthetic(const SynthConfig& cfg) {
  if (cfg.n_lanes == 0) throw ContractError("synthetic scenarios need at least one lane");
  if (cfg.n_lanes > kMaxMapPolylines || cfg.n_agents > kMaxAgents ||
      cfg.n_lights > kMaxTrafficLights) {
    throw CapacityError("synthetic config exceeds scenario capacity limits");
  }
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  Scenario s;
  s.meta.id = "synthetic-" + std::to_string(cfg.seed);
  s.meta.t_h = cfg.t_h;
  s.meta.t_f = cfg.t_f;
  s.meta.dt = cfg.dt;
  s.meta.c_mp = cfg.c_mp;
  s.meta.c_tl = cfg.c_tl;

  std::vector<Lane> lanes;
  const double half = cfg.extent / 2.0;
  for (std::size_t i = 0; i < cfg.n_lanes; ++i) {
    const Vec2 start{uniform(-half, half), uniform(-half, half)};
    const double heading = uniform(-kPi, kPi);
    const double length = uniform(8.0, 19.0);
    double turn = 0.0;
    if (unit(rng) < cfg.arc_fraction) {
      turn = uniform(0.02, 0.1) * (unit(rng) < 0.5 ? -1.0 : 1.0);
    }
    const int lane_type = static_cast<int>(unit(rng) * cfg.c_mp) % cfg.c_mp;
    lanes.push_back(make_lane(start, heading, length, turn, lane_type));
    s.map.push_back(lanes.back().poly);
  }

  for (std::size_t i = 0; i < cfg.n_lights; ++i) {
    const auto& lane = lanes[static_cast<std::size_t>(unit(rng) * lanes.size()) % lanes.size()];
    const Vec2 end = lane.poly.node_pos.back();
    const Vec2 dir = lane.poly.node_dir.back();
    RawTrafficLight l;
    l.stop_point = Pose2(end.x, end.y, std::atan2(dir.y, dir.x));
    l.state = static_cast<int>(unit(rng) * cfg.c_tl) % cfg.c_tl;
    s.lights.push_back(l);
  }

  std::size_t targets = 0;
  for (std::size_t i = 0; i < cfg.n_agents; ++i) {
    const auto& lane = lanes[static_cast<std::size_t>(unit(rng) * lanes.size()) % lanes.size()];
    const std::size_t node = static_cast<std::size_t>(unit(rng) * lane.poly.node_pos.size()) %
                             lane.poly.node_pos.size();
    const Vec2 pos = lane.poly.node_pos[node];
    const Vec2 dir = lane.poly.node_dir[node];
    const Pose2 origin(pos.x, pos.y, std::atan2(dir.y, dir.x));
    const double speed = uniform(cfg.speed_min, cfg.speed_max);
    const double yaw_rate = cfg.turning_agents ? speed * lane.turn_per_meter : 0.0;

    RawAgent a;
    a.id = static_cast<int>(i);
    a.type = static_cast<AgentType>(static_cast<int>(unit(rng) * kAgentTypeCount) %
                                    kAgentTypeCount);
    a.size = default_size(a.type);
    a.is_target = unit(rng) < cfg.target_fraction;
    // Some agents enter the scene late, leaving their oldest steps invalid.
    const int missing = unit(rng) < 0.25 ? static_cast<int>(unit(rng) * (cfg.t_h - 1)) : 0;
    for (int k = 0; k < cfg.t_h; ++k) {
      const double t = -(cfg.t_h - 1 - k) * cfg.dt;
      AgentState st = unicycle(origin, speed, yaw_rate, t);
      st.valid = k >= missing;
      if (!st.valid) st = AgentState{};
      a.history.push_back(st);
    }
    for (int k = 1; k <= cfg.t_f; ++k) {
      const AgentState st = unicycle(origin, speed, yaw_rate, k * cfg.dt);
      a.future.push_back({st.x, st.y, st.vx, st.vy, st.theta, speed, true});
    }
    targets += a.is_target ? 1 : 0;
    s.agents.push_back(std::move(a));
  }
  if (targets == 0 && !s.agents.empty()) s.agents.front().is_target = true;
  for (auto& a : s.agents) a.optimize = a.is_target;
  return s;
}

}  // namespace hptr
