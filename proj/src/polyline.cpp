// SPDX-License-Identifier: Apache-2.0
#include "hptr/polyline.hpp"

#include <algorithm>
#include <cmath>

#include "hptr/error.hpp"

namespace hptr {

const char* token_class_name(TokenClass c) {
  switch (c) {
    case TokenClass::kMap: return "MP";
    case TokenClass::kLight: return "TL";
    case TokenClass::kAgent: return "AG";
  }
  return "MP";
}

template <typename T>
PolylineToken TokenSet<T>::token(std::size_t i) const {
  if (i >= size()) throw IndexError("token index out of range");
  const std::size_t d = attrs.dim(1);
  PolylineToken tok;
  tok.cls = cls;
  tok.pose = poses[i];
  tok.attr.assign(attrs.data().begin() + i * d, attrs.data().begin() + (i + 1) * d);
  return tok;
}

template <typename T>
EncoderParams<T> EncoderParams<T>::build(ParamBuilder<T>& pb, std::size_t dim, int c_mp,
                                         int c_tl) {
  EncoderParams p;
  p.map = Mlp3<T>::build(pb, "enc_mp", kMapNodeBaseFeatures + static_cast<std::size_t>(c_mp), dim,
                         dim);
  p.agent = Mlp3<T>::build(pb, "enc_ag", kAgentStepFeatures + kAgentStaticFeatures, dim, dim);
  p.light = Mlp3<T>::build(pb, "enc_tl", static_cast<std::size_t>(c_tl), dim, dim);
  return p;
}

template <typename T>
Tensor<T> pointnet(const Tensor<T>& features, const Mask& valid, const Mlp3<T>& mlp) {
  if (features.rank() != 3) {
    throw DimensionError("pointnet expects [P, N, F], got " + shape_str(features.shape()));
  }
  return masked_max(mlp(features), valid);
}

Pose2 map_polyline_pose(const RawMapPolyline& p) {
  for (std::size_t k = 0; k < p.node_pos.size(); ++k) {
    if (p.node_valid[k]) {
      return {p.node_pos[k].x, p.node_pos[k].y, std::atan2(p.node_dir[k].y, p.node_dir[k].x)};
    }
  }
  throw EmptyGroupError("map polyline has no valid node");
}

std::vector<double> map_node_features(const RawMapPolyline& p, int c_mp) {
  const Pose2 pose = map_polyline_pose(p);
  const std::size_t f = kMapNodeBaseFeatures + static_cast<std::size_t>(c_mp);
  std::vector<double> out(p.node_pos.size() * f, 0.0);
  for (std::size_t k = 0; k < p.node_pos.size(); ++k) {
    if (!p.node_valid[k]) continue;
    double* row = out.data() + k * f;
    const Vec2 pos = pose.apply_inverse(p.node_pos[k]);
    const Vec2 dir = pose.rotate_inverse(p.node_dir[k]);
    row[0] = pos.x;
    row[1] = pos.y;
    row[2] = dir.x;
    row[3] = dir.y;
    row[kMapNodeBaseFeatures + static_cast<std::size_t>(p.lane_type)] = 1.0;
  }
  return out;
}

namespace {

// Central difference over valid neighbors, one-sided at gaps and ends.
template <typename Diff>
std::vector<double> derivative(const std::vector<double>& f, const std::vector<bool>& valid,
                               double dt, Diff diff) {
  const std::size_t n = f.size();
  std::vector<double> out(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    if (!valid[t]) continue;
    const bool prev = t > 0 && valid[t - 1];
    const bool next = t + 1 < n && valid[t + 1];
    if (prev && next) {
      out[t] = diff(f[t + 1], f[t - 1]) / (2.0 * dt);
    } else if (next) {
      out[t] = diff(f[t + 1], f[t]) / dt;
    } else if (prev) {
      out[t] = diff(f[t], f[t - 1]) / dt;
    }
  }
  return out;
}

}  // namespace

std::vector<double> agent_step_features(const RawAgent& a, double dt) {
  if (a.history.empty() || !a.current().valid) {
    throw ContractError("agent " + std::to_string(a.id) + " has no valid current state");
  }
  const Pose2 pose = a.current_pose();
  const std::size_t n = a.history.size();
  constexpr std::size_t f = kAgentStepFeatures + kAgentStaticFeatures;
  std::vector<double> heading(n), speed(n);
  std::vector<bool> valid(n);
  for (std::size_t t = 0; t < n; ++t) {
    const auto& h = a.history[t];
    valid[t] = h.valid;
    heading[t] = h.theta;
    speed[t] = std::hypot(h.vx, h.vy);
  }
  const auto yaw_rate =
      derivative(heading, valid, dt, [](double x, double y) { return wrap_angle(x - y); });
  const auto accel = derivative(speed, valid, dt, [](double x, double y) { return x - y; });

  std::vector<double> out(n * f, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    if (!valid[t]) continue;
    const auto& h = a.history[t];
    double* row = out.data() + t * f;
    const Vec2 pos = pose.apply_inverse({h.x, h.y});
    const double rel = wrap_angle(h.theta - pose.theta);
    const Vec2 vel = pose.rotate_inverse({h.vx, h.vy});
    row[0] = pos.x;
    row[1] = pos.y;
    row[2] = std::cos(rel);
    row[3] = std::sin(rel);
    row[4] = vel.x;
    row[5] = vel.y;
    row[6] = speed[t];
    row[7] = yaw_rate[t];
    row[8] = accel[t];
    row[9] = a.size.length;
    row[10] = a.size.width;
    row[11] = a.size.height;
    row[12 + static_cast<std::size_t>(a.type)] = 1.0;
  }
  return out;
}

template <typename T>
TokenSet<T> encode_map(std::span<const RawMapPolyline> map, int c_mp, const Mlp3<T>& mlp) {
  TokenSet<T> out;
  out.cls = TokenClass::kMap;
  const std::size_t dim = mlp.l2.weight.dim(1);
  if (map.empty()) {
    out.attrs = Tensor<T>::zeros({0, dim});
    return out;
  }
  std::size_t nodes = 0;
  for (const auto& p : map) nodes = std::max(nodes, p.node_pos.size());
  const std::size_t f = kMapNodeBaseFeatures + static_cast<std::size_t>(c_mp);
  std::vector<T> feats(map.size() * nodes * f, T(0));
  Mask valid(map.size() * nodes, 0);
  for (std::size_t i = 0; i < map.size(); ++i) {
    out.poses.push_back(map_polyline_pose(map[i]));
    const auto rows = map_node_features(map[i], c_mp);
    std::copy(rows.begin(), rows.end(), feats.begin() + i * nodes * f);
    for (std::size_t k = 0; k < map[i].node_valid.size(); ++k) {
      valid[i * nodes + k] = map[i].node_valid[k];
    }
  }
  out.attrs = pointnet(Tensor<T>::from({map.size(), nodes, f}, std::move(feats)), valid, mlp);
  return out;
}

template <typename T>
TokenSet<T> encode_agents(std::span<const RawAgent> agents, double dt, const Mlp3<T>& mlp) {
  TokenSet<T> out;
  out.cls = TokenClass::kAgent;
  const std::size_t dim = mlp.l2.weight.dim(1);
  if (agents.empty()) {
    out.attrs = Tensor<T>::zeros({0, dim});
    return out;
  }
  const std::size_t steps = agents.front().history.size();
  constexpr std::size_t f = kAgentStepFeatures + kAgentStaticFeatures;
  std::vector<T> feats(agents.size() * steps * f, T(0));
  Mask valid(agents.size() * steps, 0);
  for (std::size_t i = 0; i < agents.size(); ++i) {
    if (agents[i].history.size() != steps) {
      throw DimensionError("agents have differing history lengths");
    }
    out.poses.push_back(agents[i].current_pose());
    const auto rows = agent_step_features(agents[i], dt);
    std::copy(rows.begin(), rows.end(), feats.begin() + i * steps * f);
    for (std::size_t t = 0; t < steps; ++t) valid[i * steps + t] = agents[i].history[t].valid;
  }
  out.attrs = pointnet(Tensor<T>::from({agents.size(), steps, f}, std::move(feats)), valid, mlp);
  return out;
}

template <typename T>
TokenSet<T> encode_traffic_lights(std::span<const RawTrafficLight> lights, int c_tl,
                                  const Mlp3<T>& mlp) {
  TokenSet<T> out;
  out.cls = TokenClass::kLight;
  const std::size_t dim = mlp.l2.weight.dim(1);
  if (lights.empty()) {
    out.attrs = Tensor<T>::zeros({0, dim});
    return out;
  }
  const auto c = static_cast<std::size_t>(c_tl);
  std::vector<T> onehot(lights.size() * c, T(0));
  for (std::size_t i = 0; i < lights.size(); ++i) {
    if (lights[i].state < 0 || lights[i].state >= c_tl) {
      throw DomainError("traffic light state outside the one-hot range");
    }
    out.poses.push_back(lights[i].stop_point);
    onehot[i * c + static_cast<std::size_t>(lights[i].state)] = T(1);
  }
  out.attrs = mlp(Tensor<T>::from({lights.size(), c}, std::move(onehot)));
  return out;
}

template <typename T>
PolylineToken encode_map_polyline(const RawMapPolyline& p, int c_mp, const Mlp3<T>& mlp) {
  return encode_map<T>(std::span(&p, 1), c_mp, mlp).token(0);
}

template <typename T>
PolylineToken encode_agent(const RawAgent& a, double dt, const Mlp3<T>& mlp) {
  return encode_agents<T>(std::span(&a, 1), dt, mlp).token(0);
}

template <typename T>
PolylineToken encode_traffic_light(const RawTrafficLight& l, int c_tl, const Mlp3<T>& mlp) {
  return encode_traffic_lights<T>(std::span(&l, 1), c_tl, mlp).token(0);
}

#define HPTR_INSTANTIATE(T)                                                                    \
  template struct TokenSet<T>;                                                                 \
  template struct EncoderParams<T>;                                                            \
  template Tensor<T> pointnet<T>(const Tensor<T>&, const Mask&, const Mlp3<T>&);               \
  template TokenSet<T> encode_map<T>(std::span<const RawMapPolyline>, int, const Mlp3<T>&);    \
  template TokenSet<T> encode_agents<T>(std::span<const RawAgent>, double, const Mlp3<T>&);    \
  template TokenSet<T> encode_traffic_lights<T>(std::span<const RawTrafficLight>, int,         \
                                                const Mlp3<T>&);                               \
  template PolylineToken encode_map_polyline<T>(const RawMapPolyline&, int, const Mlp3<T>&);   \
  template PolylineToken encode_agent<T>(const RawAgent&, double, const Mlp3<T>&);             \
  template PolylineToken encode_traffic_light<T>(const RawTrafficLight&, int, const Mlp3<T>&);

HPTR_INSTANTIATE(float)
HPTR_INSTANTIATE(double)

#undef HPTR_INSTANTIATE

}  // namespace hptr
