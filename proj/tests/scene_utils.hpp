// SPDX-License-Identifier: Apache-2.0
//
// Scenario helpers shared by the model-level tests.
#pragma once

#include "hptr/scenario.hpp"

namespace testutil {

/// Moves every pose, point, direction and velocity of `s` by `g`.
inline hptr::Scenario transform_scenario(const hptr::Scenario& s, const hptr::Pose2& g) {
  auto out = s;
  for (auto& p : out.map) {
    for (std::size_t k = 0; k < p.node_pos.size(); ++k) {
      p.node_pos[k] = g.apply(p.node_pos[k]);
      p.node_dir[k] = g.rotate(p.node_dir[k]);
    }
  }
  for (auto& l : out.lights) l.stop_point = g.compose(l.stop_point);
  for (auto& a : out.agents) {
    for (auto& h : a.history) {
      const auto p = g.compose(hptr::Pose2(h.x, h.y, h.theta));
      const auto v = g.rotate({h.vx, h.vy});
      h = {p.x, p.y, p.theta, v.x, v.y, h.valid};
    }
    for (auto& f : a.future) {
      const auto p = g.compose(hptr::Pose2(f.x, f.y, f.theta));
      const auto v = g.rotate({f.vx, f.vy});
      f = {p.x, p.y, v.x, v.y, p.theta, f.speed, f.valid};
    }
  }
  return out;
}

inline hptr::Scenario small_scene(std::uint64_t seed, std::size_t agents = 6, int t_f = 4) {
  hptr::SynthConfig cfg;
  cfg.seed = seed;
  cfg.n_lanes = 16;
  cfg.n_agents = agents;
  cfg.n_lights = 3;
  cfg.t_f = t_f;
  cfg.extent = 60;
  return hptr::generate_synthetic(cfg);
}

}  // namespace testutil
