// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "hptr/error.hpp"
#include "hptr/model.hpp"
#include "hptr/training.hpp"
#include "oracles.hpp"
#include "scene_utils.hpp"

using namespace hptr;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = HPTR_FIXTURE_DIR;
constexpr Topology kTopologies[] = {Topology::kLowerTri, Topology::kDiag, Topology::kFull,
                                    Topology::kDiagFull};

ModelConfig tiny(Topology t, int t_f = 4) {
  auto c = ModelConfig::tiny();
  c.topology = t;
  c.t_f = t_f;
  return c;
}

bool all_finite(const oracle::Vec& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

bool ends_with(const std::string& s, const std::string& tail) {
  return s.size() >= tail.size() && s.compare(s.size() - tail.size(), tail.size(), tail) == 0;
}

}  // namespace

TEST_CASE("output shapes and target bookkeeping") {
  const auto s = testutil::small_scene(1);
  const HptrModel<double> model(tiny(Topology::kLowerTri), 2);
  NoGradGuard ng;
  const auto out = model.forward(s);
  const auto targets = s.target_indices();
  CHECK(out.conf_logits.shape() == Shape{targets.size(), 6});
  CHECK(out.traj.shape() == Shape{targets.size(), 6, 4, kTrajChannels});
  CHECK(out.target_index == targets);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    CHECK(out.target_id[i] == s.agents[targets[i]].id);
    CHECK(out.target_pose[i] == s.agents[targets[i]].current_pose());
    CHECK(out.target_type[i] == s.agents[targets[i]].type);
  }
}

TEST_CASE("every topology gives finite output on the fixtures") {
  for (const char* file : {"urban_small.json", "no_lights.json", "dense_agents.json"}) {
    const auto s = load_scenario(kFixtures / file);
    for (auto topo : kTopologies) {
      INFO(file << " " << topology_name(topo));
      const HptrModel<float> model(tiny(topo, s.meta.t_f), 3);
      NoGradGuard ng;
      const auto out = model.forward(s);
      CHECK(all_finite(oracle::values(out.conf_logits)));
      CHECK(all_finite(oracle::values(out.traj)));
    }
  }
}

TEST_CASE("predictions in the agent frame are invariant to a global rigid motion") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-200, 200), th(-kPi, kPi);
  for (auto topo : kTopologies) {
    INFO(topology_name(topo));
    const HptrModel<double> model(tiny(topo), 5);
    const auto s = testutil::small_scene(6);
    NoGradGuard ng;
    const auto base = model.forward(s);
    for (int trial = 0; trial < 3; ++trial) {
      const auto moved = model.forward(testutil::transform_scenario(s, {u(rng), u(rng), th(rng)}));
      CHECK(oracle::max_abs_diff(oracle::values(base.traj), oracle::values(moved.traj)) < 1e-6);
      CHECK(oracle::max_abs_diff(oracle::values(base.conf_logits), oracle::values(moved.conf_logits)) <
            1e-6);
    }
  }
}

TEST_CASE("global predictions move with the scene") {
  const HptrModel<double> model(tiny(Topology::kLowerTri), 7);
  const auto s = testutil::small_scene(8);
  const Pose2 g(30, -12, 0.9);
  NoGradGuard ng;
  const auto a = predictions_to_global(to_prediction_set(model.forward(s)));
  const auto b = predictions_to_global(to_prediction_set(model.forward(testutil::transform_scenario(s, g))));
  for (std::size_t i = 0; i < a.agents.size(); ++i) {
    for (std::size_t k = 0; k < a.agents[i].modes.size(); ++k) {
      for (std::size_t t = 0; t < a.agents[i].modes[k].steps.size(); ++t) {
        const auto& p = a.agents[i].modes[k].steps[t];
        const auto& q = b.agents[i].modes[k].steps[t];
        const auto want = g.apply({p[kMuX], p[kMuY]});
        CHECK(std::abs(q[kMuX] - want.x) < 1e-6);
        CHECK(std::abs(q[kMuY] - want.y) < 1e-6);
        CHECK(oracle::angle_diff(q[kTheta], p[kTheta] + g.theta) < 1e-6);
      }
    }
  }
}

TEST_CASE("local and global prediction frames are inverse") {
  AgentPrediction p;
  p.modes.resize(2);
  std::mt19937_64 rng(9);
  for (auto& m : p.modes) {
    m.steps.resize(3);
    for (auto& st : m.steps) {
      const auto v = oracle::uniform(rng, kTrajChannels, -3, 3);
      std::copy(v.begin(), v.end(), st.begin());
    }
  }
  const Pose2 pose(4, 5, -2.5);
  const auto back = predictions_to_local(predictions_to_global(p, pose), pose);
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t t = 0; t < 3; ++t) {
      for (std::size_t c = 0; c < kTrajChannels; ++c) {
        if (c == kTheta) {
          CHECK(oracle::angle_diff(back.modes[k].steps[t][c], p.modes[k].steps[t][c]) < 1e-12);
        } else {
          CHECK(back.modes[k].steps[t][c] == doctest::Approx(p.modes[k].steps[t][c]));
        }
      }
    }
  }
}

TEST_CASE("analytic matmul flops equal the counted flops") {
  for (const char* file : {"urban_small.json", "no_lights.json", "dense_agents.json"}) {
    const auto s = load_scenario(kFixtures / file);
    for (auto topo : kTopologies) {
      INFO(file << " " << topology_name(topo));
      const HptrModel<float> model(tiny(topo, s.meta.t_f), 1);
      NoGradGuard ng;
      FlopCounter::reset();
      (void)model.forward(s);
      CHECK(FlopCounter::count() == analytic_forward_flops(model.config(), count_scene(s)));
    }
  }
  auto cfg = ModelConfig::bench();
  const auto s = load_scenario(kFixtures / "dense_agents.json");
  cfg.t_f = s.meta.t_f;
  const HptrModel<float> model(cfg, 1);
  NoGradGuard ng;
  FlopCounter::reset();
  (void)model.forward(s);
  CHECK(FlopCounter::count() == analytic_forward_flops(cfg, count_scene(s)));
}

TEST_CASE("every weight receives gradient") {
  // bk and bk_rpe shift every logit of a query by the same amount, which the
  // softmax cancels, so their exact gradient is zero.
  const auto s = testutil::small_scene(10);
  for (auto topo : kTopologies) {
    INFO(topology_name(topo));
    HptrModel<double> model(tiny(topo), 11);
    model.weights().set_requires_grad(true);
    total_loss(model.forward(s), s).total.backward();
    for (const auto& name : model.weights().names()) {
      INFO(name);
      const auto g = oracle::grads(model.weights().get(name));
      const double mx = g.empty() ? 0.0 : std::abs(*std::max_element(g.begin(), g.end(), [](double a, double b) {
        return std::abs(a) < std::abs(b);
      }));
      if (ends_with(name, ".bk") || ends_with(name, ".bk_rpe")) {
        CHECK(mx < 1e-10);
      } else {
        CHECK(mx > 0.0);
      }
    }
  }
}

TEST_CASE("zero weights give uniform confidences and zero trajectories") {
  HptrModel<double> model(tiny(Topology::kLowerTri), 1);
  for (const auto& n : model.weights().names()) {
    auto v = model.weights().get(n).mutable_data();
    std::fill(v.begin(), v.end(), 0.0);
  }
  const auto s = testutil::small_scene(12);
  NoGradGuard ng;
  const auto pred = to_prediction_set(model.forward(s));
  for (const auto& a : pred.agents) {
    for (double c : a.confidences) CHECK(c == doctest::Approx(1.0 / 6.0));
    for (const auto& m : a.modes) {
      for (const auto& st : m.steps) {
        for (double v : st) CHECK(v == 0.0);
      }
    }
  }
}

TEST_CASE("head outputs are clamped") {
  HptrModel<double> model(tiny(Topology::kLowerTri), 1);
  const auto s = testutil::small_scene(13);
  NoGradGuard ng;
  for (double bias : {1e3, -1e3}) {
    auto b = model.weights().get("head_traj.l2.bias").mutable_data();
    std::fill(b.begin(), b.end(), bias);
    const auto traj = oracle::values(model.forward(s).traj);
    for (std::size_t i = 0; i < traj.size(); i += kTrajChannels) {
      CHECK(std::abs(traj[i + kLogSigmaX]) == doctest::Approx(kLogSigmaLimit));
      CHECK(std::abs(traj[i + kLogSigmaY]) == doctest::Approx(kLogSigmaLimit));
      CHECK(std::abs(traj[i + kRho]) <= kRhoLimit);
      CHECK(std::abs(traj[i + kMuX]) > 100.0);
    }
  }
}

TEST_CASE("contract violations") {
  const HptrModel<double> model(tiny(Topology::kLowerTri), 1);
  auto s = testutil::small_scene(14);
  auto no_map = s;
  no_map.map.clear();
  CHECK_THROWS_AS(model.forward(no_map), ContractError);
  auto no_targets = s;
  for (auto& a : no_targets.agents) a.is_target = a.optimize = false;
  CHECK_THROWS_AS(model.forward(no_targets), ContractError);
  auto bad = ModelConfig::tiny();
  bad.heads = 3;
  CHECK_THROWS_AS(HptrModel<double>(bad, 1), ContractError);
  CHECK(parse_topology("diag_full") == Topology::kDiagFull);
  CHECK_THROWS_AS(parse_topology("upper_tri"), ParseError);
}

TEST_CASE("model config json round trip") {
  auto c = ModelConfig::bench();
  c.topology = Topology::kFull;
  c.layers.ac2all = 3;
  c.pe_exponent_sign = -1;
  const auto back = model_config_from_json(model_config_to_json(c));
  CHECK(model_config_to_json(back) == model_config_to_json(c));
  CHECK(back.topology == Topology::kFull);
  CHECK(back.layers.ac2all == 3);
  CHECK_THROWS_AS(model_config_from_json(R"({"dimension": 8})"), ParseError);
}
