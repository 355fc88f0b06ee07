// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. `acceptance 3 7` runs only criteria 3 and 7.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <string>

#include "hptr/bench.hpp"
#include "hptr/runtime.hpp"
#include "hptr/training.hpp"
#include "oracles.hpp"
#include "scene_utils.hpp"

using namespace hptr;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = HPTR_FIXTURE_DIR;
const char* const kFixtureFiles[] = {"urban_small.json", "no_lights.json", "dense_agents.json"};
constexpr Topology kTopologies[] = {Topology::kLowerTri, Topology::kDiag, Topology::kFull,
                                    Topology::kDiagFull};

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<Pose2> random_poses(std::mt19937_64& rng, std::size_t n, double extent) {
  std::uniform_real_distribution<double> u(-extent, extent), a(-kPi, kPi);
  std::vector<Pose2> out(n);
  for (auto& p : out) p = {u(rng), u(rng), a(rng)};
  return out;
}

// 1. Full-context attention against the dense oracle, 32-bit.
Verdict oracle_equivalence() {
  std::mt19937_64 rng(101);
  double worst = 0.0;
  const int instances = 60;
  for (int trial = 0; trial < instances; ++trial) {
    const std::size_t heads = trial % 2 ? 2 : 4, dim = heads * 4;
    const std::size_t n = 2 + rng() % 63;  // all tokens attend to all tokens
    WeightStore<double> store;
    ParamBuilder<double> init(store, ParamBuilder<double>::Mode::kInitialize, 200 + trial);
    (void)KnarpeParams<double>::build(init, "attn", dim, heads);
    for (const auto& name : store.names()) {
      for (auto& v : store.get(name).mutable_data()) v = oracle::uniform(rng, 1, -0.5, 0.5)[0];
    }
    auto cast = store.cast<float>();
    ParamBuilder<float> pb(cast, ParamBuilder<float>::Mode::kBind);
    const auto params = KnarpeParams<float>::build(pb, "attn", dim, heads);
    auto g = [&](const char* name) { return oracle::values(store.get(std::string("attn.") + name)); };
    const oracle::DenseAttentionParams dense{g("wq"),     g("bq"),     g("wk"),    g("bk"),
                                             g("wv"),     g("bv"),     g("wk_rpe"), g("bk_rpe"),
                                             g("wv_rpe"), g("bv_rpe")};

    const auto poses = random_poses(rng, n, 30.0);
    Mask valid(n, 1);
    std::vector<bool> vb(n, true);
    if (trial % 3 == 0) {
      for (std::size_t j = 0; j < n; ++j) vb[j] = valid[j] = rng() % 4 != 0;
      vb[0] = valid[0] = 1;
    }
    const auto x = oracle::uniform(rng, n * dim);
    EncodingConfig enc;
    enc.dim = static_cast<int>(dim);
    AttentionOptions opts;
    opts.heads = heads;
    const auto want = oracle::dense_rpe_attention(x, x, poses, poses, vb, dense, dim, heads,
                                                  enc.omega, enc.pe_exponent_sign, true);
    const auto xt = oracle::tensor<float>({n, dim}, x);
    const auto got = knarpe_attend(xt, xt, poses, poses, knn_indices(poses, poses, valid, n), params,
                                   enc, opts);
    worst = std::max(worst, oracle::max_abs_diff(oracle::values(got), want));
  }
  return {worst < 1e-5, fmt("%d instances up to 64 tokens, max abs deviation %.3g (limit 1e-5)",
                            instances, worst)};
}

// 2. Finite differences of the total loss, every topology.
Verdict gradient_correctness() {
  double worst = 0.0;
  std::size_t elements = 0;
  bool pass = true;
  const auto s = gradcheck_scenario(7);
  for (auto topo : kTopologies) {
    auto cfg = ModelConfig::tiny();
    cfg.topology = topo;
    HptrModel<double> model(cfg, 7);
    const auto r = loss_gradcheck(model, s, 1e-5, 1e-4, 1e-3);
    worst = std::max(worst, r.max_rel_error);
    elements += r.checked_elements;
    pass = pass && r.passed;
  }
  return {pass, fmt("4 topologies, %zu parameter elements, max relative error %.3g (limit 1e-4)",
                    elements, worst)};
}

// 3. Global predictions follow a rigid motion of the whole scene.
template <typename T>
double equivariance_deviation(const Scenario& s, int transforms) {
  auto cfg = ModelConfig::bench();
  cfg.t_f = s.meta.t_f;
  const HptrModel<T> model(cfg, 3);
  NoGradGuard ng;
  const auto base = predictions_to_global(to_prediction_set(model.forward(s)));
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> u(-500, 500), th(-kPi, kPi);
  double worst = 0.0;
  for (int i = 0; i < transforms; ++i) {
    const Pose2 g(u(rng), u(rng), th(rng));
    const auto moved =
        predictions_to_global(to_prediction_set(model.forward(testutil::transform_scenario(s, g))));
    for (std::size_t a = 0; a < base.agents.size(); ++a) {
      for (std::size_t k = 0; k < base.agents[a].modes.size(); ++k) {
        const auto& p = base.agents[a].modes[k].steps;
        const auto& q = moved.agents[a].modes[k].steps;
        for (std::size_t t = 0; t < p.size(); ++t) {
          const auto want = g.apply({p[t][kMuX], p[t][kMuY]});
          worst = std::max(worst, std::hypot(q[t][kMuX] - want.x, q[t][kMuY] - want.y));
        }
      }
    }
  }
  return worst;
}

Verdict rigid_equivariance() {
  const auto s = load_scenario(kFixtures / "urban_small.json");
  const double d32 = equivariance_deviation<float>(s, 20);
  const double d64 = equivariance_deviation<double>(s, 20);
  return {d32 < 1e-3 && d64 < 1e-6,
          fmt("20 transforms of urban_small, max deviation %.3g m (f32, limit 1e-3), %.3g m (f64, "
              "limit 1e-6)",
              d32, d64)};
}

// 4. KNN against the full-sort oracle.
Verdict knn_correctness() {
  std::mt19937_64 rng(404);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t nq = 1 + rng() % 16, nt = 1 + rng() % 40, k = 1 + rng() % 16;
    const bool grid = trial % 2 == 0;
    std::uniform_int_distribution<int> gi(-4, 4);
    auto q = random_poses(rng, nq, 25.0), t = random_poses(rng, nt, 25.0);
    if (grid) {
      for (auto& p : q) p = {double(gi(rng)), double(gi(rng)), 0.0};
      for (auto& p : t) p = {double(gi(rng)), double(gi(rng)), 0.0};
    }
    Mask valid(nt);
    std::vector<bool> vb(nt);
    for (std::size_t j = 0; j < nt; ++j) valid[j] = rng() % 4 != 0;
    valid[rng() % nt] = 1;
    for (std::size_t j = 0; j < nt; ++j) vb[j] = valid[j] != 0;
    const auto got = knn_indices(q, t, valid, k);
    const auto want = oracle::knn(q, t, vb, k);
    bool same = true;
    for (std::size_t r = 0; r < nq; ++r) {
      same = same && got.valid_count(r) == want[r].size();
      for (std::size_t c = 0; c < k && same; ++c) {
        if (c < want[r].size()) {
          same = got.is_valid(r, c) && static_cast<std::size_t>(got.idx.at(r, c)) == want[r][c];
        } else {
          same = !got.is_valid(r, c);
        }
      }
    }
    mismatches += same ? 0 : 1;
  }
  return {mismatches == 0, fmt("1000 random sets, %zu mismatches", mismatches)};
}

// 5. Cached session steps against offline forwards at 64 agents / 1024 lanes.
Verdict cache_soundness() {
  using Clock = std::chrono::steady_clock;
  BenchConfig bc;
  const auto s = bench_scenario(bc, 64);
  auto cfg = ModelConfig::bench();
  cfg.t_f = s.meta.t_f;
  const HptrModel<float> model(cfg, 5);

  std::vector<double> offline_ms;
  oracle::Vec ref_traj, ref_conf;
  double forward_spread = 0.0;
  {
    NoGradGuard ng;
    for (int i = 0; i < 3; ++i) {
      const auto t0 = Clock::now();
      const auto out = model.forward(s);
      offline_ms.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
      const auto traj = oracle::values(out.traj), conf = oracle::values(out.conf_logits);
      if (ref_traj.empty()) {
        ref_traj = traj;
        ref_conf = conf;
      } else {
        forward_spread = std::max({forward_spread, oracle::max_abs_diff(traj, ref_traj),
                                   oracle::max_abs_diff(conf, ref_conf)});
      }
    }
  }
  Session<float> session(model, s.map);
  double worst = 0.0, online_total = 0.0;
  const int steps = 100;
  for (int i = 0; i < steps; ++i) {
    const auto r = session.step(s);
    if (i > 0) online_total += r.trace.latency_us / 1000.0;
    worst = std::max({worst, oracle::max_abs_diff(oracle::values(r.output.traj), ref_traj),
                      oracle::max_abs_diff(oracle::values(r.output.conf_logits), ref_conf)});
  }
  // Step 1 also runs the light stage; the other 99 are the cached path.
  const double online = online_total / (steps - 1);
  const double offline = median(offline_ms);
  const double ratio = online / offline;
  return {worst < 1e-5 && forward_spread == 0.0 && ratio <= 0.7,
          fmt("100 steps, max deviation %.3g (limit 1e-5); cached step %.1f ms vs offline %.1f ms, "
              "ratio %.3f (limit 0.7)",
              worst, online, offline, ratio)};
}

// 6. Context memory growth per agent doubling.
Verdict scaling_trend() {
  BenchConfig bc;
  bc.memory_only = true;
  const auto pr = bench_scaling(bc, BenchMode::kPairwiseRelative);
  const auto ac = bench_scaling(bc, BenchMode::kAgentCentricEmulation);
  double ac_min = INFINITY, pr_max = 0.0;
  for (std::size_t i = 1; i < pr.size(); ++i) {
    ac_min = std::min(ac_min, double(ac[i].context_bytes) / double(ac[i - 1].context_bytes));
    pr_max = std::max(pr_max, double(pr[i].context_bytes) / double(pr[i - 1].context_bytes));
  }
  const double pr_total = double(pr.back().context_bytes) / double(pr.front().context_bytes);
  return {ac_min >= 1.8 && pr_total < 1.2,
          fmt("agents 8->64: emulation min growth per doubling %.3fx (limit >= 1.8), pairwise "
              "max per doubling %.3fx, overall %.3fx (limit < 1.2)",
              ac_min, pr_max, pr_total)};
}

// 7. Scalar loss terms at known points.
Verdict loss_units() {
  std::array<double, kTrajChannels> step{};
  step[kMuX] = 2.0;
  step[kMuY] = -1.0;
  const double pos = nll_gaussian_2d(step, 2.0, -1.0);
  const double pos_err = std::abs(pos - std::log(2 * kPi));

  // Same case through the tensor loss: one target, one valid step, exact mean.
  Scenario s;
  RawAgent a;
  a.is_target = a.optimize = true;
  a.history = {{0, 0, 0, 0, 0, true}};
  a.future = {{2, -1, 0, 0, 0, 0, true}};
  s.agents = {a};
  ModelOutput<double> out;
  out.conf_logits = Tensor<double>::zeros({1, 1});
  std::vector<double> traj(kTrajChannels, 0.0);
  traj[kMuX] = 2.0;
  traj[kMuY] = -1.0;
  out.traj = Tensor<double>::from({1, 1, 1, kTrajChannels}, traj);
  out.target_index = {0};
  out.target_id = {0};
  out.target_pose = {a.current_pose()};
  out.target_type = {a.type};
  const double tensor_err = std::abs(total_loss(out, s).report.pos - std::log(2 * kPi));

  const bool pass = pos_err < 1e-6 && tensor_err < 1e-6 && huber(0.5) == 0.125 &&
                    huber(2.0) == 1.5 && cos_loss(0.7, 0.7) == -1.0;
  return {pass, fmt("L_pos - log(2pi) = %.2g (scalar), %.2g (tensor); huber(0.5) = %g, huber(2) = "
                    "%g; cos_loss at equality = %g",
                    pos_err, tensor_err, huber(0.5), huber(2.0), cos_loss(0.7, 0.7))};
}

// 8. Gradient reaches only the assigned mode's trajectory outputs.
Verdict sparsity() {
  std::size_t leaks = 0, empty = 0, instances = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = testutil::small_scene(800 + seed, 4 + seed % 5);
    HptrModel<double> model(ModelConfig::tiny(), 900 + seed);
    model.weights().set_requires_grad(true);
    const auto out = model.forward(s);
    const auto terms = total_loss(out, s);
    terms.total.backward();
    const auto g = oracle::grads(out.traj);
    const std::size_t modes = out.traj.dim(1), per_mode = out.traj.dim(2) * kTrajChannels;
    for (std::size_t i = 0; i < out.traj.dim(0); ++i) {
      const int chosen = terms.report.chosen_mode[i];
      for (std::size_t k = 0; k < modes; ++k) {
        const auto* p = g.data() + (i * modes + k) * per_mode;
        const bool any = std::any_of(p, p + per_mode, [](double v) { return v != 0.0; });
        if (static_cast<int>(k) == chosen) {
          empty += any ? 0 : 1;
        } else {
          leaks += any ? 1 : 0;
        }
      }
    }
    ++instances;
  }
  return {leaks == 0 && empty == 0,
          fmt("%zu instances, %zu non-selected modes with gradient, %zu selected modes without",
              instances, leaks, empty)};
}

// 9. The toy preset overfits.
Verdict overfit() {
  using Clock = std::chrono::steady_clock;
  const auto t0 = Clock::now();
  const auto data = toy_scenarios();
  const auto tc = toy_train_config();
  const auto result = toy_train<double>(data, toy_model_config(), tc);
  int violations = 0;
  for (std::size_t e = 1; e < 10 && e < result.curve.size(); ++e) {
    violations += result.curve[e].total > result.curve[e - 1].total ? 1 : 0;
  }
  const HptrModel<double> trained(toy_model_config(), result.weights);
  NoGradGuard ng;
  double ade = 0.0;
  for (const auto& s : data) ade += mean_min_ade(to_prediction_set(trained.forward(s)), s);
  ade /= static_cast<double>(data.size());
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  return {ade < 0.5 && violations <= 1,
          fmt("%zu scenarios, %d epochs, lr %g: minADE %.3f m (limit 0.5), %d loss increases in "
              "the first 10 epochs (limit 1), %.0f s",
              data.size(), tc.epochs, tc.optimizer.lr, ade, violations, secs)};
}

// 10. Post-processing hand cases.
Verdict post_processing() {
  auto mode = [](double y) {
    ModePrediction m;
    m.steps.assign(4, {});
    for (auto& s : m.steps) s[kMuY] = y;
    return m;
  };
  AgentPrediction a;
  a.modes = {mode(0.0), mode(2.0), mode(4.0)};  // A~B, B~C, A and C apart
  a.confidences = {0.5, 0.3, 0.2};
  const auto kept = nms_confidences(a, AgentType::kVehicle);
  const bool nms_ok = kept.confidences[0] > 0 && kept.confidences[1] == 0.0 &&
                      kept.confidences[2] > 0 &&
                      std::abs(kept.confidences[0] + kept.confidences[2] - 1.0) < 1e-12;
  const std::vector<double> logits{1.0, 0.0};
  const auto p = softmax_temperature(logits, 0.5);
  const bool sm_ok = std::abs(p[0] - 0.8808) < 1e-4 && std::abs(p[1] - 0.1192) < 1e-4;
  return {nms_ok && sm_ok,
          fmt("NMS chain confidences (%.3f, %.3f, %.3f); softmax(1, 0; 0.5) = (%.4f, %.4f)",
              kept.confidences[0], kept.confidences[1], kept.confidences[2], p[0], p[1])};
}

// 11. Topology ablations.
Verdict topology_ablations() {
  std::size_t runs = 0, bad = 0;
  bool order_ok = true;
  std::uint64_t lt = 0, df = 0;
  for (const char* file : kFixtureFiles) {
    const auto s = load_scenario(kFixtures / file);
    for (auto topo : kTopologies) {
      ModelConfig cfg;
      cfg.topology = topo;
      cfg.t_f = s.meta.t_f;
      const HptrModel<float> model(cfg, 11);
      NoGradGuard ng;
      const auto out = model.forward(s);
      const auto v = oracle::values(out.traj), c = oracle::values(out.conf_logits);
      const bool finite = std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); }) &&
                          std::all_of(c.begin(), c.end(), [](double x) { return std::isfinite(x); });
      bad += finite ? 0 : 1;
      ++runs;
    }
    ModelConfig lower, both;
    lower.t_f = both.t_f = s.meta.t_f;
    both.topology = Topology::kDiagFull;
    const auto a = analytic_forward_flops(lower, count_scene(s));
    const auto b = analytic_forward_flops(both, count_scene(s));
    order_ok = order_ok && a < b;
    if (std::string(file) == "urban_small.json") {
      lt = a;
      df = b;
    }
  }
  return {bad == 0 && order_ok,
          fmt("%zu fixture runs, %zu non-finite; lower_tri < diag_full FLOPs on every fixture: %s "
              "(urban_small %.3g vs %.3g)",
              runs, bad, order_ok ? "yes" : "no", double(lt), double(df))};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"oracle equivalence", oracle_equivalence},
      {"gradient correctness", gradient_correctness},
      {"rigid equivariance", rigid_equivariance},
      {"knn correctness", knn_correctness},
      {"cache soundness", cache_soundness},
      {"scaling trend", scaling_trend},
      {"loss unit values", loss_units},
      {"hard-assignment sparsity", sparsity},
      {"overfit smoke test", overfit},
      {"post-processing", post_processing},
      {"topology ablations", topology_ablations},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %2zu %-26s %s  %s\n", i + 1, criteria[i].first, v.pass ? "PASS" : "FAIL",
                v.detail.c_str());
    std::fflush(stdout);
    failed += v.pass ? 0 : 1;
  }
  return failed ? 1 : 0;
}
