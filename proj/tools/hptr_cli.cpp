// SPDX-License-Identifier: Apache-2.0
//
// hptr command-line tool.
//
// Exit status: 0 success, 1 usage, 2 validation failure, 3 numerical failure.
#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "hptr/bench.hpp"
#include "hptr/error.hpp"
#include "hptr/model.hpp"
#include "hptr/runtime.hpp"
#include "hptr/training.hpp"

namespace fs = std::filesystem;
using namespace hptr;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kValidation = 2, kNumerical = 3 };

struct CommonFlags {
  std::optional<std::string> topology;
  std::string precision = "f32";
  std::uint64_t seed = 0;
  std::string weights;
  std::string config;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--topology", f.topology, "attention topology")
      ->check(CLI::IsMember({"lower_tri", "diag", "full", "diag_full"}));
  cmd->add_option("--precision", f.precision, "tensor precision")
      ->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--seed", f.seed, "RNG seed");
  cmd->add_option("--weights", f.weights, "weight file")->check(CLI::ExistingFile);
  cmd->add_option("--config", f.config, "model config JSON")->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "output path (default: stdout)");
}

// Default architecture with the horizon taken from a scenario.
ModelConfig default_for(const Scenario& s) {
  ModelConfig cfg;
  cfg.t_f = s.meta.t_f;
  return cfg;
}

ModelConfig resolve_config(const CommonFlags& f, ModelConfig fallback) {
  ModelConfig cfg = f.config.empty() ? fallback : load_model_config(f.config);
  if (f.topology) cfg.topology = parse_topology(*f.topology);
  cfg.validate();
  return cfg;
}

// Writes to --out when given, stdout otherwise.
void emit(const std::string& path, const std::function<void(std::ostream&)>& write) {
  if (path.empty()) {
    write(std::cout);
    return;
  }
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path + " for writing");
  write(os);
}

template <typename T>
HptrModel<T> make_model(const ModelConfig& cfg, const CommonFlags& f, bool zero = false) {
  if (!f.weights.empty()) return HptrModel<T>(cfg, load_weights<T>(f.weights));
  HptrModel<T> model(cfg, f.seed);
  if (zero) {
    for (const auto& name : model.weights().names()) {
      auto v = model.weights().get(name).mutable_data();
      std::fill(v.begin(), v.end(), T(0));
    }
  }
  return model;
}

template <typename F>
int dispatch(const std::string& precision, F&& f) {
  return precision == "f64" ? f.template operator()<double>() : f.template operator()<float>();
}

void check_finite(const PredictionSet& pred) {
  for (const auto& a : pred.agents) {
    for (const auto& m : a.modes) {
      for (const auto& s : m.steps) {
        for (double v : s) {
          if (!std::isfinite(v)) throw NumericalError("non-finite prediction");
        }
      }
    }
  }
}

void write_metrics(std::ostream& os, const MetricReport& r) {
  os << "min_ade,min_fde,miss_rate,agents\n"
     << r.min_ade << ',' << r.min_fde << ',' << r.miss_rate << ',' << r.agents.size() << '\n';
}

// ---------------------------------------------------------------------------

struct GenFlags {
  std::size_t count = 1;
  SynthConfig synth;
  bool constant_velocity = false;
};

int run_gen(const CommonFlags& f, GenFlags g) {
  g.synth.turning_agents = !g.constant_velocity;
  if (g.count == 1) {
    g.synth.seed = f.seed;
    const auto s = generate_synthetic(g.synth);
    if (f.out.empty()) {
      std::cout << scenario_to_json(s) << '\n';
    } else {
      save_scenario(f.out, s);
    }
    return kOk;
  }
  if (f.out.empty()) throw ContractError("--out must name a directory when --count > 1");
  fs::create_directories(f.out);
  for (std::size_t i = 0; i < g.count; ++i) {
    g.synth.seed = f.seed + i;
    char name[32];
    std::snprintf(name, sizeof(name), "scenario_%04zu.json", i);
    save_scenario(fs::path(f.out) / name, generate_synthetic(g.synth));
  }
  return kOk;
}

struct PredictFlags {
  std::string scenario;
  bool nms = false;
  bool zero_weights = false;
  double temperature = 1.0;
};

int run_predict(const CommonFlags& f, const PredictFlags& p) {
  const auto s = load_scenario(p.scenario);
  const auto cfg = resolve_config(f, default_for(s));
  return dispatch(f.precision, [&]<typename T>() {
    const auto model = make_model<T>(cfg, f, p.zero_weights);
    NoGradGuard no_grad;
    auto pred = to_prediction_set(model.forward(s), p.temperature);
    check_finite(pred);
    const auto metrics = evaluate(pred, s);
    if (p.nms) pred = nms_confidences(pred);
    emit(f.out, [&](std::ostream& os) { write_predictions(os, predictions_to_global(pred)); });
    if (!metrics.agents.empty()) write_metrics(std::cerr, metrics);
    return kOk;
  });
}

struct StreamFlags {
  std::vector<std::string> frames;
  std::size_t steps = 100;
  bool check = false;
  double tolerance = 1e-5;
};

int run_stream(const CommonFlags& f, const StreamFlags& st) {
  std::vector<Scenario> frames;
  for (const auto& path : st.frames) frames.push_back(load_scenario(path));
  const auto cfg = resolve_config(f, default_for(frames.front()));
  return dispatch(f.precision, [&]<typename T>() {
    const auto model = make_model<T>(cfg, f);
    Session<T> session(model, frames.front().map);
    double worst = 0.0;
    for (std::size_t i = 0; i < st.steps; ++i) {
      const auto& frame = frames[i % frames.size()];
      const auto res = session.step(frame);
      check_finite(res.predictions);
      if (!st.check) continue;
      NoGradGuard no_grad;
      Scenario offline = frame;
      offline.map = session.map();
      const auto ref = model.forward(offline);
      const auto a = res.output.traj.data();
      const auto b = ref.traj.data();
      for (std::size_t j = 0; j < a.size(); ++j) {
        worst = std::max(worst, static_cast<double>(std::abs(a[j] - b[j])));
      }
    }
    emit(f.out, [&](std::ostream& os) { write_latency_log(os, session.log()); });
    if (st.check) {
      std::cerr << "max_deviation," << worst << '\n';
      if (!(worst <= st.tolerance)) return static_cast<int>(kNumerical);
    }
    return static_cast<int>(kOk);
  });
}

struct GradcheckFlags {
  double h = 1e-5;
  double tol = 1e-4;
  double floor = 1e-3;
};

int run_gradcheck(const CommonFlags& f, const GradcheckFlags& g) {
  const auto cfg = resolve_config(f, ModelConfig::tiny());
  auto dcfg = cfg;
  dcfg.dropout = 0.0;
  HptrModel<double> model(dcfg, f.seed);
  const auto s = gradcheck_scenario(f.seed);
  const auto report = loss_gradcheck(model, s, g.h, g.tol, g.floor);
  emit(f.out, [&](std::ostream& os) {
    os << "param,count,max_rel_error,max_abs_error,status\n";
    for (const auto& p : report.params) {
      os << p.name << ',' << p.count << ',' << p.max_rel_error << ',' << p.max_abs_error << ','
         << (p.passed ? "ok" : "fail") << '\n';
    }
  });
  std::cerr << (report.passed ? "PASS" : "FAIL") << " gradcheck topology="
            << topology_name(cfg.topology) << " elements=" << report.checked_elements
            << " max_rel_error=" << report.max_rel_error << '\n';
  return report.passed ? kOk : kNumerical;
}

struct TrainFlags {
  std::size_t scenarios = 8;
  std::uint64_t data_seed = 100;
  TrainConfig train = toy_train_config();
  std::string save_weights;
};

int run_train(const CommonFlags& f, TrainFlags t, bool seed_given) {
  const auto cfg = resolve_config(f, toy_model_config());
  const auto data = toy_scenarios(t.scenarios, t.data_seed);
  if (seed_given) t.train.seed = f.seed;
  return dispatch(f.precision, [&]<typename T>() {
    const auto result = toy_train<T>(data, cfg, t.train);
    emit(f.out, [&](std::ostream& os) { write_loss_curve(os, result.curve); });
    HptrModel<T> model(cfg, result.weights);
    NoGradGuard no_grad;
    double ade = 0.0;
    for (const auto& s : data) ade += mean_min_ade(to_prediction_set(model.forward(s)), s);
    std::cerr << "final_min_ade," << ade / static_cast<double>(data.size()) << '\n';
    if (!t.save_weights.empty()) {
      // The config goes next to the weights so eval and predict can bind them.
      save_weights(t.save_weights, result.weights);
      save_model_config(fs::path(t.save_weights).replace_extension(".json"), cfg);
    }
    return static_cast<int>(kOk);
  });
}

struct BenchFlags {
  BenchConfig bench;
  std::string mode = "both";
};

int run_bench(const CommonFlags& f, BenchFlags b) {
  b.bench.seed = f.seed;
  b.bench.model = resolve_config(f, ModelConfig::bench());
  std::vector<BenchMode> modes;
  if (b.mode != "agent_centric_emulation") modes.push_back(BenchMode::kPairwiseRelative);
  if (b.mode != "pairwise_relative") modes.push_back(BenchMode::kAgentCentricEmulation);
  std::vector<BenchResult> rows;
  for (auto m : modes) {
    const auto part = bench_scaling(b.bench, m);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  emit(f.out, [&](std::ostream& os) { write_bench_results(os, rows); });
  return kOk;
}

struct EvalFlags {
  std::vector<std::string> inputs;
};

int run_eval(const CommonFlags& f, const EvalFlags& e) {
  std::vector<fs::path> files;
  for (const auto& in : e.inputs) {
    if (fs::is_directory(in)) {
      for (const auto& entry : fs::directory_iterator(in)) {
        if (entry.path().extension() == ".json") files.push_back(entry.path());
      }
    } else {
      files.emplace_back(in);
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ContractError("no scenario files to evaluate");
  const auto cfg = resolve_config(f, default_for(load_scenario(files.front())));
  return dispatch(f.precision, [&]<typename T>() {
    const auto model = make_model<T>(cfg, f);
    NoGradGuard no_grad;
    emit(f.out, [&](std::ostream& os) {
      os << "scenario,agents,min_ade,min_fde,miss_rate\n";
      double ade = 0, fde = 0, miss = 0;
      std::size_t n = 0;
      for (const auto& path : files) {
        const auto s = load_scenario(path);
        const auto pred = to_prediction_set(model.forward(s));
        check_finite(pred);
        const auto r = evaluate(pred, s);
        os << s.meta.id << ',' << r.agents.size() << ',' << r.min_ade << ',' << r.min_fde << ','
           << r.miss_rate << '\n';
        const auto w = static_cast<double>(r.agents.size());
        ade += r.min_ade * w;
        fde += r.min_fde * w;
        miss += r.miss_rate * w;
        n += r.agents.size();
      }
      if (n > 0) {
        const auto w = static_cast<double>(n);
        os << "mean," << n << ',' << ade / w << ',' << fde / w << ',' << miss / w << '\n';
      }
    });
    return static_cast<int>(kOk);
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hptr: pairwise-relative trajectory prediction"};
  app.require_subcommand(1);
  CommonFlags common;

  GenFlags gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate synthetic scenarios");
  add_common(gen_cmd, common);
  gen_cmd->add_option("--count", gen.count, "number of scenarios")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--agents", gen.synth.n_agents, "agents per scenario");
  gen_cmd->add_option("--lanes", gen.synth.n_lanes, "map polylines per scenario");
  gen_cmd->add_option("--lights", gen.synth.n_lights, "traffic lights per scenario");
  gen_cmd->add_option("--t-f", gen.synth.t_f, "future steps");
  gen_cmd->add_option("--extent", gen.synth.extent, "map side length in meters");
  gen_cmd->add_option("--target-fraction", gen.synth.target_fraction, "fraction of targets");
  gen_cmd->add_flag("--constant-velocity", gen.constant_velocity, "no turning agents");

  PredictFlags predict;
  auto* predict_cmd = app.add_subcommand("predict", "offline forward pass and metrics");
  add_common(predict_cmd, common);
  predict_cmd->add_option("scenario", predict.scenario, "scenario JSON")
      ->required()
      ->check(CLI::ExistingFile);
  predict_cmd->add_flag("--nms", predict.nms, "suppress near-duplicate modes");
  predict_cmd->add_flag("--zero-weights", predict.zero_weights, "all weights zero");
  predict_cmd->add_option("--temperature", predict.temperature, "confidence softmax temperature")
      ->check(CLI::PositiveNumber);

  StreamFlags stream;
  auto* stream_cmd = app.add_subcommand("stream", "cached session over a frame sequence");
  add_common(stream_cmd, common);
  stream_cmd->add_option("frames", stream.frames, "scenario frames, cycled")
      ->required()
      ->check(CLI::ExistingFile);
  stream_cmd->add_option("--steps", stream.steps, "number of queries");
  stream_cmd->add_flag("--check", stream.check, "compare every step against a full forward");
  stream_cmd->add_option("--tolerance", stream.tolerance, "max deviation for --check");

  GradcheckFlags grad;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite differences on the tiny model (f64)");
  add_common(grad_cmd, common);
  grad_cmd->add_option("--step", grad.h, "difference step");
  grad_cmd->add_option("--tol", grad.tol, "max relative error");
  grad_cmd->add_option("--floor", grad.floor, "absolute floor of the relative error");

  TrainFlags train;
  auto* train_cmd = app.add_subcommand("train-toy", "overfit a few synthetic scenarios");
  add_common(train_cmd, common);
  train_cmd->add_option("--epochs", train.train.epochs)->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr", train.train.optimizer.lr)->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--scenarios", train.scenarios)->check(CLI::PositiveNumber);
  train_cmd->add_option("--data-seed", train.data_seed, "seed of the first toy scenario");
  train_cmd->add_option("--save-weights", train.save_weights,
                        "write trained weights here, and the config as <name>.json");

  BenchFlags bench;
  auto* bench_cmd = app.add_subcommand("bench", "latency and memory scaling");
  add_common(bench_cmd, common);
  bench_cmd->add_option("--agents", bench.bench.agent_counts, "agent counts")->delimiter(',');
  bench_cmd->add_option("--mode", bench.mode)
      ->check(CLI::IsMember({"pairwise_relative", "agent_centric_emulation", "both"}));
  bench_cmd->add_option("--map", bench.bench.n_map, "map polylines");
  bench_cmd->add_option("--lights", bench.bench.n_lights, "traffic lights");
  bench_cmd->add_option("--reps", bench.bench.repetitions, "timed repetitions")
      ->check(CLI::Range(20, 100000));
  bench_cmd->add_option("--warmup", bench.bench.warmup, "untimed warm-up runs");
  bench_cmd->add_flag("--memory-only", bench.bench.memory_only, "skip timing");

  EvalFlags eval;
  auto* eval_cmd = app.add_subcommand("eval", "metrics over scenario files or directories");
  add_common(eval_cmd, common);
  eval_cmd->add_option("inputs", eval.inputs, "scenario files or directories")
      ->required()
      ->check(CLI::ExistingPath);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen_cmd) return run_gen(common, gen);
    if (*predict_cmd) return run_predict(common, predict);
    if (*stream_cmd) return run_stream(common, stream);
    if (*grad_cmd) return run_gradcheck(common, grad);
    if (*train_cmd) return run_train(common, train, train_cmd->count("--seed") > 0);
    if (*bench_cmd) return run_bench(common, bench);
    if (*eval_cmd) return run_eval(common, eval);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const DomainError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  }
  return kUsage;
}
