// SPDX-License-Identifier: Apache-2.0
#include "hptr/runtime.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include "hptr/error.hpp"
#include "hptr/training.hpp"

namespace hptr {

std::uint64_t traffic_light_digest(std::span<const RawTrafficLight> lights) {
  std::vector<unsigned char> bytes;
  auto put = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
  };
  put(lights.size());
  for (const auto& l : lights) {
    put(std::bit_cast<std::uint64_t>(l.stop_point.x));
    put(std::bit_cast<std::uint64_t>(l.stop_point.y));
    put(std::bit_cast<std::uint64_t>(l.stop_point.theta));
    put(static_cast<std::uint64_t>(l.state));
  }
  return fnv1a64(bytes);
}

std::string StepTrace::stages() const {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += '+';
    out += name;
  };
  add(map_ran, "MP");
  add(light_ran, "TL");
  add(agent_ran, "AG");
  add(agent_ran, "AC");
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

double micros_since(Clock::time_point start) {
  return std::chrono::duration<double, std::micro>(Clock::now() - start).count();
}

}  // namespace

template <typename T>
Session<T>::Session(const HptrModel<T>& model, std::vector<RawMapPolyline> map)
    : model_(&model), raw_map_(std::move(map)) {
  if (raw_map_.empty()) throw ContractError("a session needs a nonempty map");
  NoGradGuard no_grad;
  const auto start = Clock::now();
  map_ = model_->map_stage(model_->encode_map(raw_map_));
  StepTrace trace;
  trace.latency_us = micros_since(start);
  trace.map_ran = true;
  log_.push_back(trace);
}

template <typename T>
typename Session<T>::StepResult Session<T>::step(const Scenario& frame) {
  NoGradGuard no_grad;
  const auto start = Clock::now();
  StepResult result;
  result.trace.step = ++step_;
  const auto digest = traffic_light_digest(frame.lights);
  if (!have_lights_ || digest != light_digest_) {
    lights_ = model_->light_stage(map_, model_->encode_lights(frame.lights));
    light_digest_ = digest;
    have_lights_ = true;
    result.trace.light_ran = true;
  }
  result.output = model_->finish(map_, lights_, frame);
  result.trace.agent_ran = true;
  result.trace.latency_us = micros_since(start);
  result.predictions = to_prediction_set(result.output);
  log_.push_back(result.trace);
  return result;
}

void write_latency_log(std::ostream& os, const std::vector<StepTrace>& log) {
  os << "step,latency_us,stages\n";
  os.precision(6);
  os << std::fixed;
  for (const auto& t : log) os << t.step << ',' << t.latency_us << ',' << t.stages() << '\n';
}

void write_latency_log(const std::filesystem::path& path, const std::vector<StepTrace>& log) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_latency_log(out, log);
}

void write_predictions(std::ostream& os, const PredictionSet& pred) {
  os << "agent_id,mode,confidence,step,x,y,log_sigma_x,log_sigma_y,rho,vx,vy,theta,speed\n";
  os.precision(9);
  for (const auto& a : pred.agents) {
    for (std::size_t k = 0; k < a.modes.size(); ++k) {
      const auto& steps = a.modes[k].steps;
      for (std::size_t t = 0; t < steps.size(); ++t) {
        os << a.agent_id << ',' << k << ',' << a.confidences[k] << ',' << t;
        for (double v : steps[t]) os << ',' << v;
        os << '\n';
      }
    }
  }
}

// ---------------------------------------------------------------------------

double nms_threshold(AgentType type) {
  switch (type) {
    case AgentType::kVehicle: return 2.5;
    case AgentType::kPedestrian: return 1.0;
    case AgentType::kCyclist: return 1.5;
  }
  return 2.5;
}

namespace {

double mode_distance(const ModePrediction& a, const ModePrediction& b) {
  const std::size_t n = std::min(a.steps.size(), b.steps.size());
  if (n == 0) return 0.0;
  double total = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    total += std::hypot(a.steps[t][kMuX] - b.steps[t][kMuX], a.steps[t][kMuY] - b.steps[t][kMuY]);
  }
  return total / static_cast<double>(n);
}

}  // namespace

AgentPrediction nms_confidences(const AgentPrediction& pred, AgentType type) {
  const double thr = nms_threshold(type);
  const std::size_t m = pred.modes.size();
  if (pred.confidences.size() != m) throw DimensionError("one confidence per mode expected");
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return pred.confidences[a] > pred.confidences[b];
  });
  AgentPrediction out = pred;
  std::vector<std::size_t> kept;
  for (auto k : order) {
    bool suppressed = pred.confidences[k] <= 0.0;
    for (auto j : kept) {
      if (suppressed) break;
      suppressed = mode_distance(pred.modes[k], pred.modes[j]) < thr;
    }
    if (suppressed) {
      out.confidences[k] = 0.0;
    } else {
      kept.push_back(k);
    }
  }
  double total = 0.0;
  for (double c : out.confidences) total += c;
  if (total > 0.0) {
    for (auto& c : out.confidences) c /= total;
  }
  return out;
}

PredictionSet nms_confidences(const PredictionSet& pred) {
  PredictionSet out;
  for (const auto& a : pred.agents) out.agents.push_back(nms_confidences(a, a.type));
  return out;
}

std::vector<double> softmax_temperature(std::span<const double> logits, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw DomainError("temperature must be positive");
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end()) / tau;
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] / tau - mx);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

MetricReport evaluate(const PredictionSet& pred, const Scenario& s) {
  MetricReport report;
  std::size_t misses = 0;
  for (const auto& a : pred.agents) {
    const auto& agent = s.agents.at(a.agent_index);
    if (agent.future.empty()) continue;
    const auto gt = track_to_local(agent.future, a.pose);
    std::size_t last = gt.valid.size();
    std::size_t valid = 0;
    for (std::size_t t = 0; t < gt.valid.size(); ++t) {
      if (!gt.valid[t]) continue;
      last = t;
      ++valid;
    }
    if (valid == 0) continue;
    AgentMetrics m;
    m.agent_id = a.agent_id;
    m.min_ade = m.min_fde = INFINITY;
    for (const auto& mode : a.modes) {
      if (mode.steps.size() != gt.steps.size()) {
        throw DimensionError("prediction and ground truth lengths differ");
      }
      double total = 0.0;
      for (std::size_t t = 0; t < gt.steps.size(); ++t) {
        if (!gt.valid[t]) continue;
        total += std::hypot(mode.steps[t][kMuX] - gt.steps[t][0],
                            mode.steps[t][kMuY] - gt.steps[t][1]);
      }
      m.min_ade = std::min(m.min_ade, total / static_cast<double>(valid));
      m.min_fde = std::min(m.min_fde, std::hypot(mode.steps[last][kMuX] - gt.steps[last][0],
                                                 mode.steps[last][kMuY] - gt.steps[last][1]));
    }
    m.miss = m.min_fde > kMissThreshold;
    misses += m.miss ? 1 : 0;
    report.min_ade += m.min_ade;
    report.min_fde += m.min_fde;
    report.agents.push_back(m);
  }
  if (!report.agents.empty()) {
    const auto n = static_cast<double>(report.agents.size());
    report.min_ade /= n;
    report.min_fde /= n;
    report.miss_rate = static_cast<double>(misses) / n;
  }
  return report;
}

template class Session<float>;
template class Session<double>;

}  // namespace hptr
