// SPDX-License-Identifier: Apache-2.0
//
// Streaming inference. A Session encodes the map and runs the map stage once,
// keeps the light stage until the lights change, and reruns only the agent
// side on every step.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "hptr/model.hpp"

namespace hptr {

/// Digest of the (pose, state) tuples of a light set.
std::uint64_t traffic_light_digest(std::span<const RawTrafficLight> lights);

struct StepTrace {
  std::size_t step = 0;  // 0 is the session init
  double latency_us = 0.0;
  bool map_ran = false;
  bool light_ran = false;
  bool agent_ran = false;

  /// e.g. "MP", "TL+AG+AC", "AG+AC"
  std::string stages() const;
};

template <typename T>
class Session {
 public:
  /// Throws ContractError on an empty map. The model must outlive the session.
  Session(const HptrModel<T>& model, std::vector<RawMapPolyline> map);

  struct StepResult {
    ModelOutput<T> output;
    PredictionSet predictions;
    StepTrace trace;
  };

  /// Runs one query. `frame.map` is ignored; the session's map is used.
  StepResult step(const Scenario& frame);

  const StageFeatures<T>& cached_map() const { return map_; }
  const std::vector<RawMapPolyline>& map() const { return raw_map_; }
  std::size_t steps() const { return step_; }
  const std::vector<StepTrace>& log() const { return log_; }

 private:
  const HptrModel<T>* model_;
  std::vector<RawMapPolyline> raw_map_;
  StageFeatures<T> map_;
  StageFeatures<T> lights_;
  std::uint64_t light_digest_ = 0;
  bool have_lights_ = false;
  std::size_t step_ = 0;
  std::vector<StepTrace> log_;
};

/// "step,latency_us,stages" rows.
void write_latency_log(std::ostream& os, const std::vector<StepTrace>& log);
void write_latency_log(const std::filesystem::path& path, const std::vector<StepTrace>& log);

/// "agent_id,mode,confidence,step,x,y,log_sigma_x,log_sigma_y,rho,vx,vy,theta,speed"
/// rows, one per agent, mode and future step, in whatever frame `pred` is in.
void write_predictions(std::ostream& os, const PredictionSet& pred);

// ---------------------------------------------------------------------------
// Post-processing and metrics

/// Suppression distance for near-duplicate modes: 2.5 m vehicles, 1 m
/// pedestrians, 1.5 m cyclists.
double nms_threshold(AgentType type);

/// Greedy pass over modes in descending confidence. A mode whose average
/// displacement to any kept mode is below the threshold gets confidence zero;
/// the survivors are renormalized. Trajectories are not touched.
AgentPrediction nms_confidences(const AgentPrediction& pred, AgentType type);
PredictionSet nms_confidences(const PredictionSet& pred);

/// softmax(logits / tau). Throws DomainError unless tau > 0.
std::vector<double> softmax_temperature(std::span<const double> logits, double tau = 0.5);

inline constexpr double kMissThreshold = 2.0;

struct AgentMetrics {
  int agent_id = 0;
  double min_ade = 0.0;
  double min_fde = 0.0;
  bool miss = false;
};

struct MetricReport {
  double min_ade = 0.0;
  double min_fde = 0.0;
  double miss_rate = 0.0;
  std::vector<AgentMetrics> agents;
};

/// min_ade and min_fde are independent minima over modes; a miss is a
/// min_fde above 2 m. Agents without valid ground truth are skipped.
MetricReport evaluate(const PredictionSet& pred, const Scenario& s);

}  // namespace hptr
