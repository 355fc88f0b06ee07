// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "hptr/gradcheck.hpp"
#include "hptr/model.hpp"

namespace hptr {

inline constexpr double kLog2Pi = 1.8378770664093453;

// Scalar reference forms.

/// Negative log-density of (x, y) under the step's bivariate normal.
double nll_gaussian_2d(const std::array<double, kTrajChannels>& step, double x, double y);
/// -cos(gt - pred)
double cos_loss(double pred_theta, double gt_theta);
double huber(double residual, double delta = 1.0);

/// Mode whose mean positions have the lowest average displacement to the
/// valid ground-truth steps; ties go to the lowest index.
/// modes[k][t] and gt[t] must be in the same frame. Throws ContractError if
/// no step is valid.
std::size_t hard_assign(const std::vector<std::vector<Vec2>>& modes, std::span<const Vec2> gt,
                        const Mask& valid);
/// Same, for a local-frame prediction and a global-frame track.
std::size_t hard_assign(const AgentPrediction& pred, const GroundTruthTrack& gt);

/// Ground truth of one agent in its own t = 0 frame.
struct LocalTrack {
  std::vector<std::array<double, 6>> steps;  // x, y, vx, vy, theta, speed
  Mask valid;
};
LocalTrack track_to_local(const GroundTruthTrack& gt, const Pose2& pose);

struct LossReport {
  double pos = 0, rot = 0, vel = 0, traj = 0, conf = 0, total = 0;
  /// Selected mode per predicted target; -1 for targets outside the loss.
  std::vector<int> chosen_mode;
  /// Number of targets that contributed.
  std::size_t optimized = 0;
};

template <typename T>
struct LossTerms {
  Tensor<T> pos, rot, vel, traj, conf, total;
  LossReport report;
};

/// Trajectory terms of the hard-assigned mode averaged over valid future
/// steps, plus confidence cross-entropy, averaged over the targets flagged
/// `optimize` that have at least one valid future step.
template <typename T>
LossTerms<T> total_loss(const ModelOutput<T>& out, const Scenario& s);

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, AdamWConfig cfg);
  /// Applies one update from the accumulated grads. Parameters without a
  /// grad are treated as having a zero grad.
  void step();
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamWConfig cfg_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  int epochs = 100;
  AdamWConfig optimizer;
  std::uint64_t seed = 0;
  /// Overrides the model's dropout during training when set to >= 0.
  double dropout = -1.0;
};

struct EpochRecord {
  int epoch = 0;
  double pos = 0, rot = 0, vel = 0, conf = 0, total = 0;
  double min_ade = 0;
};

template <typename T>
struct TrainResult {
  WeightStore<T> weights;
  std::vector<EpochRecord> curve;
};

/// Full-batch training: each epoch accumulates the mean loss over all
/// scenarios and applies one AdamW step. Throws NumericalError on a
/// non-finite loss. `on_epoch` is called after every epoch when set.
template <typename T>
TrainResult<T> toy_train(const std::vector<Scenario>& scenarios, const ModelConfig& cfg,
                         const TrainConfig& train,
                         const std::function<void(const EpochRecord&)>& on_epoch = {});

/// The overfit setup: `count` small constant-velocity scenes, every agent a
/// target, four future steps.
std::vector<Scenario> toy_scenarios(std::size_t count = 8, std::uint64_t seed = 100);
/// Tiny model without dropout.
ModelConfig toy_model_config();
/// lr 1e-4, 2000 epochs. Validated to reach minADE < 0.5 m on toy_scenarios().
TrainConfig toy_train_config();

/// Three agents with four future steps on a small map.
Scenario gradcheck_scenario(std::uint64_t seed);

/// Central differences of total_loss against its analytic gradient for every
/// weight of `model`. Gradients smaller than `abs_floor` are compared in
/// absolute terms, which covers parameters whose exact gradient is zero.
FiniteDiffReport loss_gradcheck(HptrModel<double>& model, const Scenario& s, double h = 1e-5,
                                double tol = 1e-4, double abs_floor = 1e-3);

/// Mean over target agents of the best-mode average displacement.
double mean_min_ade(const PredictionSet& pred, const Scenario& s);

/// "epoch,L_pos,L_rot,L_vel,L_conf,L_total,min_ade" rows.
void write_loss_curve(std::ostream& os, const std::vector<EpochRecord>& curve);
void write_loss_curve(const std::filesystem::path& path, const std::vector<EpochRecord>& curve);

}  // namespace hptr
