// SPDX-License-Identifier: Apache-2.0
#include "hptr/training.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>
#include <random>

#include "hptr/error.hpp"

namespace hptr {

double nll_gaussian_2d(const std::array<double, kTrajChannels>& s, double x, double y) {
  const double rho = s[kRho];
  const double omr = 1.0 - rho * rho;
  const double zx = (x - s[kMuX]) * std::exp(-s[kLogSigmaX]);
  const double zy = (y - s[kMuY]) * std::exp(-s[kLogSigmaY]);
  return kLog2Pi + s[kLogSigmaX] + s[kLogSigmaY] + 0.5 * std::log(omr) +
         (zx * zx + zy * zy - 2.0 * rho * zx * zy) / (2.0 * omr);
}

double cos_loss(double pred_theta, double gt_theta) { return -std::cos(gt_theta - pred_theta); }

double huber(double r, double delta) {
  const double a = std::abs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

namespace {

double ade(const std::vector<Vec2>& mode, std::span<const Vec2> gt, const Mask& valid) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < gt.size(); ++t) {
    if (!valid[t]) continue;
    total += std::hypot(mode[t].x - gt[t].x, mode[t].y - gt[t].y);
    ++n;
  }
  return total / static_cast<double>(n);
}

std::vector<std::vector<Vec2>> mode_positions(const AgentPrediction& pred) {
  std::vector<std::vector<Vec2>> out;
  for (const auto& m : pred.modes) {
    std::vector<Vec2> pts;
    for (const auto& s : m.steps) pts.push_back({s[kMuX], s[kMuY]});
    out.push_back(std::move(pts));
  }
  return out;
}

std::vector<Vec2> track_positions(const LocalTrack& gt) {
  std::vector<Vec2> out;
  for (const auto& s : gt.steps) out.push_back({s[0], s[1]});
  return out;
}

bool any_valid(const Mask& m) {
  for (auto v : m) {
    if (v) return true;
  }
  return false;
}

}  // namespace

std::size_t hard_assign(const std::vector<std::vector<Vec2>>& modes, std::span<const Vec2> gt,
                        const Mask& valid) {
  if (!any_valid(valid)) throw ContractError("hard assignment needs a valid ground-truth step");
  if (modes.empty()) throw ContractError("hard assignment needs at least one mode");
  std::size_t best = 0;
  double best_ade = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < modes.size(); ++k) {
    if (modes[k].size() != gt.size()) throw DimensionError("mode and track lengths differ");
    const double e = ade(modes[k], gt, valid);
    if (e < best_ade) {
      best_ade = e;
      best = k;
    }
  }
  return best;
}

std::size_t hard_assign(const AgentPrediction& pred, const GroundTruthTrack& gt) {
  const auto local = track_to_local(gt, pred.pose);
  return hard_assign(mode_positions(pred), track_positions(local), local.valid);
}

LocalTrack track_to_local(const GroundTruthTrack& gt, const Pose2& pose) {
  LocalTrack out;
  for (const auto& f : gt) {
    out.valid.push_back(f.valid ? 1 : 0);
    if (!f.valid) {
      out.steps.push_back({});
      continue;
    }
    const Vec2 p = pose.apply_inverse({f.x, f.y});
    const Vec2 v = pose.rotate_inverse({f.vx, f.vy});
    out.steps.push_back({p.x, p.y, v.x, v.y, wrap_angle(f.theta - pose.theta), f.speed});
  }
  return out;
}

namespace {

template <typename T>
Tensor<T> col(const Tensor<T>& x, std::size_t c) {
  return slice(x, 1, c, c + 1);
}

// Piecewise Huber from relu so the kink stays differentiable almost everywhere.
template <typename T>
Tensor<T> huber_t(const Tensor<T>& r, double delta) {
  const auto a = add(relu(r), relu(scale(r, T(-1))));
  const auto over = relu(add_scalar(a, static_cast<T>(-delta)));
  const auto m = sub(a, over);
  return add(scale(mul(m, m), T(0.5)), scale(over, static_cast<T>(delta)));
}

}  // namespace

template <typename T>
LossTerms<T> total_loss(const ModelOutput<T>& out, const Scenario& s) {
  const std::size_t n = out.conf_logits.dim(0);
  const std::size_t m = out.conf_logits.dim(1);
  const std::size_t tf = out.traj.dim(2);
  LossTerms<T> terms;
  terms.report.chosen_mode.assign(n, -1);

  const auto preds = to_prediction_set(out);
  std::vector<LocalTrack> tracks(n);
  std::size_t optimized = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& agent = s.agents.at(out.target_index[i]);
    if (!agent.optimize || agent.future.empty()) continue;
    if (agent.future.size() != tf) {
      throw DimensionError("agent " + std::to_string(agent.id) + " has " +
                           std::to_string(agent.future.size()) + " future steps, model predicts " +
                           std::to_string(tf));
    }
    tracks[i] = track_to_local(agent.future, out.target_pose[i]);
    if (!any_valid(tracks[i].valid)) continue;
    terms.report.chosen_mode[i] = static_cast<int>(hard_assign(
        mode_positions(preds.agents[i]), track_positions(tracks[i]), tracks[i].valid));
    ++optimized;
  }
  terms.report.optimized = optimized;
  if (optimized == 0) {
    const auto zero = scale(sum(out.conf_logits), T(0));
    terms.pos = terms.rot = terms.vel = terms.traj = terms.conf = terms.total = zero;
    return terms;
  }

  IndexMatrix pick(n, 1);
  std::vector<T> gt(n * tf * 6, T(0));
  std::vector<T> step_w(n * tf, T(0));
  std::vector<T> agent_w(n, T(0));
  std::vector<T> onehot(n * m, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    const int k = terms.report.chosen_mode[i];
    pick.at(i, 0) = static_cast<std::int64_t>(i * m + static_cast<std::size_t>(std::max(k, 0)));
    if (k < 0) continue;
    onehot[i * m + static_cast<std::size_t>(k)] = T(1);
    agent_w[i] = static_cast<T>(1.0 / static_cast<double>(optimized));
    std::size_t valid = 0;
    for (auto v : tracks[i].valid) valid += v ? 1 : 0;
    for (std::size_t t = 0; t < tf; ++t) {
      if (!tracks[i].valid[t]) continue;
      step_w[i * tf + t] = static_cast<T>(1.0 / static_cast<double>(valid * optimized));
      for (std::size_t c = 0; c < 6; ++c) {
        gt[(i * tf + t) * 6 + c] = static_cast<T>(tracks[i].steps[t][c]);
      }
    }
  }

  auto flat = reshape(out.traj, {n * m, tf * kTrajChannels});
  auto sel = reshape(gather_rows(flat, pick), {n * tf, kTrajChannels});
  const auto g = Tensor<T>::from({n * tf, 6}, std::move(gt));
  const auto w = Tensor<T>::from({n * tf, 1}, std::move(step_w));

  const auto lsx = col(sel, kLogSigmaX);
  const auto lsy = col(sel, kLogSigmaY);
  const auto rho = col(sel, kRho);
  const auto zx = mul(sub(col(g, 0), col(sel, kMuX)), exp(scale(lsx, T(-1))));
  const auto zy = mul(sub(col(g, 1), col(sel, kMuY)), exp(scale(lsy, T(-1))));
  const auto log_omr = log(add_scalar(scale(mul(rho, rho), T(-1)), T(1)));
  const auto quad = sub(add(mul(zx, zx), mul(zy, zy)), scale(mul(rho, mul(zx, zy)), T(2)));
  const auto nll =
      add_scalar(add(add(lsx, lsy), add(scale(log_omr, T(0.5)),
                                        scale(mul(quad, exp(scale(log_omr, T(-1)))), T(0.5)))),
                 static_cast<T>(kLog2Pi));
  const auto rot = scale(cos(sub(col(g, 4), col(sel, kTheta))), T(-1));
  const auto vel = add(add(huber_t(sub(col(g, 2), col(sel, kVx)), 1.0),
                           huber_t(sub(col(g, 3), col(sel, kVy)), 1.0)),
                       huber_t(sub(col(g, 5), col(sel, kSpeed)), 1.0));
  terms.pos = sum(mul(nll, w));
  terms.rot = sum(mul(rot, w));
  terms.vel = sum(mul(vel, w));
  terms.traj = add(add(terms.pos, terms.rot), terms.vel);

  // Cross-entropy with the row max subtracted as a constant.
  std::vector<T> row_max(n * m);
  const auto lv = out.conf_logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    T mx = lv[i * m];
    for (std::size_t k = 1; k < m; ++k) mx = std::max(mx, lv[i * m + k]);
    for (std::size_t k = 0; k < m; ++k) row_max[i * m + k] = mx;
  }
  const auto shifted = sub(out.conf_logits, Tensor<T>::from({n, m}, std::move(row_max)));
  const auto ones = Tensor<T>::full({m, 1}, T(1));
  const auto lse = log(matmul(exp(shifted), ones));
  const auto picked = matmul(mul(shifted, Tensor<T>::from({n, m}, std::move(onehot))), ones);
  terms.conf = sum(mul(sub(lse, picked), Tensor<T>::from({n, 1}, std::move(agent_w))));
  terms.total = add(terms.traj, terms.conf);

  auto& r = terms.report;
  r.pos = static_cast<double>(terms.pos.item());
  r.rot = static_cast<double>(terms.rot.item());
  r.vel = static_cast<double>(terms.vel.item());
  r.traj = static_cast<double>(terms.traj.item());
  r.conf = static_cast<double>(terms.conf.item());
  r.total = static_cast<double>(terms.total.item());
  return terms;
}

// ---------------------------------------------------------------------------

template <typename T>
AdamW<T>::AdamW(std::vector<Tensor<T>> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

template <typename T>
void AdamW<T>::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    const bool has = p.has_grad();
    const auto g = has ? p.grad() : std::span<const T>{};
    auto val = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < val.size(); ++j) {
      const double gj = has ? static_cast<double>(g[j]) : 0.0;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps) +
                            cfg_.weight_decay * static_cast<double>(val[j]);
      val[j] = static_cast<T>(static_cast<double>(val[j]) - cfg_.lr * update);
    }
  }
}

// ---------------------------------------------------------------------------

double mean_min_ade(const PredictionSet& pred, const Scenario& s) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& a : pred.agents) {
    const auto& agent = s.agents.at(a.agent_index);
    if (agent.future.empty()) continue;
    const auto local = track_to_local(agent.future, a.pose);
    if (!any_valid(local.valid)) continue;
    const auto modes = mode_positions(a);
    const auto gt = track_positions(local);
    total += ade(modes[hard_assign(modes, gt, local.valid)], gt, local.valid);
    ++n;
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

template <typename T>
TrainResult<T> toy_train(const std::vector<Scenario>& scenarios, const ModelConfig& cfg,
                         const TrainConfig& train,
                         const std::function<void(const EpochRecord&)>& on_epoch) {
  if (scenarios.empty()) throw ContractError("toy_train needs at least one scenario");
  ModelConfig model_cfg = cfg;
  if (train.dropout >= 0.0) model_cfg.dropout = train.dropout;
  HptrModel<T> model(model_cfg, train.seed);
  auto& store = model.weights();
  store.set_requires_grad(true);
  std::vector<Tensor<T>> params;
  for (const auto& name : store.names()) params.push_back(store.get(name));
  AdamW<T> opt(params, train.optimizer);
  std::mt19937_64 rng(train.seed ^ 0x9e3779b97f4a7c15ULL);
  ForwardContext ctx{true, &rng};

  TrainResult<T> result;
  const double inv = 1.0 / static_cast<double>(scenarios.size());
  for (int epoch = 1; epoch <= train.epochs; ++epoch) {
    store.zero_grad();
    EpochRecord rec;
    rec.epoch = epoch;
    for (const auto& s : scenarios) {
      const auto out = model.forward(s, ctx);
      const auto terms = total_loss(out, s);
      if (!std::isfinite(terms.report.total)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) +
                             " on scenario '" + s.meta.id + "'");
      }
      scale(terms.total, static_cast<T>(inv)).backward();
      rec.pos += terms.report.pos * inv;
      rec.rot += terms.report.rot * inv;
      rec.vel += terms.report.vel * inv;
      rec.conf += terms.report.conf * inv;
      rec.total += terms.report.total * inv;
      rec.min_ade += mean_min_ade(to_prediction_set(out), s) * inv;
    }
    opt.step();
    result.curve.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  store.set_requires_grad(false);
  result.weights = store;
  return result;
}

std::vector<Scenario> toy_scenarios(std::size_t count, std::uint64_t seed) {
  std::vector<Scenario> out;
  for (std::size_t i = 0; i < count; ++i) {
    SynthConfig sc;
    sc.seed = seed + i;
    sc.n_lanes = 12;
    sc.n_agents = 8;
    sc.n_lights = 2;
    sc.target_fraction = 1.0;
    sc.turning_agents = false;
    sc.extent = 60.0;
    sc.t_f = 4;
    out.push_back(generate_synthetic(sc));
  }
  return out;
}

ModelConfig toy_model_config() {
  auto cfg = ModelConfig::tiny();
  cfg.dropout = 0.0;
  return cfg;
}

TrainConfig toy_train_config() {
  TrainConfig tc;
  tc.epochs = 2000;
  tc.optimizer.lr = 1e-4;
  tc.seed = 1;
  tc.dropout = 0.0;
  return tc;
}

Scenario gradcheck_scenario(std::uint64_t seed) {
  SynthConfig sc;
  sc.seed = seed;
  sc.n_lanes = 10;
  sc.n_agents = 3;
  sc.n_lights = 2;
  sc.t_h = 5;
  sc.t_f = 4;
  return generate_synthetic(sc);
}

FiniteDiffReport loss_gradcheck(HptrModel<double>& model, const Scenario& s, double h,
                                double tol, double abs_floor) {
  auto& store = model.weights();
  std::vector<NamedTensor> params;
  for (const auto& name : store.names()) params.push_back({name, store.get(name)});
  auto report = finite_diff_check(
      [&] { return total_loss(model.forward(s), s).total; }, params, h, tol, abs_floor);
  store.set_requires_grad(false);
  store.zero_grad();
  return report;
}

void write_loss_curve(std::ostream& os, const std::vector<EpochRecord>& curve) {
  os << "epoch,L_pos,L_rot,L_vel,L_conf,L_total,min_ade\n";
  os.precision(9);
  for (const auto& r : curve) {
    os << r.epoch << ',' << r.pos << ',' << r.rot << ',' << r.vel << ',' << r.conf << ','
       << r.total << ',' << r.min_ade << '\n';
  }
}

void write_loss_curve(const std::filesystem::path& path, const std::vector<EpochRecord>& curve) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_loss_curve(out, curve);
}

#define HPTR_INSTANTIATE(T)                                                                 \
  template LossTerms<T> total_loss<T>(const ModelOutput<T>&, const Scenario&);              \
  template class AdamW<T>;                                                                  \
  template TrainResult<T> toy_train<T>(const std::vector<Scenario>&, const ModelConfig&,    \
                                       const TrainConfig&,                                  \
                                       const std::function<void(const EpochRecord&)>&);

HPTR_INSTANTIATE(float)
HPTR_INSTANTIATE(double)

#undef HPTR_INSTANTIATE

}  // namespace hptr
