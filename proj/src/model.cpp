// SPDX-License-Identifier: Apache-2.0
#include "hptr/model.hpp"

#include <algorithm>
#include <cmath>

#include "hptr/error.hpp"

namespace hptr {

namespace {

bool has_intra(Topology t) { return t != Topology::kFull; }
bool has_full(Topology t) { return t == Topology::kFull || t == Topology::kDiagFull; }

template <typename T>
std::vector<KnarpeBlockParams<T>> build_blocks(ParamBuilder<T>& pb, const std::string& stage,
                                               int layers, const ModelConfig& cfg) {
  std::vector<KnarpeBlockParams<T>> out;
  for (int i = 0; i < layers; ++i) {
    out.push_back(KnarpeBlockParams<T>::build(pb, stage + "." + std::to_string(i), cfg.dim,
                                              cfg.heads, cfg.ff_dim));
  }
  return out;
}

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::build(ParamBuilder<T>& pb, const ModelConfig& cfg) {
  ModelParams p;
  p.encoders = EncoderParams<T>::build(pb, cfg.dim, cfg.c_mp, cfg.c_tl);
  const auto& l = cfg.layers;
  switch (cfg.topology) {
    case Topology::kLowerTri:
      p.intra_mp = build_blocks(pb, "intra_mp", l.intra_mp, cfg);
      p.enhance_tl = build_blocks(pb, "enhance_tl", l.enhance_tl, cfg);
      p.enhance_ag = build_blocks(pb, "enhance_ag", l.enhance_ag, cfg);
      break;
    case Topology::kDiag:
    case Topology::kDiagFull:
      p.intra_mp = build_blocks(pb, "intra_mp", l.intra_mp, cfg);
      p.intra_tl = build_blocks(pb, "intra_tl", l.intra_tl, cfg);
      p.intra_ag = build_blocks(pb, "intra_ag", l.intra_ag, cfg);
      break;
    case Topology::kFull:
      break;
  }
  if (has_full(cfg.topology)) p.all2all = build_blocks(pb, "all2all", l.all2all, cfg);
  p.ac2all = build_blocks(pb, "ac2all", l.ac2all, cfg);
  const auto types = static_cast<std::size_t>(cfg.agent_types);
  p.anchor_embed = pb.xavier("anchors.embed", {types, cfg.n_anchors, cfg.dim}, cfg.n_anchors,
                             cfg.dim, cfg.anchor_init_scale);
  p.anchor_proj = Linear<T>::build(pb, "anchors.proj", 2 * cfg.dim, cfg.dim);
  p.head_conf = Mlp3<T>::build(pb, "head_conf", cfg.dim, cfg.dim, 1);
  p.head_traj = Mlp3<T>::build(pb, "head_traj", cfg.dim, cfg.dim,
                               static_cast<std::size_t>(cfg.t_f) * kTrajChannels);
  return p;
}

template <typename T>
HptrModel<T>::HptrModel(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), encoder_((cfg.validate(), cfg.encoding())) {
  ParamBuilder<T> pb(store_, ParamBuilder<T>::Mode::kInitialize, seed);
  params_ = ModelParams<T>::build(pb, cfg_);
}

template <typename T>
HptrModel<T>::HptrModel(const ModelConfig& cfg, WeightStore<T> weights)
    : cfg_(cfg), store_(std::move(weights)), encoder_((cfg.validate(), cfg.encoding())) {
  ParamBuilder<T> pb(store_, ParamBuilder<T>::Mode::kBind);
  params_ = ModelParams<T>::build(pb, cfg_);
  if (pb.requested() != store_.size()) {
    throw ContractError("weight store holds " + std::to_string(store_.size()) +
                        " tensors but the configured model uses " +
                        std::to_string(pb.requested()));
  }
}

template <typename T>
TokenSet<T> HptrModel<T>::encode_map(std::span<const RawMapPolyline> map) const {
  return hptr::encode_map<T>(map, cfg_.c_mp, params_.encoders.map);
}

template <typename T>
TokenSet<T> HptrModel<T>::encode_lights(std::span<const RawTrafficLight> lights) const {
  return encode_traffic_lights<T>(lights, cfg_.c_tl, params_.encoders.light);
}

template <typename T>
TokenSet<T> HptrModel<T>::encode_agents(std::span<const RawAgent> agents, double dt) const {
  return hptr::encode_agents<T>(agents, dt, params_.encoders.agent);
}

namespace {

template <typename T>
StageFeatures<T> from_tokens(const TokenSet<T>& tokens) {
  return {tokens.poses, tokens.attrs};
}

template <typename T>
StageFeatures<T> join(std::initializer_list<const StageFeatures<T>*> sets, std::size_t dim) {
  StageFeatures<T> out;
  std::vector<Tensor<T>> parts;
  for (const auto* s : sets) {
    if (s->empty()) continue;
    out.poses.insert(out.poses.end(), s->poses.begin(), s->poses.end());
    parts.push_back(s->features);
  }
  if (parts.empty()) {
    out.features = Tensor<T>::zeros({0, dim});
  } else if (parts.size() == 1) {
    out.features = parts.front();
  } else {
    out.features = concat(parts, 0);
  }
  return out;
}

}  // namespace

// Runs a stack of blocks where `src` attends to `context` (or to itself).
template <typename T>
static Tensor<T> run_stack(const std::vector<KnarpeBlockParams<T>>& blocks,
                           const StageFeatures<T>& src, const StageFeatures<T>* context,
                           std::size_t k, const RelativePoseEncoder& encoder,
                           const ModelConfig& cfg, const ForwardContext& ctx) {
  const StageFeatures<T>& tgt = context ? *context : src;
  const std::size_t slots = std::min(k, tgt.size());
  auto nb = knn_indices(src.poses, tgt.poses, slots);
  const auto geom = build_pair_geometry<T>(src.poses, tgt.poses, std::move(nb), encoder,
                                           cfg.heads, 1);
  const auto mode = context ? AttentionMode::kCross : AttentionMode::kSelf;
  Tensor<T> x = src.features;
  for (const auto& b : blocks) {
    x = knarpe_block(x, context ? context->features : x, geom, b, mode, cfg.attention(),
                     cfg.dropout, ctx);
  }
  return x;
}

template <typename T>
StageFeatures<T> HptrModel<T>::map_stage(const TokenSet<T>& mp, const ForwardContext& ctx) const {
  if (mp.empty()) throw ContractError("the map has no polylines");
  auto out = from_tokens(mp);
  if (has_intra(cfg_.topology)) {
    out.features = run_stack<T>(params_.intra_mp, out, nullptr, cfg_.k, encoder_, cfg_, ctx);
  }
  return out;
}

template <typename T>
StageFeatures<T> HptrModel<T>::light_stage(const StageFeatures<T>& mp, const TokenSet<T>& tl,
                                           const ForwardContext& ctx) const {
  auto out = from_tokens(tl);
  if (tl.empty()) return out;
  switch (cfg_.topology) {
    case Topology::kLowerTri:
      out.features = run_stack(params_.enhance_tl, out, &mp, cfg_.k * cfg_.gamma_tl, encoder_,
                               cfg_, ctx);
      break;
    case Topology::kDiag:
    case Topology::kDiagFull:
      out.features = run_stack<T>(params_.intra_tl, out, nullptr, cfg_.k, encoder_, cfg_, ctx);
      break;
    case Topology::kFull:
      break;
  }
  return out;
}

template <typename T>
StageFeatures<T> HptrModel<T>::agent_stage(const StageFeatures<T>& mp, const StageFeatures<T>& tl,
                                           const TokenSet<T>& ag,
                                           const ForwardContext& ctx) const {
  auto out = from_tokens(ag);
  if (ag.empty()) return out;
  switch (cfg_.topology) {
    case Topology::kLowerTri: {
      const auto context = join({&mp, &tl}, cfg_.dim);
      out.features = run_stack(params_.enhance_ag, out, &context, cfg_.k * cfg_.gamma_ag,
                               encoder_, cfg_, ctx);
      break;
    }
    case Topology::kDiag:
    case Topology::kDiagFull:
      out.features = run_stack<T>(params_.intra_ag, out, nullptr, cfg_.k, encoder_, cfg_, ctx);
      break;
    case Topology::kFull:
      break;
  }
  return out;
}

template <typename T>
std::array<StageFeatures<T>, 3> HptrModel<T>::fuse_stage(const StageFeatures<T>& mp,
                                                         const StageFeatures<T>& tl,
                                                         const StageFeatures<T>& ag,
                                                         const ForwardContext& ctx) const {
  if (!has_full(cfg_.topology)) return {mp, tl, ag};
  auto all = join({&mp, &tl, &ag}, cfg_.dim);
  const auto fused = run_stack<T>(params_.all2all, all, nullptr, cfg_.k, encoder_, cfg_, ctx);
  std::array<StageFeatures<T>, 3> out{mp, tl, ag};
  std::size_t begin = 0;
  for (auto& part : out) {
    if (part.empty()) continue;
    part.features = slice(fused, 0, begin, begin + part.size());
    begin += part.size();
  }
  return out;
}

template <typename T>
Tensor<T> HptrModel<T>::make_anchor_tokens(const Tensor<T>& ag_attrs,
                                           std::span<const std::size_t> targets,
                                           std::span<const AgentType> types) const {
  if (targets.size() != types.size()) throw DimensionError("one agent type per target expected");
  const std::size_t n = targets.size();
  const std::size_t m = cfg_.n_anchors;
  const std::size_t d = cfg_.dim;
  IndexMatrix agent_idx(n, m);
  IndexMatrix type_idx(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const auto type = static_cast<int>(types[i]);
    if (type < 0 || type >= cfg_.agent_types) throw DomainError("agent type has no anchors");
    for (std::size_t a = 0; a < m; ++a) agent_idx.at(i, a) = static_cast<std::int64_t>(targets[i]);
    type_idx.at(i, 0) = type;
  }
  auto agent = gather_rows(ag_attrs, agent_idx);  // [n, m, D]
  const auto types_n = static_cast<std::size_t>(cfg_.agent_types);
  auto embed = gather_rows(reshape(params_.anchor_embed, {types_n, m * d}), type_idx);
  embed = reshape(embed, {n, m, d});
  auto merged = reshape(concat<T>({agent, embed}, 2), {n * m, 2 * d});
  return params_.anchor_proj(merged);
}

template <typename T>
Tensor<T> HptrModel<T>::anchor_stage(const StageFeatures<T>& mp, const StageFeatures<T>& tl,
                                     const StageFeatures<T>& ag,
                                     std::span<const std::size_t> targets,
                                     std::span<const AgentType> types,
                                     const ForwardContext& ctx) const {
  if (targets.empty()) throw ContractError("no target agents to predict");
  auto x = make_anchor_tokens(ag.features, targets, types);
  std::vector<Pose2> poses;
  for (auto t : targets) poses.push_back(ag.poses.at(t));
  const auto context = join({&mp, &tl, &ag}, cfg_.dim);
  const std::size_t slots = std::min(cfg_.k * cfg_.gamma_ac, context.size());
  auto nb = knn_indices(poses, context.poses, slots);
  const auto geom = build_pair_geometry<T>(poses, context.poses, std::move(nb), encoder_,
                                           cfg_.heads, cfg_.n_anchors);
  for (const auto& b : params_.ac2all) {
    x = knarpe_block(x, context.features, geom, b, AttentionMode::kCross, cfg_.attention(),
                     cfg_.dropout, ctx);
  }
  return x;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> HptrModel<T>::decode_heads(const Tensor<T>& z,
                                                           std::size_t targets) const {
  const std::size_t m = cfg_.n_anchors;
  const auto tf = static_cast<std::size_t>(cfg_.t_f);
  if (z.rank() != 2 || z.dim(0) != targets * m || z.dim(1) != cfg_.dim) {
    throw DimensionError("decode_heads expects [targets * N_AC, D], got " + shape_str(z.shape()));
  }
  auto logits = reshape(params_.head_conf(z), {targets, m});
  auto raw = reshape(params_.head_traj(z), {targets * m * tf, kTrajChannels});
  const T lim = static_cast<T>(kLogSigmaLimit);
  auto traj = concat<T>({slice(raw, 1, kMuX, kLogSigmaX),
                         clamp(slice(raw, 1, kLogSigmaX, kRho), -lim, lim),
                         scale(tanh(slice(raw, 1, kRho, kVx)), static_cast<T>(kRhoLimit)),
                         slice(raw, 1, kVx, kTrajChannels)},
                        1);
  return {logits, reshape(traj, {targets, m, tf, kTrajChannels})};
}

template <typename T>
ModelOutput<T> HptrModel<T>::finish(const StageFeatures<T>& mp, const StageFeatures<T>& tl,
                                    const Scenario& s, const ForwardContext& ctx) const {
  ModelOutput<T> out;
  out.target_index = s.target_indices();
  if (out.target_index.empty()) throw ContractError("scenario has no target agents");
  for (auto i : out.target_index) {
    out.target_id.push_back(s.agents[i].id);
    out.target_pose.push_back(s.agents[i].current_pose());
    out.target_type.push_back(s.agents[i].type);
  }
  const auto ag = agent_stage(mp, tl, encode_agents(s.agents, s.meta.dt), ctx);
  const auto fused = fuse_stage(mp, tl, ag, ctx);
  const auto z =
      anchor_stage(fused[0], fused[1], fused[2], out.target_index, out.target_type, ctx);
  std::tie(out.conf_logits, out.traj) = decode_heads(z, out.target_index.size());
  return out;
}

template <typename T>
ModelOutput<T> HptrModel<T>::forward(const Scenario& s, const ForwardContext& ctx) const {
  if (s.target_indices().empty()) throw ContractError("scenario has no target agents");
  const auto mp = map_stage(encode_map(s.map), ctx);
  const auto tl = light_stage(mp, encode_lights(s.lights), ctx);
  return finish(mp, tl, s, ctx);
}

// ---------------------------------------------------------------------------

SceneCounts count_scene(const Scenario& s) {
  SceneCounts c;
  c.n_mp = s.map.size();
  for (const auto& p : s.map) c.mp_nodes = std::max(c.mp_nodes, p.node_pos.size());
  c.n_tl = s.lights.size();
  c.n_ag = s.agents.size();
  c.t_h = s.agents.empty() ? 0 : s.agents.front().history.size();
  c.n_targets = s.target_indices().size();
  return c;
}

namespace {

// One pre-LN block: S sources in G pose groups attend to K of N targets.
std::uint64_t block_flops(const ModelConfig& cfg, std::uint64_t s, std::uint64_t g,
                          std::uint64_t n, std::uint64_t k) {
  const std::uint64_t d = cfg.dim;
  const std::uint64_t f = cfg.ff_dim;
  std::uint64_t total = 0;
  total += 2 * s * d * d;              // query
  total += 2 * 2 * n * d * d;          // key and value of every target
  total += 2 * 2 * g * k * 3 * d * d;  // key and value of the pair encoding
  total += 2 * 2 * s * k * d;          // logits and weighted sum
  total += 2 * s * d * d;              // output projection
  total += 2 * 2 * s * d * f;          // feed-forward
  return total;
}

std::uint64_t mlp3_flops(std::uint64_t rows, std::uint64_t in, std::uint64_t hidden,
                         std::uint64_t out) {
  return 2 * rows * (in * hidden + hidden * hidden + hidden * out);
}

}  // namespace

std::uint64_t analytic_forward_flops(const ModelConfig& cfg, const SceneCounts& c) {
  const std::uint64_t d = cfg.dim;
  const auto& l = cfg.layers;
  std::uint64_t total = 0;
  total += mlp3_flops(c.n_mp * c.mp_nodes, kMapNodeBaseFeatures + cfg.c_mp, d, d);
  total += mlp3_flops(c.n_ag * c.t_h, kAgentStepFeatures + kAgentStaticFeatures, d, d);
  total += mlp3_flops(c.n_tl, cfg.c_tl, d, d);

  auto self = [&](std::uint64_t n, int layers) {
    if (n == 0) return std::uint64_t{0};
    return layers * block_flops(cfg, n, n, n, std::min<std::uint64_t>(cfg.k, n));
  };
  auto cross = [&](std::uint64_t s, std::uint64_t n, std::uint64_t k, int layers) {
    if (s == 0 || n == 0) return std::uint64_t{0};
    return layers * block_flops(cfg, s, s, n, std::min<std::uint64_t>(k, n));
  };
  switch (cfg.topology) {
    case Topology::kLowerTri:
      total += self(c.n_mp, l.intra_mp);
      total += cross(c.n_tl, c.n_mp, cfg.k * cfg.gamma_tl, l.enhance_tl);
      total += cross(c.n_ag, c.n_mp + c.n_tl, cfg.k * cfg.gamma_ag, l.enhance_ag);
      break;
    case Topology::kDiag:
    case Topology::kDiagFull:
      total += self(c.n_mp, l.intra_mp) + self(c.n_tl, l.intra_tl) + self(c.n_ag, l.intra_ag);
      break;
    case Topology::kFull:
      break;
  }
  const std::uint64_t n_all = c.n_mp + c.n_tl + c.n_ag;
  if (has_full(cfg.topology)) total += self(n_all, l.all2all);

  const std::uint64_t m = cfg.n_anchors;
  const std::uint64_t anchors = c.n_targets * m;
  total += 2 * anchors * 2 * d * d;  // anchor projection
  if (anchors > 0) {
    total += l.ac2all * block_flops(cfg, anchors, c.n_targets, n_all,
                                    std::min<std::uint64_t>(cfg.k * cfg.gamma_ac, n_all));
  }
  total += mlp3_flops(anchors, d, d, 1);
  total += mlp3_flops(anchors, d, d, static_cast<std::uint64_t>(cfg.t_f) * kTrajChannels);
  return total;
}

// ---------------------------------------------------------------------------

template <typename T>
PredictionSet to_prediction_set(const ModelOutput<T>& out, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("softmax temperature must be positive");
  PredictionSet set;
  const std::size_t n = out.conf_logits.dim(0);
  const std::size_t m = out.conf_logits.dim(1);
  const std::size_t tf = out.traj.dim(2);
  const auto logits = out.conf_logits.data();
  const auto traj = out.traj.data();
  for (std::size_t i = 0; i < n; ++i) {
    AgentPrediction a;
    a.agent_id = out.target_id.at(i);
    a.agent_index = out.target_index.at(i);
    a.type = out.target_type.at(i);
    a.pose = out.target_pose.at(i);
    double mx = -INFINITY;
    for (std::size_t k = 0; k < m; ++k) {
      mx = std::max(mx, static_cast<double>(logits[i * m + k]) / temperature);
    }
    double total = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      ModePrediction mode;
      mode.conf_logit = static_cast<double>(logits[i * m + k]);
      for (std::size_t t = 0; t < tf; ++t) {
        std::array<double, kTrajChannels> step{};
        const T* src = traj.data() + ((i * m + k) * tf + t) * kTrajChannels;
        for (std::size_t c = 0; c < kTrajChannels; ++c) step[c] = static_cast<double>(src[c]);
        mode.steps.push_back(step);
      }
      a.modes.push_back(std::move(mode));
      a.confidences.push_back(std::exp(static_cast<double>(logits[i * m + k]) / temperature - mx));
      total += a.confidences.back();
    }
    for (auto& c : a.confidences) c /= total;
    set.agents.push_back(std::move(a));
  }
  return set;
}

namespace {

AgentPrediction transform_prediction(const AgentPrediction& in, const Pose2& pose,
                                     FrameDirection dir) {
  AgentPrediction out = in;
  const bool to_global = dir == FrameDirection::kLocalToGlobal;
  for (auto& mode : out.modes) {
    for (auto& s : mode.steps) {
      const Vec2 mu = to_global ? pose.apply({s[kMuX], s[kMuY]})
                                : pose.apply_inverse({s[kMuX], s[kMuY]});
      const Vec2 v = to_global ? pose.rotate({s[kVx], s[kVy]})
                               : pose.rotate_inverse({s[kVx], s[kVy]});
      s[kMuX] = mu.x;
      s[kMuY] = mu.y;
      s[kVx] = v.x;
      s[kVy] = v.y;
      s[kTheta] = wrap_angle(to_global ? s[kTheta] + pose.theta : s[kTheta] - pose.theta);
    }
  }
  return out;
}

}  // namespace

AgentPrediction predictions_to_global(const AgentPrediction& local, const Pose2& agent_pose) {
  return transform_prediction(local, agent_pose, FrameDirection::kLocalToGlobal);
}

AgentPrediction predictions_to_local(const AgentPrediction& global, const Pose2& agent_pose) {
  return transform_prediction(global, agent_pose, FrameDirection::kGlobalToLocal);
}

PredictionSet predictions_to_global(const PredictionSet& local) {
  PredictionSet out;
  for (const auto& a : local.agents) out.agents.push_back(predictions_to_global(a, a.pose));
  return out;
}

#define HPTR_INSTANTIATE(T)   \
  template struct ModelParams<T>; \
  template class HptrModel<T>;    \
  template PredictionSet to_prediction_set<T>(const ModelOutput<T>&, double);

HPTR_INSTANTIATE(float)
HPTR_INSTANTIATE(double)

#undef HPTR_INSTANTIATE

}  // namespace hptr
