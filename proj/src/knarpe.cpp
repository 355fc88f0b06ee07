// SPDX-License-Identifier: Apache-2.0
#include "hptr/knarpe.hpp"

#include <cmath>
#include <limits>

#include "hptr/error.hpp"

namespace hptr {

template <typename T>
KnarpeParams<T> KnarpeParams<T>::build(ParamBuilder<T>& pb, const std::string& name,
                                       std::size_t dim, std::size_t heads) {
  if (heads == 0 || dim % heads != 0) {
    throw ContractError("heads (" + std::to_string(heads) + ") must divide D (" +
                        std::to_string(dim) + ")");
  }
  KnarpeParams p;
  p.wq = pb.matrix(name + ".wq", dim, dim);
  p.bq = pb.zeros(name + ".bq", {dim});
  p.wk = pb.matrix(name + ".wk", dim, dim);
  p.bk = pb.zeros(name + ".bk", {dim});
  p.wv = pb.matrix(name + ".wv", dim, dim);
  p.bv = pb.zeros(name + ".bv", {dim});
  p.wk_rpe = pb.matrix(name + ".wk_rpe", 3 * dim, dim);
  p.bk_rpe = pb.zeros(name + ".bk_rpe", {dim});
  p.wv_rpe = pb.matrix(name + ".wv_rpe", 3 * dim, dim);
  p.bv_rpe = pb.zeros(name + ".bv_rpe", {dim});
  p.heads = heads;
  return p;
}

template <typename T>
PairGeometry<T> build_pair_geometry(std::span<const Pose2> group_poses,
                                    std::span<const Pose2> target_poses,
                                    NeighborIndex neighbors, const RelativePoseEncoder& encoder,
                                    std::size_t heads, std::size_t group_size) {
  const std::size_t g = neighbors.rows();
  const std::size_t k = neighbors.cols();
  if (group_poses.size() != g) {
    throw DimensionError("neighbor index has " + std::to_string(g) + " rows for " +
                         std::to_string(group_poses.size()) + " source poses");
  }
  if (group_size == 0 || heads == 0) throw ContractError("group size and heads must be positive");
  const std::size_t width = encoder.width();
  std::vector<T> rpe(g * k * width, T(0));
  std::vector<double> buf(width);
  for (std::size_t r = 0; r < g; ++r) {
    if (neighbors.valid_count(r) == 0) {
      throw EmptyGroupError("source row " + std::to_string(r) + " has no valid neighbors");
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (!neighbors.is_valid(r, c)) continue;
      const auto j = static_cast<std::size_t>(neighbors.idx.at(r, c));
      if (j >= target_poses.size()) throw IndexError("neighbor index out of range");
      encoder.encode(relative_pose(group_poses[r], target_poses[j]), buf);
      T* dst = rpe.data() + (r * k + c) * width;
      for (std::size_t i = 0; i < width; ++i) dst[i] = static_cast<T>(buf[i]);
    }
  }
  std::vector<T> mask(g * heads * group_size * k);
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (std::size_t r = 0; r < g; ++r) {
    for (std::size_t hs = 0; hs < heads * group_size; ++hs) {
      for (std::size_t c = 0; c < k; ++c) {
        mask[(r * heads * group_size + hs) * k + c] = neighbors.is_valid(r, c) ? T(0) : neg_inf;
      }
    }
  }
  PairGeometry<T> geom;
  geom.rpe = Tensor<T>::from({g, k, width}, std::move(rpe));
  geom.logit_mask = Tensor<T>::from({g, heads, group_size, k}, std::move(mask));
  geom.neighbors = std::move(neighbors);
  geom.group_size = group_size;
  geom.heads = heads;
  return geom;
}

namespace {

template <typename T>
struct AttentionParts {
  Tensor<T> weights;  // [G, H, A, K]
  Tensor<T> values;   // [G, H, K, dh]
};

template <typename T>
AttentionParts<T> attention_parts(const Tensor<T>& src_attr, const Tensor<T>& tgt_attr,
                                  const PairGeometry<T>& geom, const KnarpeParams<T>& p,
                                  const AttentionOptions& opts) {
  const std::size_t d = p.dim();
  const std::size_t h = opts.heads;
  if (h == 0 || d % h != 0) throw ContractError("heads must divide D");
  if (geom.heads != h) throw ContractError("pair geometry was built for a different head count");
  if (src_attr.rank() != 2 || src_attr.dim(1) != d || tgt_attr.rank() != 2 ||
      tgt_attr.dim(1) != d) {
    throw DimensionError("knarpe_attend expects [M, D] and [N, D] with D = " + std::to_string(d) +
                         ", got " + shape_str(src_attr.shape()) + " and " +
                         shape_str(tgt_attr.shape()));
  }
  const std::size_t g = geom.groups();
  const std::size_t a = geom.group_size;
  const std::size_t k = geom.slots();
  const std::size_t dh = d / h;
  if (src_attr.dim(0) != g * a) {
    throw DimensionError("source count " + std::to_string(src_attr.dim(0)) + " does not match " +
                         std::to_string(g) + " groups of " + std::to_string(a));
  }
  if (geom.rpe.dim(2) != 3 * d) throw DimensionError("pair encoding width is not 3D");

  auto q = add(matmul(src_attr, p.wq), p.bq);
  q = permute(reshape(q, {g, a, h, dh}), {0, 2, 1, 3});  // [G,H,A,dh]

  auto keys = add(gather_rows(add(matmul(tgt_attr, p.wk), p.bk), geom.neighbors.idx),
                  add(matmul(geom.rpe, p.wk_rpe), p.bk_rpe));  // [G,K,D]
  keys = permute(reshape(keys, {g, k, h, dh}), {0, 2, 3, 1});  // [G,H,dh,K]

  auto values = add(gather_rows(add(matmul(tgt_attr, p.wv), p.bv), geom.neighbors.idx),
                    add(matmul(geom.rpe, p.wv_rpe), p.bv_rpe));
  values = permute(reshape(values, {g, k, h, dh}), {0, 2, 1, 3});  // [G,H,K,dh]

  const double denom = opts.per_head_scaling ? static_cast<double>(dh) : static_cast<double>(d);
  auto logits = scale(matmul(q, keys), static_cast<T>(1.0 / std::sqrt(denom)));
  logits = add(logits, geom.logit_mask);
  return {softmax(logits, 3), values};
}

}  // namespace

template <typename T>
Tensor<T> knarpe_attend(const Tensor<T>& src_attr, const Tensor<T>& tgt_attr,
                        const PairGeometry<T>& geom, const KnarpeParams<T>& params,
                        const AttentionOptions& opts) {
  auto parts = attention_parts(src_attr, tgt_attr, geom, params, opts);
  const std::size_t m = src_attr.dim(0);
  auto z = matmul(parts.weights, parts.values);  // [G,H,A,dh]
  return reshape(permute(z, {0, 2, 1, 3}), {m, params.dim()});
}

template <typename T>
Tensor<T> knarpe_attend(const Tensor<T>& src_attr, const Tensor<T>& tgt_attr,
                        std::span<const Pose2> src_poses, std::span<const Pose2> tgt_poses,
                        const NeighborIndex& neighbors, const KnarpeParams<T>& params,
                        const EncodingConfig& enc, const AttentionOptions& opts) {
  RelativePoseEncoder encoder(enc);
  auto geom = build_pair_geometry<T>(src_poses, tgt_poses, neighbors, encoder, opts.heads, 1);
  return knarpe_attend(src_attr, tgt_attr, geom, params, opts);
}

template <typename T>
Tensor<T> knarpe_weights(const Tensor<T>& src_attr, const Tensor<T>& tgt_attr,
                         const PairGeometry<T>& geom, const KnarpeParams<T>& params,
                         const AttentionOptions& opts) {
  return attention_parts(src_attr, tgt_attr, geom, params, opts).weights;
}

template <typename T>
KnarpeBlockParams<T> KnarpeBlockParams<T>::build(ParamBuilder<T>& pb, const std::string& name,
                                                 std::size_t dim, std::size_t heads,
                                                 std::size_t ff_dim) {
  KnarpeBlockParams b;
  b.ln_attn = LayerNormParams<T>::build(pb, name + ".ln_attn", dim);
  b.attn = KnarpeParams<T>::build(pb, name + ".attn", dim, heads);
  b.out_proj = Linear<T>::build(pb, name + ".out_proj", dim, dim);
  b.ln_ff = LayerNormParams<T>::build(pb, name + ".ln_ff", dim);
  b.ff_in = Linear<T>::build(pb, name + ".ff_in", dim, ff_dim);
  b.ff_out = Linear<T>::build(pb, name + ".ff_out", ff_dim, dim);
  return b;
}

template <typename T>
Tensor<T> knarpe_block(const Tensor<T>& x, const Tensor<T>& context, const PairGeometry<T>& geom,
                       const KnarpeBlockParams<T>& params, AttentionMode mode,
                       const AttentionOptions& opts, double dropout_p, const ForwardContext& ctx) {
  const bool train = ctx.training && dropout_p > 0.0;
  if (train && ctx.rng == nullptr) throw ContractError("training forward needs an RNG");
  std::mt19937_64 unused;
  std::mt19937_64& rng = ctx.rng ? *ctx.rng : unused;

  auto normed = params.ln_attn(x);
  const Tensor<T>& kv = mode == AttentionMode::kSelf ? normed : context;
  auto attn = params.out_proj(knarpe_attend(normed, kv, geom, params.attn, opts));
  auto h = add(x, dropout(attn, dropout_p, train, rng));
  auto ff = relu(params.ff_in(params.ln_ff(h)));
  ff = params.ff_out(dropout(ff, dropout_p, train, rng));
  return add(h, dropout(ff, dropout_p, train, rng));
}

#define HPTR_INSTANTIATE(T)                                                                      \
  template struct KnarpeParams<T>;                                                               \
  template struct KnarpeBlockParams<T>;                                                          \
  template PairGeometry<T> build_pair_geometry<T>(std::span<const Pose2>, std::span<const Pose2>, \
                                                  NeighborIndex, const RelativePoseEncoder&,     \
                                                  std::size_t, std::size_t);                     \
  template Tensor<T> knarpe_attend<T>(const Tensor<T>&, const Tensor<T>&, const PairGeometry<T>&, \
                                      const KnarpeParams<T>&, const AttentionOptions&);          \
  template Tensor<T> knarpe_attend<T>(const Tensor<T>&, const Tensor<T>&,                        \
                                      std::span<const Pose2>, std::span<const Pose2>,            \
                                      const NeighborIndex&, const KnarpeParams<T>&,              \
                                      const EncodingConfig&, const AttentionOptions&);           \
  template Tensor<T> knarpe_weights<T>(const Tensor<T>&, const Tensor<T>&,                       \
                                       const PairGeometry<T>&, const KnarpeParams<T>&,           \
                                       const AttentionOptions&);                                 \
  template Tensor<T> knarpe_block<T>(const Tensor<T>&, const Tensor<T>&, const PairGeometry<T>&, \
                                     const KnarpeBlockParams<T>&, AttentionMode,                 \
                                     const AttentionOptions&, double, const ForwardContext&);

HPTR_INSTANTIATE(float)
HPTR_INSTANTIATE(double)

#undef HPTR_INSTANTIATE

}  // namespace hptr
