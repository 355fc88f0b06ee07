// SPDX-License-Identifier: Apache-2.0
//
// K-nearest-neighbor attention with relative pose encoding.
//
// Each source token attends only to its K nearest target tokens. The pose of
// target j seen from source i is sinusoidally encoded, projected, and added
// to the projected key and value of j; queries never see the encoding.
//
// Tensor layout per stage (G pose groups of A sources, K neighbor slots):
//   gather projected targets       [G, K, D]
//   pairwise encoding              [G, K, 3D]  computed once per stage
//   keys/values after projection   [G, H, K, D/H]
//   logits / weights               [G, H, A, K]
// A > 1 is used when several sources share one pose and one neighborhood
// (the anchor tokens of an agent); their keys and values are shared.
#pragma once

#include <span>
#include <string>

#include "hptr/encoding.hpp"
#include "hptr/geometry.hpp"
#include "hptr/layers.hpp"
#include "hptr/tensor.hpp"

namespace hptr {

template <typename T>
struct KnarpeParams {
  Tensor<T> wq, bq, wk, bk, wv, bv;  // D -> D
  Tensor<T> wk_rpe, bk_rpe, wv_rpe, bv_rpe;  // 3D -> D
  std::size_t heads = 4;

  static KnarpeParams build(ParamBuilder<T>& pb, const std::string& name, std::size_t dim,
                            std::size_t heads);
  std::size_t dim() const { return wq.dim(1); }
};

struct AttentionOptions {
  std::size_t heads = 4;
  /// Logit scale 1/sqrt(D/heads) when true, 1/sqrt(D) otherwise.
  bool per_head_scaling = true;
};

/// Neighborhoods and encoded relative poses for one attention stage. Poses
/// do not change inside a forward pass, so this is built once per stage and
/// shared by all of its layers.
template <typename T>
struct PairGeometry {
  NeighborIndex neighbors;   // [G, K] over the target set
  Tensor<T> rpe;             // [G, K, 3D], zero in invalid slots
  Tensor<T> logit_mask;      // [G, H, A, K], 0 or -inf
  std::size_t group_size = 1;
  std::size_t heads = 1;

  std::size_t groups() const { return neighbors.rows(); }
  std::size_t slots() const { return neighbors.cols(); }
};

/// Throws EmptyGroupError if any row has no valid neighbor.
template <typename T>
PairGeometry<T> build_pair_geometry(std::span<const Pose2> group_poses,
                                    std::span<const Pose2> target_poses,
                                    NeighborIndex neighbors, const RelativePoseEncoder& encoder,
                                    std::size_t heads, std::size_t group_size = 1);

/// src_attr [G*A, D], tgt_attr [N, D] -> [G*A, D] (heads re-concatenated,
/// no output projection).
template <typename T>
Tensor<T> knarpe_attend(const Tensor<T>& src_attr, const Tensor<T>& tgt_attr,
                        const PairGeometry<T>& geom, const KnarpeParams<T>& params,
                        const AttentionOptions& opts);

/// Convenience form that builds the pair geometry (A = 1) on the fly.
template <typename T>
Tensor<T> knarpe_attend(const Tensor<T>& src_attr, const Tensor<T>& tgt_attr,
                        std::span<const Pose2> src_poses, std::span<const Pose2> tgt_poses,
                        const NeighborIndex& neighbors, const KnarpeParams<T>& params,
                        const EncodingConfig& enc, const AttentionOptions& opts);

/// Attention weights [G, H, A, K] of the same computation, for inspection.
template <typename T>
Tensor<T> knarpe_weights(const Tensor<T>& src_attr, const Tensor<T>& tgt_attr,
                         const PairGeometry<T>& geom, const KnarpeParams<T>& params,
                         const AttentionOptions& opts);

enum class AttentionMode { kSelf, kCross };

/// Pre-layer-norm transformer block around knarpe_attend:
///   x += Dropout(Wo · attend(LN1(x), ctx))
///   x += Dropout(FFN(LN2(x))),  FFN = D -> ff -> D with relu
/// In self mode ctx is LN1(x); in cross mode ctx is the context as given.
template <typename T>
struct KnarpeBlockParams {
  LayerNormParams<T> ln_attn;
  KnarpeParams<T> attn;
  Linear<T> out_proj;
  LayerNormParams<T> ln_ff;
  Linear<T> ff_in;
  Linear<T> ff_out;

  static KnarpeBlockParams build(ParamBuilder<T>& pb, const std::string& name, std::size_t dim,
                                 std::size_t heads, std::size_t ff_dim);
};

template <typename T>
Tensor<T> knarpe_block(const Tensor<T>& x, const Tensor<T>& context, const PairGeometry<T>& geom,
                       const KnarpeBlockParams<T>& params, AttentionMode mode,
                       const AttentionOptions& opts, double dropout, const ForwardContext& ctx);

}  // namespace hptr
