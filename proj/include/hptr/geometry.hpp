// SPDX-License-Identifier: Apache-2.0
//
// SE(2) pose algebra and K-nearest-neighbor index construction. All geometry
// runs in double precision regardless of the tensor precision downstream.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "hptr/tensor.hpp"

namespace hptr {

inline constexpr double kPi = 3.14159265358979323846;

/// Wraps into (-pi, pi]; -pi maps to pi. Throws DomainError on non-finite input.
double wrap_angle(double theta);

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Vec2&, const Vec2&) = default;
};

/// Element of SE(2). The constructor wraps the heading.
struct Pose2 {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;

  Pose2() = default;
  Pose2(double x_, double y_, double theta_) : x(x_), y(y_), theta(wrap_angle(theta_)) {}

  /// this ∘ other
  Pose2 compose(const Pose2& other) const;
  Pose2 inverse() const;
  Vec2 apply(const Vec2& local) const;
  Vec2 apply_inverse(const Vec2& global) const;
  Vec2 rotate(const Vec2& v) const;
  Vec2 rotate_inverse(const Vec2& v) const;

  friend bool operator==(const Pose2&, const Pose2&) = default;
};

/// Pose of token j expressed in the frame of token i.
struct RelPose {
  double dx = 0.0;
  double dy = 0.0;
  double dtheta = 0.0;
};

/// inverse(p_i) ∘ p_j with the heading wrapped.
RelPose relative_pose(const Pose2& p_i, const Pose2& p_j);

enum class FrameDirection { kLocalToGlobal, kGlobalToLocal };

std::vector<Vec2> transform_points(const Pose2& pose, std::span<const Vec2> pts,
                                   FrameDirection direction);

/// Per query row, the valid entries of `idx` sorted by ascending distance.
struct NeighborIndex {
  IndexMatrix idx;
  Mask valid;

  std::size_t rows() const { return idx.rows; }
  std::size_t cols() const { return idx.cols; }
  bool is_valid(std::size_t r, std::size_t c) const { return valid[r * idx.cols + c] != 0; }
  std::size_t valid_count(std::size_t r) const;
};

/// K nearest valid targets per query by planar L2 distance; ties broken by
/// lower target index. Rows have K slots; slots beyond the number of valid
/// targets are invalid and point at a valid target so gathers stay in range.
/// Throws EmptyGroupError when no target is valid.
NeighborIndex knn_indices(std::span<const Pose2> queries, std::span<const Pose2> targets,
                          const Mask& target_valid, std::size_t k);

/// All targets valid.
NeighborIndex knn_indices(std::span<const Pose2> queries, std::span<const Pose2> targets,
                          std::size_t k);

}  // namespace hptr
