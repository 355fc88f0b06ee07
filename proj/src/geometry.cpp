// SPDX-License-Identifier: Apache-2.0
#include "hptr/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hptr/error.hpp"

namespace hptr {

double wrap_angle(double theta) {
  if (!std::isfinite(theta)) throw DomainError("cannot wrap non-finite angle");
  double r = std::fmod(theta + kPi, 2.0 * kPi);
  if (r < 0.0) r += 2.0 * kPi;
  // r in [0, 2pi); shift to [-pi, pi) then flip the lower end.
  double out = r - kPi;
  if (out <= -kPi) out = kPi;
  return out;
}

Pose2 Pose2::compose(const Pose2& other) const {
  const Vec2 t = apply({other.x, other.y});
  return {t.x, t.y, theta + other.theta};
}

Pose2 Pose2::inverse() const {
  const Vec2 t = rotate_inverse({-x, -y});
  return {t.x, t.y, -theta};
}

Vec2 Pose2::rotate(const Vec2& v) const {
  const double c = std::cos(theta), s = std::sin(theta);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

Vec2 Pose2::rotate_inverse(const Vec2& v) const {
  const double c = std::cos(theta), s = std::sin(theta);
  return {c * v.x + s * v.y, -s * v.x + c * v.y};
}

Vec2 Pose2::apply(const Vec2& local) const {
  const Vec2 r = rotate(local);
  return {r.x + x, r.y + y};
}

Vec2 Pose2::apply_inverse(const Vec2& global) const {
  return rotate_inverse({global.x - x, global.y - y});
}

RelPose relative_pose(const Pose2& p_i, const Pose2& p_j) {
  const Vec2 d = p_i.apply_inverse({p_j.x, p_j.y});
  return {d.x, d.y, wrap_angle(p_j.theta - p_i.theta)};
}

std::vector<Vec2> transform_points(const Pose2& pose, std::span<const Vec2> pts,
                                   FrameDirection direction) {
  std::vector<Vec2> out;
  out.reserve(pts.size());
  for (const auto& p : pts) {
    out.push_back(direction == FrameDirection::kLocalToGlobal ? pose.apply(p)
                                                              : pose.apply_inverse(p));
  }
  return out;
}

std::size_t NeighborIndex::valid_count(std::size_t r) const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < idx.cols; ++c) n += valid[r * idx.cols + c] ? 1 : 0;
  return n;
}

NeighborIndex knn_indices(std::span<const Pose2> queries, std::span<const Pose2> targets,
                          const Mask& target_valid, std::size_t k) {
  if (k == 0) throw ContractError("knn_indices requires K >= 1");
  if (target_valid.size() != targets.size()) {
    throw DimensionError("target_valid has " + std::to_string(target_valid.size()) +
                         " entries for " + std::to_string(targets.size()) + " targets");
  }
  std::vector<std::int64_t> candidates;
  for (std::size_t j = 0; j < targets.size(); ++j) {
    if (target_valid[j]) candidates.push_back(static_cast<std::int64_t>(j));
  }
  if (candidates.empty()) throw EmptyGroupError("knn_indices: no valid targets");
  const std::size_t take = std::min(k, candidates.size());

  NeighborIndex out;
  out.idx = IndexMatrix(queries.size(), k, candidates.front());
  out.valid.assign(queries.size() * k, 0);
  std::vector<std::pair<double, std::int64_t>> dist(candidates.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      const auto& t = targets[static_cast<std::size_t>(candidates[c])];
      const double dx = t.x - queries[q].x;
      const double dy = t.y - queries[q].y;
      dist[c] = {dx * dx + dy * dy, candidates[c]};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(take), dist.end());
    for (std::size_t s = 0; s < take; ++s) {
      out.idx.at(q, s) = dist[s].second;
      out.valid[q * k + s] = 1;
    }
  }
  return out;
}

NeighborIndex knn_indices(std::span<const Pose2> queries, std::span<const Pose2> targets,
                          std::size_t k) {
  return knn_indices(queries, targets, Mask(targets.size(), 1), k);
}

}  // namespace hptr
