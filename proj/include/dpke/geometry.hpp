#pragma once

// Geometric kernels shared by the data generator, the detector and the
// losses: farthest point sampling, Chamfer distance, proposal point-count
// normalization, axis-aligned box tests and invertible flip/scale transforms.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dpke/random.hpp"

namespace dpke {

using Point3 = Eigen::Vector3d;
using PointSet = std::vector<Point3>;
using IndexList = std::vector<std::size_t>;

inline double squared_distance(const Point3& a, const Point3& b) {
  const double dx = a.x() - b.x();
  const double dy = a.y() - b.y();
  const double dz = a.z() - b.z();
  return dx * dx + dy * dy + dz * dz;
}

inline bool all_finite(const Point3& p) {
  return std::isfinite(p.x()) && std::isfinite(p.y()) && std::isfinite(p.z());
}

/// Axis-aligned box. `size` holds full extents, not half extents.
struct Aabb {
  Point3 center = Point3::Zero();
  Point3 size = Point3::Ones();

  Point3 min_corner() const { return center - 0.5 * size; }
  Point3 max_corner() const { return center + 0.5 * size; }
  double volume() const { return size.x() * size.y() * size.z(); }
  bool valid() const {
    return all_finite(center) && all_finite(size) && size.x() > 0.0 && size.y() > 0.0 &&
           size.z() > 0.0;
  }

  friend bool operator==(const Aabb& a, const Aabb& b) {
    return a.center == b.center && a.size == b.size;
  }
};

/// Parameters of one strong augmentation draw.
struct AugRecord {
  bool flip_x = false;
  bool flip_y = false;
  double scale = 1.0;

  static AugRecord identity() { return {}; }
  friend bool operator==(const AugRecord&, const AugRecord&) = default;
};

// ---------------------------------------------------------------------------
// Farthest point sampling

/// Greedy farthest point sampling. The first pick is `start_index`; every
/// later pick maximizes the squared distance to the nearest already-selected
/// point, ties going to the smallest index.
inline IndexList farthest_point_sample(const PointSet& points, std::size_t k,
                                       std::size_t start_index) {
  const std::size_t n = points.size();
  if (n == 0) throw std::invalid_argument("farthest_point_sample: empty point set");
  if (k < 1 || k > n)
    throw std::invalid_argument("farthest_point_sample: k=" + std::to_string(k) +
                                " out of range for " + std::to_string(n) + " points");
  if (start_index >= n)
    throw std::invalid_argument("farthest_point_sample: start index out of range");

  IndexList selected;
  selected.reserve(k);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  std::size_t last = start_index;
  selected.push_back(last);
  taken[last] = 1;

  while (selected.size() < k) {
    const Point3& anchor = points[last];
    std::size_t best = n;
    double best_dist = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      const double d = squared_distance(points[i], anchor);
      if (d < nearest[i]) nearest[i] = d;
      if (nearest[i] > best_dist) {
        best_dist = nearest[i];
        best = i;
      }
    }
    last = best;
    taken[last] = 1;
    selected.push_back(last);
  }
  return selected;
}

// ---------------------------------------------------------------------------
// Chamfer distance

enum class ChamferReduction { kSum, kMean };

inline double directional_chamfer(const PointSet& from, const PointSet& to) {
  double total = 0.0;
  for (const Point3& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const Point3& q : to) {
      const double d = squared_distance(p, q);
      if (d < best) best = d;
    }
    total += best;
  }
  return total;
}

/// Symmetric squared Chamfer distance. With kMean each directional sum is
/// divided by the cardinality of the set it runs over.
inline double chamfer_distance_sq(const PointSet& p, const PointSet& q,
                                  ChamferReduction reduction = ChamferReduction::kMean) {
  if (p.empty() || q.empty()) throw std::invalid_argument("chamfer_distance_sq: empty point set");
  double forward = directional_chamfer(p, q);
  double backward = directional_chamfer(q, p);
  if (reduction == ChamferReduction::kMean) {
    forward /= static_cast<double>(p.size());
    backward /= static_cast<double>(q.size());
  }
  return forward + backward;
}

/// Brings a point set to exactly `target` points: short sets are topped up
/// with uniform re-draws of their own points, long sets are reduced by FPS
/// from a random start.
inline PointSet normalize_point_count(const PointSet& points, std::size_t target, Rng& rng) {
  if (points.empty()) throw std::invalid_argument("normalize_point_count: empty point set");
  if (target < 1) throw std::invalid_argument("normalize_point_count: target must be >= 1");
  const std::size_t n = points.size();
  if (n == target) return points;
  if (n < target) {
    PointSet out = points;
    out.reserve(target);
    while (out.size() < target) out.push_back(points[uniform_index(rng, n)]);
    return out;
  }
  const IndexList idx = farthest_point_sample(points, target, uniform_index(rng, n));
  PointSet out;
  out.reserve(target);
  for (std::size_t i : idx) out.push_back(points[i]);
  return out;
}

/// exp(-chamfer) between two proposal point sets after count normalization.
/// An empty side yields `empty_weight` (the floor value used for pairs that
/// carry no geometry). Both sides are normalized with identically seeded
/// generators, so equal inputs always give weight 1.
inline double geometry_weight(const PointSet& teacher_points, const PointSet& student_points,
                              std::size_t target_count, double empty_weight,
                              ChamferReduction reduction, Rng& rng) {
  if (!(empty_weight >= 0.0 && empty_weight <= 1.0))
    throw std::invalid_argument("geometry_weight: empty weight must lie in [0, 1]");
  if (teacher_points.empty() || student_points.empty()) return empty_weight;
  const std::uint64_t seed = rng();
  Rng rt(seed), rs(seed);
  const PointSet t = normalize_point_count(teacher_points, target_count, rt);
  const PointSet s = normalize_point_count(student_points, target_count, rs);
  return std::exp(-chamfer_distance_sq(t, s, reduction));
}

// ---------------------------------------------------------------------------
// Boxes

inline double aabb_intersection_volume(const Aabb& a, const Aabb& b) {
  const Point3 lo = a.min_corner().cwiseMax(b.min_corner());
  const Point3 hi = a.max_corner().cwiseMin(b.max_corner());
  const Point3 extent = (hi - lo).cwiseMax(0.0);
  return extent.x() * extent.y() * extent.z();
}

inline double aabb_iou(const Aabb& a, const Aabb& b) {
  const double inter = aabb_intersection_volume(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.volume() + b.volume() - inter;
  if (uni <= 0.0) return 0.0;
  const double iou = inter / uni;
  return iou > 1.0 ? 1.0 : iou;
}

/// True iff the boxes share positive volume; touching faces do not count.
inline bool aabb_overlaps(const Aabb& a, const Aabb& b) {
  return aabb_intersection_volume(a, b) > 0.0;
}

inline bool point_in_box(const Point3& p, const Aabb& box) {
  const Point3 lo = box.min_corner();
  const Point3 hi = box.max_corner();
  return p.x() >= lo.x() && p.x() <= hi.x() && p.y() >= lo.y() && p.y() <= hi.y() &&
         p.z() >= lo.z() && p.z() <= hi.z();
}

/// Points inside the closed box together with their source indices.
inline std::pair<PointSet, IndexList> crop_points_in_box(const PointSet& cloud, const Aabb& box) {
  std::pair<PointSet, IndexList> out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (point_in_box(cloud[i], box)) {
      out.first.push_back(cloud[i]);
      out.second.push_back(i);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Flip/scale transforms

inline void check_aug(const AugRecord& aug) {
  if (!(std::isfinite(aug.scale) && aug.scale > 0.0))
    throw std::invalid_argument("AugRecord: scale must be positive and finite");
}

inline Point3 transform_point(const Point3& p, const AugRecord& aug) {
  Point3 q = p;
  if (aug.flip_x) q.x() = -q.x();
  if (aug.flip_y) q.y() = -q.y();
  return q * aug.scale;
}

inline Point3 inverse_transform_point(const Point3& p, const AugRecord& aug) {
  Point3 q = p / aug.scale;
  if (aug.flip_x) q.x() = -q.x();
  if (aug.flip_y) q.y() = -q.y();
  return q;
}

/// Point-wise transform; point i of the result is the image of point i.
inline PointSet apply_transform(const PointSet& cloud, const AugRecord& aug) {
  check_aug(aug);
  PointSet out;
  out.reserve(cloud.size());
  for (const Point3& p : cloud) out.push_back(transform_point(p, aug));
  return out;
}

inline PointSet inverse_transform(const PointSet& cloud, const AugRecord& aug) {
  check_aug(aug);
  PointSet out;
  out.reserve(cloud.size());
  for (const Point3& p : cloud) out.push_back(inverse_transform_point(p, aug));
  return out;
}

inline Aabb transform_box(const Aabb& box, const AugRecord& aug) {
  check_aug(aug);
  return {transform_point(box.center, aug), box.size * aug.scale};
}

inline Aabb inverse_transform_box(const Aabb& box, const AugRecord& aug) {
  check_aug(aug);
  return {inverse_transform_point(box.center, aug), box.size / aug.scale};
}

}  // namespace dpke
