#pragma once

// Synthetic indoor scenes: a floor and two walls inside an [0, 8]^3 room with
// 4-12 non-overlapping furniture-like objects standing on the floor. Classes
// differ in shape family, size, frequency and surface noise so that per-class
// learning progress actually diverges during training.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpke/geometry.hpp"
#include "dpke/random.hpp"

namespace dpke {

enum class ShapeFamily { kBoxShell, kTableLike, kThinPanel, kCylinderShell };

struct ClassSpec {
  int class_id = 0;
  std::string name;
  ShapeFamily family = ShapeFamily::kBoxShell;
  Point3 size_min = Point3::Constant(0.5);
  Point3 size_max = Point3::Constant(1.0);
  double frequency_weight = 1.0;
  double surface_noise = 0.01;
};

struct GeneratorConfig {
  std::vector<ClassSpec> classes;
  double room_extent = 8.0;
  double wall_height = 2.5;
  int min_objects = 4;
  int max_objects = 12;
  int floor_points = 800;
  int wall_points = 300;  // per wall
  int clutter_points = 40;
  double surface_density = 250.0;  // points per unit area before clamping
  int min_object_points = 256;
  int max_object_points = 1024;
  double placement_gap = 0.05;
  int max_placement_attempts = 200;

  int num_classes() const { return static_cast<int>(classes.size()); }
};

struct Annotation {
  int class_id = 0;
  Aabb box;
  friend bool operator==(const Annotation& a, const Annotation& b) {
    return a.class_id == b.class_id && a.box == b.box;
  }
};

struct Scene {
  std::string id;
  PointSet points;
  std::vector<Annotation> annotations;

  std::vector<Aabb> boxes() const {
    std::vector<Aabb> out;
    out.reserve(annotations.size());
    for (const auto& a : annotations) out.push_back(a.box);
    return out;
  }
  friend bool operator==(const Scene& a, const Scene& b) {
    return a.id == b.id && a.points == b.points && a.annotations == b.annotations;
  }
};

struct DatasetSplit {
  double ratio = 1.0;
  std::vector<std::string> labeled_ids;
  std::vector<std::string> unlabeled_ids;
  friend bool operator==(const DatasetSplit&, const DatasetSplit&) = default;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SplitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Six classes with decaying frequency. Class 5 is the noisy, rare one.
inline GeneratorConfig default_generator_config() {
  GeneratorConfig cfg;
  cfg.classes = {
      {0, "cabinet", ShapeFamily::kBoxShell, {0.6, 0.4, 0.8}, {1.2, 0.8, 1.6}, 5.0, 0.01},
      {1, "table", ShapeFamily::kTableLike, {1.0, 0.6, 0.6}, {1.8, 1.2, 0.9}, 4.0, 0.01},
      {2, "stool", ShapeFamily::kTableLike, {0.35, 0.35, 0.4}, {0.55, 0.55, 0.55}, 3.0, 0.01},
      {3, "bin", ShapeFamily::kCylinderShell, {0.3, 0.3, 0.4}, {0.5, 0.5, 0.8}, 2.0, 0.01},
      {4, "panel", ShapeFamily::kThinPanel, {0.8, 0.05, 1.0}, {1.5, 0.1, 2.0}, 1.5, 0.01},
      {5, "counter", ShapeFamily::kBoxShell, {1.2, 0.5, 0.8}, {2.0, 0.7, 1.0}, 1.0, 0.08},
  };
  return cfg;
}

inline void validate_generator_config(const GeneratorConfig& cfg) {
  if (cfg.classes.size() < 2) throw std::invalid_argument("generator config needs >= 2 classes");
  double total = 0.0;
  double max_extent = 0.0;
  for (std::size_t i = 0; i < cfg.classes.size(); ++i) {
    const auto& c = cfg.classes[i];
    if (c.class_id != static_cast<int>(i))
      throw std::invalid_argument("class ids must be 0..C-1 in order");
    if (!(c.frequency_weight > 0.0)) throw std::invalid_argument("frequency weights must be > 0");
    for (int a = 0; a < 3; ++a) {
      if (!(c.size_min[a] > 0.0 && c.size_max[a] >= c.size_min[a]))
        throw std::invalid_argument("class size ranges must be positive");
      max_extent = std::max(max_extent, c.size_max[a]);
    }
    total += c.frequency_weight;
  }
  if (!(total > 0.0)) throw std::invalid_argument("frequency weights must sum to > 0");
  if (!(cfg.room_extent > max_extent))
    throw std::invalid_argument("room extent must exceed the largest object extent");
  if (cfg.min_objects < 1 || cfg.max_objects < cfg.min_objects)
    throw std::invalid_argument("invalid object count range");
}

namespace detail {

inline Point3 jitter(const Point3& p, double noise, Rng& rng) {
  if (noise <= 0.0) return p;
  return p + Point3(normal(rng, 0.0, noise), normal(rng, 0.0, noise), normal(rng, 0.0, noise));
}

/// A rectangle in 3D given by origin and two edge vectors.
struct Patch {
  Point3 origin;
  Point3 u;
  Point3 v;
  double area() const { return u.norm() * v.norm(); }
  Point3 sample(Rng& rng) const { return origin + uniform01(rng) * u + uniform01(rng) * v; }
};

inline void add_box_faces(std::vector<Patch>& out, const Point3& lo, const Point3& hi,
                          bool with_bottom) {
  const Point3 d = hi - lo;
  const Point3 ex(d.x(), 0, 0), ey(0, d.y(), 0), ez(0, 0, d.z());
  out.push_back({Point3(lo.x(), lo.y(), hi.z()), ex, ey});  // top
  if (with_bottom) out.push_back({lo, ex, ey});
  out.push_back({lo, ey, ez});
  out.push_back({Point3(hi.x(), lo.y(), lo.z()), ey, ez});
  out.push_back({lo, ex, ez});
  out.push_back({Point3(lo.x(), hi.y(), lo.z()), ex, ez});
}

inline void sample_patches(const std::vector<Patch>& patches, int count, double noise,
                           Rng& rng, PointSet& out) {
  std::vector<double> areas;
  areas.reserve(patches.size());
  for (const auto& p : patches) areas.push_back(p.area());
  for (int i = 0; i < count; ++i) {
    const std::size_t which = categorical(rng, areas);
    out.push_back(jitter(patches[which].sample(rng), noise, rng));
  }
}

inline int point_budget(double area, const GeneratorConfig& cfg) {
  const double raw = std::round(area * cfg.surface_density);
  return static_cast<int>(std::clamp(raw, static_cast<double>(cfg.min_object_points),
                                     static_cast<double>(cfg.max_object_points)));
}

inline void sample_object_surface(const ClassSpec& spec, const Aabb& box,
                                  const GeneratorConfig& cfg, Rng& rng, PointSet& out) {
  const Point3 lo = box.min_corner();
  const Point3 hi = box.max_corner();
  const Point3 s = box.size;
  std::vector<Patch> patches;
  switch (spec.family) {
    case ShapeFamily::kBoxShell:
    case ShapeFamily::kThinPanel: {
      add_box_faces(patches, lo, hi, false);
      double area = 0.0;
      for (const auto& p : patches) area += p.area();
      sample_patches(patches, point_budget(area, cfg), spec.surface_noise, rng, out);
      return;
    }
    case ShapeFamily::kTableLike: {
      const double slab = std::min(0.06, 0.15 * s.z());
      add_box_faces(patches, Point3(lo.x(), lo.y(), hi.z() - slab), hi, true);
      const double leg = 0.08 * std::min(s.x(), s.y());
      const double leg_top = hi.z() - slab;
      for (int cx = 0; cx < 2; ++cx) {
        for (int cy = 0; cy < 2; ++cy) {
          const double x0 = cx == 0 ? lo.x() : hi.x() - leg;
          const double y0 = cy == 0 ? lo.y() : hi.y() - leg;
          const Point3 leg_lo(x0, y0, lo.z());
          const Point3 leg_hi(x0 + leg, y0 + leg, leg_top);
          const Point3 d = leg_hi - leg_lo;
          const Point3 ex(d.x(), 0, 0), ey(0, d.y(), 0), ez(0, 0, d.z());
          patches.push_back({leg_lo, ey, ez});
          patches.push_back({Point3(leg_hi.x(), leg_lo.y(), leg_lo.z()), ey, ez});
          patches.push_back({leg_lo, ex, ez});
          patches.push_back({Point3(leg_lo.x(), leg_hi.y(), leg_lo.z()), ex, ez});
        }
      }
      double area = 0.0;
      for (const auto& p : patches) area += p.area();
      sample_patches(patches, point_budget(area, cfg), spec.surface_noise, rng, out);
      return;
    }
    case ShapeFamily::kCylinderShell: {
      const double rx = 0.5 * s.x();
      const double ry = 0.5 * s.y();
      const double side = 3.141592653589793 * (rx + ry) * s.z();
      const double top = 3.141592653589793 * rx * ry;
      const int count = point_budget(side + top, cfg);
      for (int i = 0; i < count; ++i) {
        Point3 p;
        if (uniform01(rng) * (side + top) < side) {
          const double t = 6.283185307179586 * uniform01(rng);
          p = Point3(box.center.x() + rx * std::cos(t), box.center.y() + ry * std::sin(t),
                     uniform(rng, lo.z(), hi.z()));
        } else {
          const double t = 6.283185307179586 * uniform01(rng);
          const double r = std::sqrt(uniform01(rng));
          p = Point3(box.center.x() + r * rx * std::cos(t), box.center.y() + r * ry * std::sin(t),
                     hi.z());
        }
        out.push_back(jitter(p, spec.surface_noise, rng));
      }
      return;
    }
  }
}

inline std::string scene_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%05zu", index);
  return buf;
}

}  // namespace detail

/// One scene, fully determined by (cfg, seed).
inline Scene generate_scene(const GeneratorConfig& cfg, std::uint64_t seed,
                            const std::string& id = "scene") {
  validate_generator_config(cfg);
  Rng rng = make_rng(seed, {0x5CE7E});
  Scene scene;
  scene.id = id;

  std::vector<double> weights;
  for (const auto& c : cfg.classes) weights.push_back(c.frequency_weight);
  const int n_objects =
      cfg.min_objects + static_cast<int>(uniform_index(rng, cfg.max_objects - cfg.min_objects + 1));
  const double room = cfg.room_extent;
  const double margin = 0.1;

  for (int o = 0; o < n_objects; ++o) {
    const ClassSpec& spec = cfg.classes[categorical(rng, weights)];
    Point3 size;
    for (int a = 0; a < 3; ++a) size[a] = uniform(rng, spec.size_min[a], spec.size_max[a]);
    if (spec.family == ShapeFamily::kCylinderShell) size.y() = size.x();
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_placement_attempts && !placed; ++attempt) {
      Aabb box;
      box.size = size;
      box.center = Point3(uniform(rng, margin + 0.5 * size.x(), room - margin - 0.5 * size.x()),
                          uniform(rng, margin + 0.5 * size.y(), room - margin - 0.5 * size.y()),
                          0.5 * size.z());
      Aabb padded = box;
      padded.size += Point3::Constant(2.0 * cfg.placement_gap);
      bool clash = false;
      for (const auto& a : scene.annotations) {
        if (aabb_overlaps(padded, a.box)) {
          clash = true;
          break;
        }
      }
      if (clash) continue;
      scene.annotations.push_back({spec.class_id, box});
      detail::sample_object_surface(spec, box, cfg, rng, scene.points);
      placed = true;
    }
    if (!placed)
      throw GenerationError("object placement failed after " +
                            std::to_string(cfg.max_placement_attempts) +
                            " attempts (seed " + std::to_string(seed) + ")");
  }

  // Floor, skipping object footprints.
  int floor_added = 0;
  while (floor_added < cfg.floor_points) {
    const Point3 p(uniform(rng, 0.0, room), uniform(rng, 0.0, room), normal(rng, 0.0, 0.005));
    bool under = false;
    for (const auto& a : scene.annotations) {
      const Point3 lo = a.box.min_corner();
      const Point3 hi = a.box.max_corner();
      if (p.x() >= lo.x() && p.x() <= hi.x() && p.y() >= lo.y() && p.y() <= hi.y()) {
        under = true;
        break;
      }
    }
    if (under) continue;
    scene.points.push_back(p);
    ++floor_added;
  }
  for (int i = 0; i < cfg.wall_points; ++i)
    scene.points.emplace_back(normal(rng, 0.0, 0.005), uniform(rng, 0.0, room),
                              uniform(rng, 0.0, cfg.wall_height));
  for (int i = 0; i < cfg.wall_points; ++i)
    scene.points.emplace_back(uniform(rng, 0.0, room), normal(rng, 0.0, 0.005),
                              uniform(rng, 0.0, cfg.wall_height));
  for (int i = 0; i < cfg.clutter_points; ++i)
    scene.points.emplace_back(uniform(rng, 0.0, room), uniform(rng, 0.0, room),
                              uniform(rng, 0.0, cfg.wall_height));
  return scene;
}

inline std::vector<Scene> generate_dataset(const GeneratorConfig& cfg, std::size_t n_scenes,
                                           std::uint64_t seed) {
  std::vector<Scene> scenes;
  scenes.reserve(n_scenes);
  for (std::size_t i = 0; i < n_scenes; ++i)
    scenes.push_back(generate_scene(cfg, mix_seed(seed, {i}), detail::scene_id(i)));
  return scenes;
}

/// Random labeled/unlabeled partition in which every class occurs in at least
/// one labeled scene. Unlucky draws are rejected and redrawn.
inline DatasetSplit split_dataset(const std::vector<Scene>& scenes, double ratio,
                                  std::uint64_t split_seed, int num_classes,
                                  int max_attempts = 1000) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("split ratio must be in (0, 1]");
  if (scenes.empty()) throw SplitError("cannot split an empty dataset");
  const std::size_t n = scenes.size();
  const std::size_t n_labeled = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n))), 1, n);

  std::set<int> present;
  for (const auto& s : scenes)
    for (const auto& a : s.annotations) present.insert(a.class_id);
  for (int c = 0; c < num_classes; ++c)
    if (!present.count(c))
      throw SplitError("class " + std::to_string(c) + " does not occur in the dataset");

  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    Rng rng = make_rng(split_seed, {0x5B117, static_cast<std::uint64_t>(attempt)});
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    shuffle(order, rng);
    std::vector<char> is_labeled(n, 0);
    std::set<int> covered;
    for (std::size_t i = 0; i < n_labeled; ++i) {
      is_labeled[order[i]] = 1;
      for (const auto& a : scenes[order[i]].annotations) covered.insert(a.class_id);
    }
    if (static_cast<int>(covered.size()) < num_classes) continue;
    DatasetSplit split;
    split.ratio = ratio;
    for (std::size_t i = 0; i < n; ++i)
      (is_labeled[i] ? split.labeled_ids : split.unlabeled_ids).push_back(scenes[i].id);
    return split;
  }
  throw SplitError("no class-covering split found for ratio " + std::to_string(ratio) +
                   " after " + std::to_string(max_attempts) + " attempts");
}

}  // namespace dpke
