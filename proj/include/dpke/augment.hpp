#pragma once

// Data-side enrichment: a bank of object crops from labeled scenes, running
// per-class mean logits turned into sampling weights (min-max, then sigmoid),
// collision-checked pasting of sampled crops, and the weak (sub-sampling) and
// strong (flip + scale) scene augmentations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpke/geometry.hpp"
#include "dpke/log.hpp"
#include "dpke/random.hpp"
#include "dpke/ssl.hpp"
#include "dpke/synthdata.hpp"

namespace dpke {

struct BankInstance {
  int class_id = 0;
  PointSet points;  // centered on the box center
  Point3 size = Point3::Ones();
  std::string source_id;

  Aabb centered_box() const { return {Point3::Zero(), size}; }
};

struct ProposalBank {
  std::vector<std::vector<BankInstance>> by_class;
  std::vector<std::string> warnings;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& c : by_class) n += c.size();
    return n;
  }
  bool empty() const { return size() == 0; }
  int num_classes() const { return static_cast<int>(by_class.size()); }
};

inline constexpr std::size_t kMinBankPoints = 8;

/// One instance per annotated box holding at least kMinBankPoints points.
inline ProposalBank build_proposal_bank(const std::vector<const Scene*>& labeled, int num_classes) {
  if (labeled.empty()) throw std::invalid_argument("build_proposal_bank: no labeled scenes");
  ProposalBank bank;
  bank.by_class.resize(static_cast<std::size_t>(num_classes));
  for (const Scene* s : labeled) {
    for (const auto& a : s->annotations) {
      if (a.class_id < 0 || a.class_id >= num_classes) continue;
      PointSet pts = crop_points_in_box(s->points, a.box).first;
      if (pts.size() < kMinBankPoints) continue;
      for (auto& p : pts) p -= a.box.center;
      bank.by_class[static_cast<std::size_t>(a.class_id)].push_back(
          {a.class_id, std::move(pts), a.box.size, s->id});
    }
  }
  for (int c = 0; c < num_classes; ++c) {
    if (bank.by_class[static_cast<std::size_t>(c)].empty()) {
      bank.warnings.push_back("proposal bank has no instance of class " + std::to_string(c) +
                              "; class excluded from sampling");
      log::info(bank.warnings.back());
    }
  }
  return bank;
}

inline ProposalBank build_proposal_bank(const std::vector<Scene>& labeled, int num_classes) {
  std::vector<const Scene*> ptrs;
  for (const auto& s : labeled) ptrs.push_back(&s);
  return build_proposal_bank(ptrs, num_classes);
}

/// Bank instances as scenes (one box at the origin), for export.
inline std::vector<Scene> bank_as_scenes(const ProposalBank& bank) {
  std::vector<Scene> out;
  std::size_t i = 0;
  for (const auto& cls : bank.by_class) {
    for (const auto& inst : cls) {
      Scene s;
      s.id = "bank_" + std::to_string(i++) + "_" + inst.source_id;
      s.points = inst.points;
      s.annotations.push_back({inst.class_id, inst.centered_box()});
      out.push_back(std::move(s));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Class statistics and sampling weights

struct ClassStats {
  Vector mean_logit;
  std::vector<std::uint64_t> count;
  double momentum = 0.95;

  static ClassStats make(int num_classes, double momentum = 0.95) {
    ClassStats s;
    s.mean_logit = Vector::Zero(num_classes);
    s.count.assign(static_cast<std::size_t>(num_classes), 0);
    s.momentum = momentum;
    return s;
  }

  /// The first observation of a class seeds its mean directly.
  void observe(int cls, double logit) {
    auto& n = count[static_cast<std::size_t>(cls)];
    double& m = mean_logit[cls];
    m = n == 0 ? logit : momentum * m + (1.0 - momentum) * logit;
    ++n;
  }
};

/// Feeds the assigned class logit of every positive proposal into the stats.
inline void update_class_stats(ClassStats& stats, const std::vector<Proposal>& proposals,
                               const Assignment& assignment, const std::vector<Annotation>& boxes) {
  for (std::size_t k = 0; k < proposals.size(); ++k) {
    if (!assignment.positive(k)) continue;
    const int cls = boxes[static_cast<std::size_t>(assignment.label[k])].class_id;
    if (cls < 0 || cls >= static_cast<int>(stats.count.size())) continue;
    stats.observe(cls, proposals[k].class_logits[cls]);
  }
}

enum class SamplingMode { kHighLogit, kLowLogit, kUniform, kOff };

using ClassProbabilities = std::vector<double>;

/// sigmoid(minmax(mean logits)) for HLS, sigmoid(minmax(-mean logits)) for
/// LLS, all equal for uniform. Classes without observations and the
/// degenerate max == min case map to sigmoid(0) = 0.5.
inline ClassProbabilities class_probabilities(const ClassStats& stats, SamplingMode mode) {
  const std::size_t C = stats.count.size();
  ClassProbabilities out(C, 0.5);
  if (mode == SamplingMode::kUniform || mode == SamplingMode::kOff) return out;
  const double sign = mode == SamplingMode::kLowLogit ? -1.0 : 1.0;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < C; ++c) {
    if (!stats.count[c]) continue;
    const double v = sign * stats.mean_logit[static_cast<Eigen::Index>(c)];
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!(hi > lo)) return out;
  for (std::size_t c = 0; c < C; ++c) {
    if (!stats.count[c]) continue;
    const double v = sign * stats.mean_logit[static_cast<Eigen::Index>(c)];
    out[c] = detail::sigmoid((v - lo) / (hi - lo));
  }
  return out;
}

/// Classes drawn i.i.d. proportional to `probs` over classes present in the
/// bank, then one instance uniformly within each drawn class.
inline std::vector<const BankInstance*> sample_instances(const ProposalBank& bank,
                                                         const ClassProbabilities& probs,
                                                         std::size_t max_inserts, Rng& rng) {
  std::vector<const BankInstance*> out;
  if (max_inserts == 0 || bank.empty()) return out;
  std::vector<double> w(bank.by_class.size(), 0.0);
  for (std::size_t c = 0; c < w.size(); ++c)
    if (!bank.by_class[c].empty() && c < probs.size()) w[c] = probs[c];
  for (std::size_t i = 0; i < max_inserts; ++i) {
    const std::size_t c = categorical(rng, w);
    if (c >= w.size()) break;
    const auto& pool = bank.by_class[c];
    out.push_back(&pool[uniform_index(rng, pool.size())]);
  }
  return out;
}

struct InsertResult {
  Scene scene;
  std::vector<Annotation> inserted;
  std::size_t dropped = 0;
};

/// Pastes each instance at a random floor position inside the room. A
/// placement is accepted only if its box overlaps neither a collision box nor
/// an earlier insertion; each instance gets `attempts` tries.
inline InsertResult insert_instances(const Scene& scene,
                                     const std::vector<const BankInstance*>& instances,
                                     const std::vector<Aabb>& collision_boxes, bool labeled,
                                     Rng& rng, double room_extent = 8.0, int attempts = 10) {
  InsertResult res;
  res.scene = scene;
  for (const BankInstance* inst : instances) {
    const Point3& sz = inst->size;
    if (sz.x() >= room_extent || sz.y() >= room_extent) {
      ++res.dropped;
      continue;
    }
    bool placed = false;
    for (int t = 0; t < attempts && !placed; ++t) {
      Aabb box;
      box.size = sz;
      box.center = Point3(uniform(rng, 0.5 * sz.x(), room_extent - 0.5 * sz.x()),
                          uniform(rng, 0.5 * sz.y(), room_extent - 0.5 * sz.y()), 0.5 * sz.z());
      bool clash = false;
      for (const auto& b : collision_boxes)
        if (aabb_overlaps(box, b)) { clash = true; break; }
      if (!clash)
        for (const auto& a : res.inserted)
          if (aabb_overlaps(box, a.box)) { clash = true; break; }
      if (clash) continue;
      for (const auto& p : inst->points) res.scene.points.push_back(p + box.center);
      res.inserted.push_back({inst->class_id, box});
      if (labeled) res.scene.annotations.push_back({inst->class_id, box});
      placed = true;
    }
    if (!placed) ++res.dropped;
  }
  if (res.dropped) log::debug("insert_instances: dropped " + std::to_string(res.dropped) + " instance(s)");
  return res;
}

// ---------------------------------------------------------------------------
// Scene augmentations

/// Uniform subset of n points without replacement (a random permutation when
/// n equals the point count). Short scenes are filled by re-drawing.
inline Scene weak_augment(const Scene& scene, std::size_t n, Rng& rng) {
  if (scene.points.empty()) throw std::invalid_argument("weak_augment: empty scene");
  Scene out;
  out.id = scene.id;
  out.annotations = scene.annotations;
  const std::size_t total = scene.points.size();
  std::vector<std::size_t> idx(total);
  for (std::size_t i = 0; i < total; ++i) idx[i] = i;
  const std::size_t take = std::min(n, total);
  for (std::size_t i = 0; i < take; ++i) std::swap(idx[i], idx[i + uniform_index(rng, total - i)]);
  out.points.reserve(n);
  for (std::size_t i = 0; i < take; ++i) out.points.push_back(scene.points[idx[i]]);
  if (take < n) {
    log::debug("weak_augment: scene " + scene.id + " has " + std::to_string(total) +
               " points, filling to " + std::to_string(n));
    while (out.points.size() < n) out.points.push_back(scene.points[uniform_index(rng, total)]);
  }
  return out;
}

struct StrongAugConfig {
  double flip_probability = 0.5;
  double scale_min = 0.85;
  double scale_max = 1.15;
};

inline AugRecord draw_aug_record(Rng& rng, const StrongAugConfig& cfg = {}) {
  AugRecord r;
  r.flip_x = bernoulli(rng, cfg.flip_probability);
  r.flip_y = bernoulli(rng, cfg.flip_probability);
  r.scale = uniform(rng, cfg.scale_min, cfg.scale_max);
  return r;
}

/// Random flips and scaling applied point-wise, order preserved.
inline std::pair<PointSet, AugRecord> strong_augment(const PointSet& cloud, Rng& rng,
                                                     const StrongAugConfig& cfg = {}) {
  if (cloud.empty()) throw std::invalid_argument("strong_augment: empty cloud");
  const AugRecord r = draw_aug_record(rng, cfg);
  return {apply_transform(cloud, r), r};
}

}  // namespace dpke
