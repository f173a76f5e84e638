#pragma once

// Losses for the student-teacher scheme: target assignment, the supervised
// detection loss (used for labeled scenes and, with pseudo boxes, for
// unlabeled ones), strict pseudo-label filtering and the geometry-weighted
// feature matching loss between slot-aligned student/teacher proposals.
//
// Every loss returns its value and accumulates d(loss)/d(output) into an
// OutputGrads so that detector::backward can finish the chain. Discrete
// decisions (assignments, IoU targets, geometry weights) are frozen inputs.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpke/detector.hpp"
#include "dpke/geometry.hpp"
#include "dpke/synthdata.hpp"

namespace dpke {

// ---------------------------------------------------------------------------
// Huber

inline double huber(double x, double delta) {
  const double a = std::abs(x);
  return a <= delta ? 0.5 * x * x : delta * a - 0.5 * delta * delta;
}

inline double huber_grad(double x, double delta) {
  if (std::abs(x) <= delta) return x;
  return x > 0 ? delta : -delta;
}

// ---------------------------------------------------------------------------
// Target assignment

struct Assignment {
  static constexpr int kNegative = -1;
  static constexpr int kIgnored = -2;
  std::vector<int> label;  // >= 0: index of the matched box

  bool positive(std::size_t k) const { return label[k] >= 0; }
  bool negative(std::size_t k) const { return label[k] == kNegative; }
  std::size_t positive_count() const {
    return static_cast<std::size_t>(std::count_if(label.begin(), label.end(), [](int l) { return l >= 0; }));
  }
};

struct AssignConfig {
  double positive_radius = 0.3;
  double negative_radius = 0.6;
  double vote_radius = 1.0;
};

/// Anchor-distance matching (the cluster center a proposal is regressed
/// from): nearest box within the positive radius wins
/// (lowest index on ties), beyond the negative radius is background, the band
/// in between is ignored.
inline Assignment assign_targets(const std::vector<Proposal>& proposals,
                                 const std::vector<Aabb>& boxes, const AssignConfig& cfg = {}) {
  Assignment out;
  out.label.assign(proposals.size(), Assignment::kNegative);
  if (boxes.empty()) return out;
  for (std::size_t k = 0; k < proposals.size(); ++k) {
    double best = std::numeric_limits<double>::infinity();
    int best_idx = -1;
    for (std::size_t g = 0; g < boxes.size(); ++g) {
      const double d = std::sqrt(squared_distance(proposals[k].anchor, boxes[g].center));
      if (d < best) {
        best = d;
        best_idx = static_cast<int>(g);
      }
    }
    if (best <= cfg.positive_radius)
      out.label[k] = best_idx;
    else if (best > cfg.negative_radius)
      out.label[k] = Assignment::kNegative;
    else
      out.label[k] = Assignment::kIgnored;
  }
  return out;
}

/// Frozen supervision for one forward pass.
struct SupervisedTargets {
  Assignment assignment;
  std::vector<Annotation> boxes;
  std::vector<double> iou_target;          // per proposal; used on positives
  std::vector<std::optional<Point3>> vote_target;  // per seed
};

inline SupervisedTargets make_targets(const ForwardResult& fr, const std::vector<Annotation>& boxes,
                                      const AssignConfig& cfg = {}) {
  SupervisedTargets t;
  t.boxes = boxes;
  std::vector<Aabb> aabbs;
  for (const auto& b : boxes) aabbs.push_back(b.box);
  t.assignment = assign_targets(fr.proposals, aabbs, cfg);
  t.iou_target.assign(fr.proposals.size(), 0.0);
  for (std::size_t k = 0; k < fr.proposals.size(); ++k)
    if (t.assignment.positive(k))
      t.iou_target[k] = aabb_iou(fr.proposals[k].box(),
                                 aabbs[static_cast<std::size_t>(t.assignment.label[k])]);
  const std::size_t m_seeds = static_cast<std::size_t>(fr.trace.seed_pos.rows());
  t.vote_target.assign(m_seeds, std::nullopt);
  if (!aabbs.empty()) {
    const double r2 = cfg.vote_radius * cfg.vote_radius;
    for (std::size_t m = 0; m < m_seeds; ++m) {
      const Point3 s = fr.seed(m);
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_idx = 0;
      for (std::size_t g = 0; g < aabbs.size(); ++g) {
        const double d = squared_distance(s, aabbs[g].center);
        if (d < best) {
          best = d;
          best_idx = g;
        }
      }
      if (best <= r2) t.vote_target[m] = aabbs[best_idx].center;
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Loss containers

struct LossWeights {
  double objectness = 0.5;
  double cls = 0.5;
  double center = 1.0;
  double size = 1.0;
  double vote = 1.0;
  double iou = 0.5;
};

struct SupervisedTerms {
  double objectness = 0.0;
  double cls = 0.0;
  double center = 0.0;
  double size = 0.0;
  double vote = 0.0;
  double iou = 0.0;

  double weighted(const LossWeights& w) const {
    return w.objectness * objectness + w.cls * cls + w.center * center + w.size * size +
           w.vote * vote + w.iou * iou;
  }
  SupervisedTerms& operator+=(const SupervisedTerms& o) {
    objectness += o.objectness;
    cls += o.cls;
    center += o.center;
    size += o.size;
    vote += o.vote;
    iou += o.iou;
    return *this;
  }
  SupervisedTerms& operator*=(double s) {
    objectness *= s;
    cls *= s;
    center *= s;
    size *= s;
    vote *= s;
    iou *= s;
    return *this;
  }
  bool finite() const {
    return std::isfinite(objectness) && std::isfinite(cls) && std::isfinite(center) &&
           std::isfinite(size) && std::isfinite(vote) && std::isfinite(iou);
  }
};

struct LossCoefficients {
  LossWeights weights;
  double lambda_pseudo = 1.0;
  double lambda_feature = 1.0;
};

struct LossBreakdown {
  SupervisedTerms labeled;
  SupervisedTerms pseudo;  // iou stays 0
  double feature_matching = 0.0;
  double total = 0.0;

  double labeled_total(const LossWeights& w) const { return labeled.weighted(w); }
  double pseudo_total(const LossWeights& w) const { return pseudo.weighted(w); }
  bool finite() const {
    return labeled.finite() && pseudo.finite() && std::isfinite(feature_matching) &&
           std::isfinite(total);
  }
};

/// total = L_labeled + lambda_u * L_pseudo + lambda_f * L_feature.
inline LossBreakdown total_loss(const SupervisedTerms& labeled, const SupervisedTerms& pseudo,
                                double feature, const LossCoefficients& coef) {
  LossBreakdown b;
  b.labeled = labeled;
  b.pseudo = pseudo;
  b.feature_matching = feature;
  b.total = labeled.weighted(coef.weights) + coef.lambda_pseudo * pseudo.weighted(coef.weights) +
            coef.lambda_feature * feature;
  return b;
}

// ---------------------------------------------------------------------------
// Supervised detection loss

/// Mean-reduced detection terms. Gradients of `scale * weighted(terms)` are
/// added to `grads` when it is non-null.
inline SupervisedTerms supervised_loss(const ForwardResult& fr, const SupervisedTargets& t,
                                       const LossWeights& w, double delta, bool include_iou,
                                       OutputGrads* grads = nullptr, double scale = 1.0) {
  SupervisedTerms terms;
  const auto& props = fr.proposals;
  const std::size_t K = props.size();

  std::size_t n_obj = 0, n_pos = 0;
  for (std::size_t k = 0; k < K; ++k) {
    if (t.assignment.positive(k)) ++n_pos;
    if (t.assignment.label[k] != Assignment::kIgnored) ++n_obj;
  }

  if (n_obj > 0) {
    const double inv = 1.0 / static_cast<double>(n_obj);
    for (std::size_t k = 0; k < K; ++k) {
      if (t.assignment.label[k] == Assignment::kIgnored) continue;
      const double target = t.assignment.positive(k) ? 1.0 : 0.0;
      const double l = props[k].objectness_logit;
      terms.objectness += (detail::softplus(l) - target * l) * inv;
      if (grads)
        grads->objectness_logit[static_cast<Eigen::Index>(k)] +=
            scale * w.objectness * (detail::sigmoid(l) - target) * inv;
    }
  }

  if (n_pos > 0) {
    const double inv = 1.0 / static_cast<double>(n_pos);
    for (std::size_t k = 0; k < K; ++k) {
      if (!t.assignment.positive(k)) continue;
      const Eigen::Index kk = static_cast<Eigen::Index>(k);
      const Annotation& gt = t.boxes[static_cast<std::size_t>(t.assignment.label[k])];
      const Proposal& p = props[k];

      // Class cross-entropy.
      const double mx = p.class_logits.maxCoeff();
      const Vector e = (p.class_logits.array() - mx).exp().matrix();
      const double z = e.sum();
      terms.cls += (std::log(z) + mx - p.class_logits[gt.class_id]) * inv;
      if (grads) {
        for (Eigen::Index c = 0; c < p.class_logits.size(); ++c) {
          const double target = c == gt.class_id ? 1.0 : 0.0;
          grads->class_logits(kk, c) += scale * w.cls * (e[c] / z - target) * inv;
        }
      }

      for (int d = 0; d < 3; ++d) {
        const double dc = p.center[d] - gt.box.center[d];
        const double ds = p.size[d] - gt.box.size[d];
        terms.center += huber(dc, delta) / 3.0 * inv;
        terms.size += huber(ds, delta) / 3.0 * inv;
        if (grads) {
          grads->center(kk, d) += scale * w.center * huber_grad(dc, delta) / 3.0 * inv;
          grads->size(kk, d) += scale * w.size * huber_grad(ds, delta) / 3.0 * inv;
        }
      }

      if (include_iou) {
        const double di = p.iou_est - t.iou_target[k];
        terms.iou += huber(di, delta) * inv;
        if (grads)
          grads->iou_logit[kk] +=
              scale * w.iou * huber_grad(di, delta) * p.iou_est * (1.0 - p.iou_est) * inv;
      }
    }
  }

  std::size_t n_vote = 0;
  for (const auto& v : t.vote_target)
    if (v) ++n_vote;
  if (n_vote > 0) {
    const double inv = 1.0 / static_cast<double>(n_vote);
    for (std::size_t m = 0; m < t.vote_target.size(); ++m) {
      if (!t.vote_target[m]) continue;
      const Point3 v = fr.vote(m);
      for (int d = 0; d < 3; ++d) {
        const double dv = v[d] - (*t.vote_target[m])[d];
        terms.vote += huber(dv, delta) / 3.0 * inv;
        if (grads)
          grads->votes(static_cast<Eigen::Index>(m), d) +=
              scale * w.vote * huber_grad(dv, delta) / 3.0 * inv;
      }
    }
  }
  return terms;
}

// ---------------------------------------------------------------------------
// Pseudo labels

struct PseudoThresholds {
  double objectness = 0.9;
  double class_confidence = 0.9;
  double iou = 0.25;
};

struct PseudoLabel {
  Aabb box;
  int class_id = 0;
  double objectness = 0.0;
  double class_confidence = 0.0;
  double iou_est = 0.0;
};

inline bool passes_strict_filter(const Proposal& p, const PseudoThresholds& th) {
  return p.objectness >= th.objectness && p.class_confidence() >= th.class_confidence &&
         p.iou_est >= th.iou;
}

/// Keeps proposals clearing all three strict thresholds. Input is expected to
/// be NMS-deduplicated already.
inline std::vector<PseudoLabel> filter_pseudo_labels(const std::vector<Proposal>& proposals,
                                                     const PseudoThresholds& th = {}) {
  std::vector<PseudoLabel> out;
  for (const auto& p : proposals) {
    if (!passes_strict_filter(p, th)) continue;
    out.push_back({p.box(), p.predicted_class(), p.objectness, p.class_confidence(), p.iou_est});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Geometry-aware feature matching

enum class WeightMode { kLowChamfer, kHighChamfer, kConstant, kOff };
enum class GateSource { kTeacher, kStudent };

struct FeatureMatchConfig {
  double tau_obj = 0.6;
  double delta = 1.0;
  std::size_t target_points = 500;
  double empty_weight = 0.0;
  ChamferReduction reduction = ChamferReduction::kMean;
  WeightMode weight_mode = WeightMode::kLowChamfer;
  GateSource gate_source = GateSource::kTeacher;
};

/// Maps the raw exp(-chamfer) weight according to the ablation mode.
inline double apply_weight_mode(double w, WeightMode mode) {
  switch (mode) {
    case WeightMode::kLowChamfer: return w;
    case WeightMode::kHighChamfer: return 1.0 - w;
    case WeightMode::kConstant: return 1.0;
    case WeightMode::kOff: return 0.0;
  }
  return w;
}

/// Mean over components of Huber(z_s - z_t).
inline double pair_feature_loss(const Vector& zs, const Vector& zt, double delta) {
  if (zs.size() != zt.size() || zs.size() == 0)
    throw std::invalid_argument("pair_feature_loss: feature size mismatch");
  double s = 0.0;
  for (Eigen::Index i = 0; i < zs.size(); ++i) s += huber(zs[i] - zt[i], delta);
  return s / static_cast<double>(zs.size());
}

struct FeatureMatchResult {
  double loss = 0.0;
  std::size_t gated = 0;
  std::vector<double> weights;  // per slot, 0 for ungated slots
  std::vector<char> gate;
};

/// Geometry weights for each slot, computed once and then held constant.
/// `canonical` is the teacher-frame cloud, `aug` maps it to the student frame.
inline FeatureMatchResult feature_match_weights(const std::vector<Proposal>& student,
                                                const std::vector<Proposal>& teacher,
                                                const PointSet& canonical, const AugRecord& aug,
                                                const FeatureMatchConfig& cfg, Rng& rng) {
  if (student.size() != teacher.size())
    throw std::invalid_argument("feature matching: proposal counts differ (" +
                                std::to_string(student.size()) + " vs " +
                                std::to_string(teacher.size()) + ")");
  FeatureMatchResult r;
  r.weights.assign(student.size(), 0.0);
  r.gate.assign(student.size(), 0);
  if (cfg.weight_mode == WeightMode::kOff) return r;
  for (std::size_t k = 0; k < student.size(); ++k) {
    const double o = cfg.gate_source == GateSource::kTeacher ? teacher[k].objectness
                                                             : student[k].objectness;
    if (!(o >= cfg.tau_obj)) continue;
    r.gate[k] = 1;
    ++r.gated;
    double w = 1.0;
    if (cfg.weight_mode != WeightMode::kConstant) {
      const PointSet pt = crop_points_in_box(canonical, teacher[k].box()).first;
      const PointSet ps = crop_points_in_box(canonical, inverse_transform_box(student[k].box(), aug)).first;
      w = geometry_weight(pt, ps, cfg.target_points, cfg.empty_weight, cfg.reduction, rng);
    }
    r.weights[k] = apply_weight_mode(w, cfg.weight_mode);
  }
  return r;
}

/// Loss value for given (frozen) gates and weights; gradient of
/// `scale * loss` flows into the student features only.
inline double feature_matching_value(const std::vector<Proposal>& student,
                                     const std::vector<Proposal>& teacher,
                                     const FeatureMatchResult& fw, double delta,
                                     OutputGrads* grads = nullptr, double scale = 1.0) {
  if (student.size() != teacher.size() || fw.gate.size() != student.size())
    throw std::invalid_argument("feature matching: misaligned proposals");
  if (fw.gated == 0) return 0.0;
  const double inv_slots = 1.0 / static_cast<double>(fw.gated);
  double loss = 0.0;
  for (std::size_t k = 0; k < student.size(); ++k) {
    if (!fw.gate[k]) continue;
    const Vector& zs = student[k].feature_z;
    const Vector& zt = teacher[k].feature_z;
    const double w = fw.weights[k];
    loss += w * pair_feature_loss(zs, zt, delta) * inv_slots;
    if (grads && w != 0.0) {
      const double coef = scale * w * inv_slots / static_cast<double>(zs.size());
      for (Eigen::Index i = 0; i < zs.size(); ++i)
        grads->feature(static_cast<Eigen::Index>(k), i) += coef * huber_grad(zs[i] - zt[i], delta);
    }
  }
  return loss;
}

/// Gate, weigh and evaluate in one call.
inline FeatureMatchResult feature_matching_loss(const std::vector<Proposal>& student,
                                                const std::vector<Proposal>& teacher,
                                                const PointSet& canonical, const AugRecord& aug,
                                                const FeatureMatchConfig& cfg, Rng& rng,
                                                OutputGrads* grads = nullptr, double scale = 1.0) {
  FeatureMatchResult r = feature_match_weights(student, teacher, canonical, aug, cfg, rng);
  r.loss = feature_matching_value(student, teacher, r, cfg.delta, grads, scale);
  return r;
}

}  // namespace dpke
