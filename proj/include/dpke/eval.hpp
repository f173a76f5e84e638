#pragma once

// Class-wise NMS, all-point interpolated average precision, mAP at IoU 0.25
// and 0.5, and the teacher supervision breakdown (strong / weak / below
// threshold / invalid).

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpke/augment.hpp"
#include "dpke/detector.hpp"
#include "dpke/geometry.hpp"
#include "dpke/ssl.hpp"
#include "dpke/synthdata.hpp"

namespace dpke {

struct Detection {
  std::size_t scene = 0;
  int class_id = 0;
  Aabb box;
  double score = 0.0;
};

/// Indices kept by greedy class-wise NMS: highest score first (lower index
/// on ties); a box survives iff its IoU with every kept box of the same
/// class is below the threshold.
inline std::vector<std::size_t> nms_indices(const std::vector<Aabb>& boxes,
                                            const std::vector<int>& classes,
                                            const std::vector<double>& scores,
                                            double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> kept;
  for (std::size_t i : order) {
    bool keep = true;
    for (std::size_t j : kept) {
      if (classes[j] == classes[i] && aabb_iou(boxes[i], boxes[j]) >= iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(i);
  }
  return kept;
}

inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<Aabb> boxes;
  std::vector<int> classes;
  std::vector<double> scores;
  for (const auto& d : dets) {
    boxes.push_back(d.box);
    classes.push_back(d.class_id);
    scores.push_back(d.score);
  }
  std::vector<Detection> out;
  for (std::size_t i : nms_indices(boxes, classes, scores, iou_threshold)) out.push_back(dets[i]);
  return out;
}

inline std::vector<Proposal> nms_proposals(const std::vector<Proposal>& props, double iou_threshold) {
  std::vector<Aabb> boxes;
  std::vector<int> classes;
  std::vector<double> scores;
  for (const auto& p : props) {
    boxes.push_back(p.box());
    classes.push_back(p.predicted_class());
    scores.push_back(p.objectness);
  }
  std::vector<Proposal> out;
  for (std::size_t i : nms_indices(boxes, classes, scores, iou_threshold)) out.push_back(props[i]);
  return out;
}

/// Greedy TP/FP flags for one class's detections, in the given (score) order.
inline std::vector<char> match_detections(const std::vector<Detection>& sorted_dets,
                                          const std::vector<std::vector<Annotation>>& gts,
                                          int class_id, double iou_threshold) {
  std::vector<std::vector<char>> used(gts.size());
  for (std::size_t s = 0; s < gts.size(); ++s) used[s].assign(gts[s].size(), 0);
  std::vector<char> tp(sorted_dets.size(), 0);
  for (std::size_t i = 0; i < sorted_dets.size(); ++i) {
    const Detection& d = sorted_dets[i];
    if (d.scene >= gts.size()) continue;
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < gts[d.scene].size(); ++g) {
      const auto& a = gts[d.scene][g];
      if (a.class_id != class_id || used[d.scene][g]) continue;
      const double iou = aabb_iou(d.box, a.box);
      if (iou > best) {
        best = iou;
        best_g = g;
      }
    }
    if (best >= iou_threshold) {
      tp[i] = 1;
      used[d.scene][best_g] = 1;
    }
  }
  return tp;
}

/// AP for one class: area under the precision envelope over recall.
inline double class_average_precision(const std::vector<Detection>& dets,
                                      const std::vector<std::vector<Annotation>>& gts,
                                      int class_id, double iou_threshold) {
  std::size_t n_gt = 0;
  for (const auto& s : gts)
    for (const auto& a : s)
      if (a.class_id == class_id) ++n_gt;
  if (n_gt == 0) return 0.0;

  std::vector<Detection> mine;
  for (const auto& d : dets)
    if (d.class_id == class_id) mine.push_back(d);
  std::stable_sort(mine.begin(), mine.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (mine.empty()) return 0.0;

  const std::vector<char> tp = match_detections(mine, gts, class_id, iou_threshold);
  const std::size_t n = mine.size();
  std::vector<double> precision(n), recall(n);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    hits += tp[i] ? 1 : 0;
    precision[i] = static_cast<double>(hits) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(hits) / static_cast<double>(n_gt);
  }
  for (std::size_t i = n - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

inline std::vector<double> average_precision(const std::vector<Detection>& dets,
                                             const std::vector<std::vector<Annotation>>& gts,
                                             double iou_threshold, int num_classes) {
  std::vector<double> out(static_cast<std::size_t>(num_classes), 0.0);
  for (int c = 0; c < num_classes; ++c)
    out[static_cast<std::size_t>(c)] = class_average_precision(dets, gts, c, iou_threshold);
  return out;
}

struct EvalResult {
  std::vector<double> ap25;
  std::vector<double> ap50;
  std::vector<std::size_t> gt_count;
  double map25 = 0.0;
  double map50 = 0.0;

  friend bool operator==(const EvalResult&, const EvalResult&) = default;
};

/// mAP = unweighted mean over classes with at least one ground-truth box.
inline EvalResult summarize(const std::vector<Detection>& dets,
                            const std::vector<std::vector<Annotation>>& gts, int num_classes) {
  EvalResult r;
  r.ap25 = average_precision(dets, gts, 0.25, num_classes);
  r.ap50 = average_precision(dets, gts, 0.5, num_classes);
  r.gt_count.assign(static_cast<std::size_t>(num_classes), 0);
  for (const auto& s : gts)
    for (const auto& a : s)
      if (a.class_id >= 0 && a.class_id < num_classes) ++r.gt_count[static_cast<std::size_t>(a.class_id)];
  std::size_t present = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (!r.gt_count[static_cast<std::size_t>(c)]) continue;
    ++present;
    r.map25 += r.ap25[static_cast<std::size_t>(c)];
    r.map50 += r.ap50[static_cast<std::size_t>(c)];
  }
  if (present) {
    r.map25 /= static_cast<double>(present);
    r.map50 /= static_cast<double>(present);
  }
  return r;
}

struct EvalConfig {
  double nms_iou = 0.25;
  std::uint64_t seed = 0;
};

/// Post-NMS detections of one scene.
inline std::vector<Proposal> detect(const ModelParams& params, const Scene& scene,
                                    std::uint64_t seed, double nms_iou) {
  Rng sub = make_rng(seed, {0xE7A1, 0});
  const Scene sampled = weak_augment(scene, static_cast<std::size_t>(params.arch.num_points), sub);
  Rng fps = make_rng(seed, {0xE7A1, 1});
  const ForwardResult fr = forward(params, sampled.points, nullptr, &fps);
  return nms_proposals(fr.proposals, nms_iou);
}

inline EvalResult evaluate(const ModelParams& params, const std::vector<Scene>& scenes,
                           const EvalConfig& cfg = {}) {
  std::vector<Detection> dets;
  std::vector<std::vector<Annotation>> gts;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    gts.push_back(scenes[s].annotations);
    for (const auto& p : detect(params, scenes[s], mix_seed(cfg.seed, {s}), cfg.nms_iou))
      dets.push_back({s, p.predicted_class(), p.box(), p.objectness});
  }
  return summarize(dets, gts, params.arch.num_classes);
}

inline void write_eval_csv(std::ostream& os, const EvalResult& r) {
  char buf[128];
  os << "class,gt_count,ap25,ap50\n";
  for (std::size_t c = 0; c < r.ap25.size(); ++c) {
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%.6f,%.6f\n", c, r.gt_count[c], r.ap25[c], r.ap50[c]);
    os << buf;
  }
  std::size_t total = 0;
  for (auto n : r.gt_count) total += n;
  std::snprintf(buf, sizeof(buf), "mAP25,%zu,%.6f,\nmAP50,%zu,,%.6f\n", total, r.map25, total, r.map50);
  os << buf;
}

inline void write_eval_csv(const std::string& path, const EvalResult& r) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_eval_csv(os, r);
}

// ---------------------------------------------------------------------------
// Supervision breakdown

struct SupervisionStats {
  std::size_t detections = 0;
  double strong = 0.0;        // matched and passes the strict filter
  double weak = 0.0;          // matched, >= tau_obj, not strong
  double below = 0.0;         // matched but objectness < tau_obj
  double invalid = 0.0;       // no ground truth at IoU >= 0.25
};

/// Fractions over post-NMS teacher detections. All four buckets sum to 1
/// (all zero when there are no detections).
inline SupervisionStats supervision_stats(const std::vector<Proposal>& detections,
                                          const std::vector<Annotation>& gts, double tau_obj,
                                          const PseudoThresholds& strict) {
  SupervisionStats st;
  st.detections = detections.size();
  if (detections.empty()) return st;
  std::size_t strong = 0, weak = 0, below = 0, invalid = 0;
  for (const auto& p : detections) {
    bool matched = false;
    for (const auto& g : gts)
      if (aabb_iou(p.box(), g.box) >= 0.25) { matched = true; break; }
    if (!matched)
      ++invalid;
    else if (passes_strict_filter(p, strict))
      ++strong;
    else if (p.objectness >= tau_obj)
      ++weak;
    else
      ++below;
  }
  const double n = static_cast<double>(detections.size());
  st.strong = static_cast<double>(strong) / n;
  st.weak = static_cast<double>(weak) / n;
  st.below = static_cast<double>(below) / n;
  st.invalid = static_cast<double>(invalid) / n;
  return st;
}

}  // namespace dpke
