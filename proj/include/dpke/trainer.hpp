#pragma once

// Two-stage training. Stage one fits the detector on labeled scenes only.
// Stage two copies the result into a student and an EMA teacher and runs
// semi_step over mixed labeled/unlabeled batches:
//
//   unlabeled scene: [paste bank instances, collision = teacher boxes]
//                    -> weak sub-sample (canonical) -> strong flip/scale (student)
//                    -> student forward (captures FPS indices)
//                    -> teacher forward on canonical reusing those indices
//                    -> strict pseudo labels + geometry-weighted feature matching
//   labeled scene:   [paste, collision = ground truth] -> weak -> strong
//                    -> supervised loss + class-statistics update
//   then Adam on the student and EMA into the teacher.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpke/augment.hpp"
#include "dpke/checkpoint.hpp"
#include "dpke/detector.hpp"
#include "dpke/eval.hpp"
#include "dpke/log.hpp"
#include "dpke/random.hpp"
#include "dpke/ssl.hpp"
#include "dpke/synthdata.hpp"

namespace dpke {

struct TrainerConfig {
  ArchConfig arch;

  int epochs_pretrain = 30;
  int epochs_semi = 100;
  int aug_epochs = 60;  // pasting only while epoch < aug_epochs
  int batch_labeled = 2;
  int batch_unlabeled = 4;
  double lr = 0.003;
  std::vector<int> lr_decay_epochs = {40, 60, 80, 90};
  double lr_decay_factor = 0.3;
  double ema_alpha = 0.99;

  double tau_obj = 0.6;
  PseudoThresholds strict;
  double delta = 1.0;
  std::size_t m0 = 500;
  double w_threshold = 0.0;
  ChamferReduction reduction = ChamferReduction::kMean;
  double lambda_u = 1.0;
  double lambda_f = 1.0;
  LossWeights weights;
  AssignConfig assign;

  SamplingMode sampling = SamplingMode::kHighLogit;
  WeightMode geometry = WeightMode::kLowChamfer;
  GateSource gate_source = GateSource::kTeacher;

  int max_inserts = 4;
  int insert_attempts = 10;
  double collision_objectness = 0.5;
  double nms_iou = 0.25;
  double room_extent = 8.0;
  double stats_momentum = 0.95;
  StrongAugConfig strong;

  std::uint64_t seed = 0;
  int checkpoint_every = 10;
  std::string checkpoint_dir;   // empty: no periodic checkpoints
  bool verify_alignment = false;  // replay the teacher forward every step
};

inline void validate_trainer_config(const TrainerConfig& c) {
  validate_arch(c.arch);
  auto unit = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0, 1]");
  };
  unit(c.tau_obj, "tau_obj");
  unit(c.strict.objectness, "tau_obj_strict");
  unit(c.strict.class_confidence, "tau_cls");
  unit(c.strict.iou, "tau_iou");
  unit(c.w_threshold, "w_threshold");
  unit(c.ema_alpha, "ema_alpha");
  unit(c.collision_objectness, "collision_objectness");
  if (c.aug_epochs > c.epochs_semi) throw std::invalid_argument("aug_epochs must be <= epochs_semi");
  if (c.batch_labeled < 1 || c.batch_unlabeled < 1) throw std::invalid_argument("batches must be >= 1");
  if (c.epochs_pretrain < 0 || c.epochs_semi < 0) throw std::invalid_argument("epochs must be >= 0");
  if (c.m0 < 1) throw std::invalid_argument("m0 must be >= 1");
  if (!(c.lr > 0.0)) throw std::invalid_argument("lr must be > 0");
}

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepRecord {
  int epoch = 0;
  std::uint64_t step = 0;
  LossBreakdown loss;
  double loss_pseudo = 0.0;  // weighted pseudo sub-terms
  std::size_t n_pseudo = 0;
  std::size_t n_gated = 0;
  std::size_t n_inserted = 0;
  double frac_strong = 0.0;
  double frac_weak = 0.0;
  double frac_invalid = 0.0;
  std::size_t n_collision_violations = 0;
  std::size_t n_misaligned = 0;
  std::size_t n_replay_mismatch = 0;
};

using TrainLog = std::vector<StepRecord>;

inline const char* kTrainLogHeader =
    "epoch,step,loss_total,loss_obj,loss_cls,loss_center,loss_size,loss_vote,loss_iou,"
    "loss_pseudo,loss_feat,n_pseudo,n_gated,n_inserted,frac_strong,frac_weak,frac_invalid";

inline void write_train_log(std::ostream& os, const TrainLog& log) {
  os << kTrainLogHeader << '\n';
  char buf[512];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf),
                  "%d,%llu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%zu,%zu,%zu,%.6f,%.6f,%.6f\n",
                  r.epoch, static_cast<unsigned long long>(r.step), r.loss.total,
                  r.loss.labeled.objectness, r.loss.labeled.cls, r.loss.labeled.center,
                  r.loss.labeled.size, r.loss.labeled.vote, r.loss.labeled.iou, r.loss_pseudo,
                  r.loss.feature_matching, r.n_pseudo, r.n_gated, r.n_inserted, r.frac_strong,
                  r.frac_weak, r.frac_invalid);
    os << buf;
  }
}

inline void write_train_log(const std::string& path, const TrainLog& log) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_train_log(os, log);
}

inline double learning_rate(const TrainerConfig& c, int epoch) {
  double lr = c.lr;
  for (int e : c.lr_decay_epochs)
    if (epoch >= e) lr *= c.lr_decay_factor;
  return lr;
}

namespace detail {

enum StreamTag : std::uint64_t {
  kTagPretrainOrder = 0x100, kTagPretrainScene, kTagInit, kTagSemiOrder, kTagUnlabeledOrder,
  kTagInsert, kTagWeak, kTagStrong, kTagFps, kTagGeometry, kTagCollision, kTagWarmup
};

inline std::vector<Annotation> to_frame(const std::vector<Annotation>& boxes, const AugRecord& aug) {
  std::vector<Annotation> out;
  out.reserve(boxes.size());
  for (const auto& a : boxes) out.push_back({a.class_id, transform_box(a.box, aug)});
  return out;
}

inline void accumulate(ModelParams& into, const ModelParams& g) {
  for (std::size_t i = 0; i < into.tensors.size(); ++i) into.tensors[i] += g.tensors[i];
}

inline bool same_proposals(const std::vector<Proposal>& a, const std::vector<Proposal>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].center != b[i].center || a[i].size != b[i].size ||
        a[i].objectness_logit != b[i].objectness_logit || a[i].class_logits != b[i].class_logits ||
        a[i].iou_logit != b[i].iou_logit || a[i].feature_z != b[i].feature_z)
      return false;
  }
  return true;
}

inline void check_finite(const LossBreakdown& b, int epoch, std::uint64_t step, const char* stage) {
  if (b.finite()) return;
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "%s diverged at epoch %d step %llu (total=%g labeled=%g pseudo=%g feat=%g)", stage,
                epoch, static_cast<unsigned long long>(step), b.total, b.labeled.objectness + b.labeled.cls,
                b.pseudo.objectness, b.feature_matching);
  throw TrainingError(buf);
}

}  // namespace detail

/// Supervised-only loss of one labeled scene, run through weak + strong
/// augmentation. Adds parameter gradients of `scale * loss` into `grads`.
inline SupervisedTerms labeled_scene_loss(const ModelParams& params, const Scene& scene,
                                          const TrainerConfig& cfg, Rng& weak_rng, Rng& strong_rng,
                                          Rng& fps_rng, double scale, ModelParams& grads,
                                          ClassStats* stats = nullptr) {
  const Scene canonical = weak_augment(scene, static_cast<std::size_t>(cfg.arch.num_points), weak_rng);
  const auto [cloud, aug] = strong_augment(canonical.points, strong_rng, cfg.strong);
  const ForwardResult fr = forward(params, cloud, nullptr, &fps_rng);
  const SupervisedTargets targets = make_targets(fr, detail::to_frame(canonical.annotations, aug), cfg.assign);
  OutputGrads og = OutputGrads::zeros(cfg.arch);
  const SupervisedTerms terms = supervised_loss(fr, targets, cfg.weights, cfg.delta, true, &og, scale);
  detail::accumulate(grads, backward(params, fr, og));
  if (stats) update_class_stats(*stats, fr.proposals, targets.assignment, targets.boxes);
  return terms;
}

/// Stage one. `on_step` (optional) receives each step's mean labeled terms.
inline ModelParams pretrain(const TrainerConfig& cfg, const std::vector<const Scene*>& labeled,
                            TrainLog* log = nullptr) {
  validate_trainer_config(cfg);
  if (labeled.empty()) throw std::invalid_argument("pretrain: no labeled scenes");
  ModelParams params = init_params(cfg.arch, mix_seed(cfg.seed, {detail::kTagInit}));
  AdamState adam = AdamState::for_params(params);
  std::uint64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs_pretrain; ++epoch) {
    std::vector<std::size_t> order(labeled.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng order_rng = make_rng(cfg.seed, {detail::kTagPretrainOrder, static_cast<std::uint64_t>(epoch)});
    shuffle(order, order_rng);
    const double lr = learning_rate(cfg, epoch);
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_labeled)) {
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_labeled));
      const double scale = 1.0 / static_cast<double>(end - b);
      ModelParams grads = ModelParams::zeros(cfg.arch);
      SupervisedTerms mean_terms;
      for (std::size_t i = b; i < end; ++i) {
        const std::uint64_t tag = static_cast<std::uint64_t>(order[i]);
        Rng w = make_rng(cfg.seed, {detail::kTagPretrainScene, step, tag, 0});
        Rng s = make_rng(cfg.seed, {detail::kTagPretrainScene, step, tag, 1});
        Rng f = make_rng(cfg.seed, {detail::kTagPretrainScene, step, tag, 2});
        SupervisedTerms t = labeled_scene_loss(params, *labeled[order[i]], cfg, w, s, f, scale, grads);
        t *= scale;
        mean_terms += t;
      }
      const LossBreakdown lb = total_loss(mean_terms, {}, 0.0, {cfg.weights, cfg.lambda_u, cfg.lambda_f});
      detail::check_finite(lb, epoch, step, "pretrain");
      adam_step(params, grads, adam, lr);
      if (log) {
        StepRecord r;
        r.epoch = epoch;
        r.step = step;
        r.loss = lb;
        log->push_back(r);
      }
      ++step;
    }
  }
  return params;
}

/// Mutable state of the semi-supervised stage.
struct SemiState {
  ModelParams student;
  ModelParams teacher;
  AdamState adam;
  ClassStats stats;
  ProposalBank bank;
  std::uint64_t step = 0;
  // Collision boxes per unlabeled scene and the epoch they were computed in.
  std::map<const Scene*, std::pair<int, std::vector<Aabb>>> collision_cache;
};

inline SemiState make_semi_state(const TrainerConfig& cfg, const ModelParams& pretrained,
                                 const std::vector<const Scene*>& labeled) {
  SemiState st{pretrained, pretrained, AdamState::for_params(pretrained),
               ClassStats::make(cfg.arch.num_classes, cfg.stats_momentum),
               labeled.empty() ? ProposalBank{} : build_proposal_bank(labeled, cfg.arch.num_classes),
               0, {}};
  if (st.bank.by_class.empty()) st.bank.by_class.resize(static_cast<std::size_t>(cfg.arch.num_classes));
  // Seed the class statistics with one pass of the pretrained model.
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    Rng w = make_rng(cfg.seed, {detail::kTagWarmup, i, 0});
    Rng f = make_rng(cfg.seed, {detail::kTagWarmup, i, 1});
    const Scene canonical = weak_augment(*labeled[i], static_cast<std::size_t>(cfg.arch.num_points), w);
    const ForwardResult fr = forward(pretrained, canonical.points, nullptr, &f);
    const SupervisedTargets t = make_targets(fr, canonical.annotations, cfg.assign);
    update_class_stats(st.stats, fr.proposals, t.assignment, t.boxes);
  }
  return st;
}

inline std::vector<Aabb> teacher_collision_boxes(SemiState& st, const Scene* scene, int epoch,
                                                 const TrainerConfig& cfg) {
  auto it = st.collision_cache.find(scene);
  if (it != st.collision_cache.end() && it->second.first == epoch) return it->second.second;
  const auto dets = detect(st.teacher, *scene,
                           mix_seed(cfg.seed, {detail::kTagCollision, std::hash<std::string>{}(scene->id) & 0xFFFFFFFFu,
                                               static_cast<std::uint64_t>(epoch)}),
                           cfg.nms_iou);
  std::vector<Aabb> boxes;
  for (const auto& p : dets)
    if (p.objectness >= cfg.collision_objectness) boxes.push_back(p.box());
  st.collision_cache[scene] = {epoch, boxes};
  return boxes;
}

/// One optimizer step over a labeled and an unlabeled batch.
inline StepRecord semi_step(SemiState& st, const std::vector<const Scene*>& labeled_batch,
                            const std::vector<const Scene*>& unlabeled_batch, int epoch,
                            const TrainerConfig& cfg) {
  StepRecord rec;
  rec.epoch = epoch;
  rec.step = st.step;
  const std::size_t n_points = static_cast<std::size_t>(cfg.arch.num_points);
  const bool pasting = epoch < cfg.aug_epochs && cfg.sampling != SamplingMode::kOff && !st.bank.empty();
  const ClassProbabilities probs = class_probabilities(st.stats, cfg.sampling);
  const bool matching = cfg.geometry != WeightMode::kOff && cfg.lambda_f > 0.0;

  FeatureMatchConfig fm;
  fm.tau_obj = cfg.tau_obj;
  fm.delta = cfg.delta;
  fm.target_points = cfg.m0;
  fm.empty_weight = cfg.w_threshold;
  fm.reduction = cfg.reduction;
  fm.weight_mode = cfg.geometry;
  fm.gate_source = cfg.gate_source;

  ModelParams grads = ModelParams::zeros(cfg.arch);
  auto stream = [&](detail::StreamTag tag, std::uint64_t slot) {
    return make_rng(cfg.seed, {tag, st.step, slot});
  };

  auto paste = [&](const Scene& scene, const std::vector<Aabb>& collision, bool is_labeled,
                   std::uint64_t slot) -> Scene {
    if (!pasting) return scene;
    Rng rng = stream(detail::kTagInsert, slot);
    const auto picks = sample_instances(st.bank, probs, static_cast<std::size_t>(cfg.max_inserts), rng);
    InsertResult ins = insert_instances(scene, picks, collision, is_labeled, rng, cfg.room_extent,
                                        cfg.insert_attempts);
    for (const auto& a : ins.inserted)
      for (const auto& c : collision)
        if (aabb_overlaps(a.box, c)) ++rec.n_collision_violations;
    rec.n_inserted += ins.inserted.size();
    return std::move(ins.scene);
  };

  // Labeled branch.
  SupervisedTerms labeled_terms;
  if (!labeled_batch.empty()) {
    const double scale = 1.0 / static_cast<double>(labeled_batch.size());
    for (std::size_t i = 0; i < labeled_batch.size(); ++i) {
      const Scene& src = *labeled_batch[i];
      const Scene scene = paste(src, src.boxes(), true, i);
      Rng w = stream(detail::kTagWeak, i);
      Rng s = stream(detail::kTagStrong, i);
      Rng f = stream(detail::kTagFps, i);
      SupervisedTerms t = labeled_scene_loss(st.student, scene, cfg, w, s, f, scale, grads, &st.stats);
      t *= scale;
      labeled_terms += t;
    }
  }

  // Unlabeled branch.
  SupervisedTerms pseudo_terms;
  double feature_loss = 0.0;
  std::size_t stat_dets = 0;
  double strong_sum = 0.0, weak_sum = 0.0, invalid_sum = 0.0;
  if (!unlabeled_batch.empty()) {
    const double scale = 1.0 / static_cast<double>(unlabeled_batch.size());
    for (std::size_t i = 0; i < unlabeled_batch.size(); ++i) {
      const std::uint64_t slot = 1000 + i;
      const Scene* src = unlabeled_batch[i];
      std::vector<Aabb> collision;
      if (pasting) collision = teacher_collision_boxes(st, src, epoch, cfg);
      const Scene scene = paste(*src, collision, false, slot);
      Rng w = stream(detail::kTagWeak, slot);
      Rng s = stream(detail::kTagStrong, slot);
      Rng f = stream(detail::kTagFps, slot);
      const Scene canonical = weak_augment(scene, n_points, w);
      const auto [cloud, aug] = strong_augment(canonical.points, s, cfg.strong);

      const ForwardResult fs = forward(st.student, cloud, nullptr, &f);
      const ForwardResult ft = forward(st.teacher, canonical.points, &fs.fps);
      if (!(ft.fps == fs.fps)) ++rec.n_misaligned;
      if (cfg.verify_alignment) {
        const ForwardResult replay = forward(st.teacher, canonical.points, &ft.fps);
        if (!detail::same_proposals(replay.proposals, ft.proposals)) ++rec.n_replay_mismatch;
      }

      const std::vector<Proposal> teacher_dets = nms_proposals(ft.proposals, cfg.nms_iou);
      const std::vector<PseudoLabel> pseudo = filter_pseudo_labels(teacher_dets, cfg.strict);
      rec.n_pseudo += pseudo.size();
      std::vector<Annotation> pseudo_boxes;
      for (const auto& p : pseudo) pseudo_boxes.push_back({p.class_id, transform_box(p.box, aug)});

      OutputGrads og = OutputGrads::zeros(cfg.arch);
      const SupervisedTargets targets = make_targets(fs, pseudo_boxes, cfg.assign);
      SupervisedTerms pt =
          supervised_loss(fs, targets, cfg.weights, cfg.delta, false, &og, cfg.lambda_u * scale);
      pt *= scale;
      pseudo_terms += pt;

      if (matching) {
        Rng g = stream(detail::kTagGeometry, slot);
        const FeatureMatchResult r = feature_matching_loss(fs.proposals, ft.proposals, canonical.points,
                                                           aug, fm, g, &og, cfg.lambda_f * scale);
        feature_loss += r.loss * scale;
        rec.n_gated += r.gated;
      }
      detail::accumulate(grads, backward(st.student, fs, og));

      const SupervisionStats ss = supervision_stats(teacher_dets, canonical.annotations, cfg.tau_obj, cfg.strict);
      stat_dets += ss.detections;
      strong_sum += ss.strong * static_cast<double>(ss.detections);
      weak_sum += ss.weak * static_cast<double>(ss.detections);
      invalid_sum += ss.invalid * static_cast<double>(ss.detections);
    }
  }
  if (stat_dets) {
    rec.frac_strong = strong_sum / static_cast<double>(stat_dets);
    rec.frac_weak = weak_sum / static_cast<double>(stat_dets);
    rec.frac_invalid = invalid_sum / static_cast<double>(stat_dets);
  }

  const LossCoefficients coef{cfg.weights, cfg.lambda_u, matching ? cfg.lambda_f : 0.0};
  rec.loss = total_loss(labeled_terms, pseudo_terms, feature_loss, coef);
  rec.loss_pseudo = pseudo_terms.weighted(cfg.weights);
  detail::check_finite(rec.loss, epoch, st.step, "semi_step");

  adam_step(st.student, grads, st.adam, learning_rate(cfg, epoch));
  ema_update(st.teacher, st.student, cfg.ema_alpha);
  ++st.step;
  return rec;
}

struct TrainResult {
  ModelParams student;
  ModelParams teacher;
  TrainLog log;
};

/// Stage two. An epoch is one pass over the labeled scenes; unlabeled scenes
/// are drawn from a reshuffled cyclic stream alongside.
inline TrainResult train_semi(const TrainerConfig& cfg, const std::vector<const Scene*>& labeled,
                              const std::vector<const Scene*>& unlabeled, const ModelParams& pretrained) {
  validate_trainer_config(cfg);
  if (labeled.empty()) throw std::invalid_argument("train_semi: no labeled scenes");
  if (!(pretrained.arch == cfg.arch)) throw std::invalid_argument("train_semi: architecture mismatch");
  SemiState st = make_semi_state(cfg, pretrained, labeled);
  TrainResult res;

  std::vector<std::size_t> u_order;
  std::size_t u_cursor = 0;
  std::uint64_t u_cycle = 0;
  auto next_unlabeled = [&]() -> const Scene* {
    if (u_cursor >= u_order.size()) {
      u_order.resize(unlabeled.size());
      for (std::size_t i = 0; i < u_order.size(); ++i) u_order[i] = i;
      Rng r = make_rng(cfg.seed, {detail::kTagUnlabeledOrder, u_cycle++});
      shuffle(u_order, r);
      u_cursor = 0;
    }
    return unlabeled[u_order[u_cursor++]];
  };

  for (int epoch = 0; epoch < cfg.epochs_semi; ++epoch) {
    std::vector<std::size_t> order(labeled.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng order_rng = make_rng(cfg.seed, {detail::kTagSemiOrder, static_cast<std::uint64_t>(epoch)});
    shuffle(order, order_rng);
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_labeled)) {
      std::vector<const Scene*> lb, ub;
      for (std::size_t i = b; i < std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_labeled)); ++i)
        lb.push_back(labeled[order[i]]);
      if (!unlabeled.empty())
        for (int i = 0; i < cfg.batch_unlabeled; ++i) ub.push_back(next_unlabeled());
      res.log.push_back(semi_step(st, lb, ub, epoch, cfg));
    }
    if (!cfg.checkpoint_dir.empty() && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "student_e%03d.ckpt", epoch + 1);
      write_checkpoint((std::filesystem::path(cfg.checkpoint_dir) / name).string(), st.student);
      std::snprintf(name, sizeof(name), "teacher_e%03d.ckpt", epoch + 1);
      write_checkpoint((std::filesystem::path(cfg.checkpoint_dir) / name).string(), st.teacher);
    }
    log::debug("semi epoch " + std::to_string(epoch) + " done, step " + std::to_string(st.step));
  }
  res.student = std::move(st.student);
  res.teacher = std::move(st.teacher);
  return res;
}

}  // namespace dpke
