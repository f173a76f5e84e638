#pragma once

// The work behind each `dpke` subcommand. Argument parsing lives in the tool;
// these functions take resolved options, write their outputs under `out`, and
// throw CommandError for usage problems (exit code 2) and other exceptions
// for runtime failures (exit code 1).

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpke/ablation.hpp"
#include "dpke/checkpoint.hpp"
#include "dpke/config.hpp"
#include "dpke/dataset_io.hpp"
#include "dpke/eval.hpp"
#include "dpke/log.hpp"
#include "dpke/plot.hpp"
#include "dpke/synthdata.hpp"
#include "dpke/trainer.hpp"

namespace dpke::cmd {

class CommandError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline const std::vector<double>& split_ratios() {
  static const std::vector<double> r{0.05, 0.1, 0.2, 1.0};
  return r;
}
inline constexpr int kSplitSeeds = 3;

inline std::string split_file_name(double ratio, int k) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "split_r%.2f_s%d.json", ratio, k);
  return buf;
}

namespace detail {

namespace fs = std::filesystem;

/// Creates `dir` and refuses to overwrite any of `outputs` without force.
inline void prepare_outputs(const std::string& dir, const std::vector<std::string>& outputs, bool force) {
  if (dir.empty()) throw CommandError("--out is required");
  for (const auto& name : outputs) {
    const fs::path p = fs::path(dir) / name;
    if (fs::exists(p) && !force)
      throw CommandError("refusing to overwrite " + p.string() + " (pass --force)");
  }
  fs::create_directories(dir);
}

inline std::string path_in(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

inline void require(const std::string& value, const char* key) {
  if (value.empty()) throw CommandError(std::string("config key '") + key + "' is required for this command");
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << text;
}

inline void write_config_record(const std::string& dir, const RunConfig& cfg) {
  write_text(path_in(dir, "config.txt"),
             dump_run_config(cfg, true) + "# config_hash = " + hash_hex(config_hash(cfg)) + "\n");
}

}  // namespace detail

// ---------------------------------------------------------------------------

struct GenDataOptions {
  std::size_t scenes = 200;
  std::size_t eval_scenes = 100;
  std::uint64_t seed = 0;
  std::string out;
  bool force = false;
};

struct Corpus {
  std::vector<Scene> scenes;
  std::vector<Scene> held_out;
  std::vector<std::pair<std::string, DatasetSplit>> splits;  // file name, split
};

/// Training scenes, held-out scenes from an independent stream (ids
/// prefixed "eval_") and every ratio x split-seed split, all from `seed`.
inline Corpus make_corpus(std::size_t n_scenes, std::size_t n_eval, std::uint64_t seed) {
  const GeneratorConfig gc = default_generator_config();
  Corpus c;
  c.scenes = generate_dataset(gc, n_scenes, seed);
  c.held_out = generate_dataset(gc, n_eval, mix_seed(seed, {0xE7A1}));
  for (auto& s : c.held_out) s.id = "eval_" + s.id;
  for (double r : split_ratios())
    for (int k = 0; k < kSplitSeeds; ++k)
      c.splits.emplace_back(split_file_name(r, k),
                            split_dataset(c.scenes, r, mix_seed(seed, {0x5917, static_cast<std::uint64_t>(k)}),
                                          gc.num_classes()));
  return c;
}

/// dataset.jsonl (exactly `scenes` lines), eval.jsonl and 12 split files
/// under splits/.
inline void gen_data(const GenDataOptions& o) {
  if (o.scenes == 0) throw CommandError("--scenes must be at least 1");
  if (o.eval_scenes == 0) throw CommandError("--eval-scenes must be at least 1");
  std::vector<std::string> outputs{"dataset.jsonl", "eval.jsonl"};
  for (double r : split_ratios())
    for (int k = 0; k < kSplitSeeds; ++k) outputs.push_back("splits/" + split_file_name(r, k));
  detail::prepare_outputs(o.out, outputs, o.force);
  std::filesystem::create_directories(std::filesystem::path(o.out) / "splits");

  const Corpus c = make_corpus(o.scenes, o.eval_scenes, o.seed);
  write_dataset(detail::path_in(o.out, "dataset.jsonl"), c.scenes);
  write_dataset(detail::path_in(o.out, "eval.jsonl"), c.held_out);
  for (const auto& [name, split] : c.splits) write_split(detail::path_in(o.out, "splits/" + name), split);
  log::info("wrote " + std::to_string(o.scenes) + " scenes, " + std::to_string(o.eval_scenes) +
            " held-out scenes and " + std::to_string(c.splits.size()) + " splits to " + o.out);
}

// ---------------------------------------------------------------------------

struct Loaded {
  std::vector<Scene> scenes;
  DatasetSplit split;
  SplitView view;
};

inline Loaded load_training_data(const RunConfig& cfg) {
  detail::require(cfg.dataset, "dataset");
  detail::require(cfg.split, "split");
  Loaded l;
  l.scenes = read_dataset(cfg.dataset);
  l.split = read_split(cfg.split);
  l.view = resolve_split(l.scenes, l.split);
  return l;
}

/// pretrained.ckpt and pretrain_log.csv.
inline void pretrain(const RunConfig& cfg, const std::string& out, bool force) {
  validate_trainer_config(cfg.trainer);
  const Loaded data = load_training_data(cfg);
  detail::prepare_outputs(out, {"pretrained.ckpt", "pretrain_log.csv"}, force);
  TrainLog log;
  const ModelParams params = dpke::pretrain(cfg.trainer, data.view.labeled, &log);
  write_checkpoint(detail::path_in(out, "pretrained.ckpt"), params);
  write_train_log(detail::path_in(out, "pretrain_log.csv"), log);
  detail::write_config_record(out, cfg);
}

/// Semi-supervised stage from `checkpoint` (pretrains first when unset).
/// Writes student/teacher checkpoints, train_log.csv, periodic checkpoints
/// under checkpoints/, and eval.csv when eval_dataset is set.
inline void train(const RunConfig& cfg, const std::string& out, bool force) {
  validate_trainer_config(cfg.trainer);
  const Loaded data = load_training_data(cfg);
  detail::prepare_outputs(out, {"student.ckpt", "teacher.ckpt", "train_log.csv", "eval.csv"}, force);
  ModelParams start;
  if (cfg.checkpoint.empty()) {
    log::info("no checkpoint configured; pretraining first");
    start = dpke::pretrain(cfg.trainer, data.view.labeled);
    write_checkpoint(detail::path_in(out, "pretrained.ckpt"), start);
  } else {
    start = read_checkpoint(cfg.checkpoint, cfg.trainer.arch);
  }
  TrainerConfig tc = cfg.trainer;
  tc.checkpoint_dir = detail::path_in(out, "checkpoints");
  std::filesystem::create_directories(tc.checkpoint_dir);
  const TrainResult res = train_semi(tc, data.view.labeled, data.view.unlabeled, start);
  write_checkpoint(detail::path_in(out, "student.ckpt"), res.student);
  write_checkpoint(detail::path_in(out, "teacher.ckpt"), res.teacher);
  write_train_log(detail::path_in(out, "train_log.csv"), res.log);
  detail::write_config_record(out, cfg);
  if (!cfg.eval_dataset.empty()) {
    const EvalResult ev = evaluate(res.teacher, read_dataset(cfg.eval_dataset), {tc.nms_iou, cfg.eval_seed});
    write_eval_csv(detail::path_in(out, "eval.csv"), ev);
    char buf[96];
    std::snprintf(buf, sizeof(buf), "teacher mAP@0.25 %.4f mAP@0.5 %.4f", ev.map25, ev.map50);
    log::info(buf);
  }
}

/// eval.csv for `checkpoint` on `eval_dataset`.
inline EvalResult eval(const RunConfig& cfg, const std::string& out, bool force) {
  detail::require(cfg.checkpoint, "checkpoint");
  detail::require(cfg.eval_dataset, "eval_dataset");
  detail::prepare_outputs(out, {"eval.csv"}, force);
  const ModelParams params = read_checkpoint(cfg.checkpoint, cfg.trainer.arch);
  const EvalResult ev = evaluate(params, read_dataset(cfg.eval_dataset), {cfg.trainer.nms_iou, cfg.eval_seed});
  write_eval_csv(detail::path_in(out, "eval.csv"), ev);
  return ev;
}

struct AblateOptions {
  std::vector<std::string> splits;  // split files, one per seed
  std::vector<std::string> cells;   // empty: the full default grid
  int jobs = 1;
};

/// ablation.csv (one row per cell), ablation.svg, tau_sweep.svg and per-cell
/// artifacts under cells/.
inline std::vector<CellResult> ablate(const RunConfig& cfg, const AblateOptions& o, const std::string& out,
                                      bool force) {
  validate_trainer_config(cfg.trainer);
  detail::require(cfg.dataset, "dataset");
  detail::require(cfg.eval_dataset, "eval_dataset");
  if (o.splits.empty()) throw CommandError("ablate needs at least one split (--splits)");
  detail::prepare_outputs(out, {"ablation.csv", "ablation.svg", "tau_sweep.svg"}, force);
  const std::vector<Scene> scenes = read_dataset(cfg.dataset);
  const std::vector<Scene> held_out = read_dataset(cfg.eval_dataset);
  AblationInputs in;
  in.scenes = &scenes;
  in.eval_scenes = &held_out;
  in.eval_seed = cfg.eval_seed;
  for (const auto& p : o.splits) in.splits.push_back(read_split(p));
  const auto cells = o.cells.empty() ? default_grid() : select_cells(o.cells);
  const auto results = run_ablation(cfg.trainer, cells, in, o.jobs, detail::path_in(out, "cells"));
  write_ablation_csv(detail::path_in(out, "ablation.csv"), results);
  plot::write_svg(detail::path_in(out, "ablation.svg"), ablation_bar_svg(results));
  plot::write_svg(detail::path_in(out, "tau_sweep.svg"), tau_sweep_svg(results));
  return results;
}

inline const char* kStatsHeader = "tau_obj,detections,strong,weak,below,invalid";

/// Supervision breakdown of `checkpoint` (the teacher) on the unlabeled
/// scenes of `split`, for tau_obj in {0.5, 0.6, 0.7} and the configured one.
inline void stats(const RunConfig& cfg, const std::string& out, bool force) {
  detail::require(cfg.checkpoint, "checkpoint");
  const Loaded data = load_training_data(cfg);
  detail::prepare_outputs(out, {"stats.csv", "stats.svg"}, force);
  const ModelParams teacher = read_checkpoint(cfg.checkpoint, cfg.trainer.arch);
  std::vector<double> taus{0.5, 0.6, 0.7};
  if (std::find(taus.begin(), taus.end(), cfg.trainer.tau_obj) == taus.end()) taus.push_back(cfg.trainer.tau_obj);
  std::sort(taus.begin(), taus.end());

  std::vector<std::vector<Proposal>> dets;
  const auto& scenes = data.view.unlabeled.empty() ? data.view.labeled : data.view.unlabeled;
  for (std::size_t i = 0; i < scenes.size(); ++i)
    dets.push_back(detect(teacher, *scenes[i], mix_seed(cfg.eval_seed, {i}), cfg.trainer.nms_iou));

  std::ostringstream csv;
  csv << kStatsHeader << '\n';
  std::vector<plot::Bar> bars;
  for (double tau : taus) {
    double strong = 0, weak = 0, below = 0, invalid = 0;
    std::size_t total = 0;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const SupervisionStats s = supervision_stats(dets[i], scenes[i]->annotations, tau, cfg.trainer.strict);
      const double n = static_cast<double>(s.detections);
      total += s.detections;
      strong += s.strong * n;
      weak += s.weak * n;
      below += s.below * n;
      invalid += s.invalid * n;
    }
    const double n = total ? static_cast<double>(total) : 1.0;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%.2f,%zu,%.6f,%.6f,%.6f,%.6f\n", tau, total, strong / n, weak / n,
                  below / n, invalid / n);
    csv << buf;
    if (tau == cfg.trainer.tau_obj) {
      bars = {{"strong", strong / n, 0.0}, {"weak", weak / n, 0.0}, {"below", below / n, 0.0},
              {"invalid", invalid / n, 0.0}};
    }
  }
  detail::write_text(detail::path_in(out, "stats.csv"), csv.str());
  char title[96];
  std::snprintf(title, sizeof(title), "Teacher supervision breakdown (tau_obj %.2f)", cfg.trainer.tau_obj);
  plot::write_svg(detail::path_in(out, "stats.svg"), plot::bar_chart({title, "category", "fraction"}, bars));
}

}  // namespace dpke::cmd
