#pragma once

// Ablation grid: one shared pretrained model per split, then every cell
// trains the semi-supervised stage from it and is evaluated (EMA teacher) on
// held-out scenes. Cells run on up to `jobs` threads; each cell is
// deterministic on its own, so results do not depend on scheduling.

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dpke/checkpoint.hpp"
#include "dpke/config.hpp"
#include "dpke/eval.hpp"
#include "dpke/plot.hpp"
#include "dpke/trainer.hpp"

namespace dpke {

struct SplitView {
  std::vector<const Scene*> labeled;
  std::vector<const Scene*> unlabeled;
};

/// Looks up split ids in `scenes`; unknown ids are an error.
inline SplitView resolve_split(const std::vector<Scene>& scenes, const DatasetSplit& split) {
  std::map<std::string, const Scene*> by_id;
  for (const auto& s : scenes) by_id[s.id] = &s;
  SplitView v;
  auto pick = [&](const std::vector<std::string>& ids, std::vector<const Scene*>& out) {
    for (const auto& id : ids) {
      const auto it = by_id.find(id);
      if (it == by_id.end()) throw std::invalid_argument("split references unknown scene '" + id + "'");
      out.push_back(it->second);
    }
  };
  pick(split.labeled_ids, v.labeled);
  pick(split.unlabeled_ids, v.unlabeled);
  return v;
}

struct AblationCell {
  std::string id;
  std::string description;
  std::function<void(TrainerConfig&)> apply;
};

inline AblationCell make_cell(std::string id, std::string description, SamplingMode sampling,
                              WeightMode geometry, double tau_obj = -1.0) {
  return {std::move(id), std::move(description), [=](TrainerConfig& c) {
            c.sampling = sampling;
            c.geometry = geometry;
            if (geometry == WeightMode::kOff) c.lambda_f = 0.0;
            if (tau_obj >= 0.0) c.tau_obj = tau_obj;
          }};
}

/// Module rows, weighting rows, sampling/weighting variants, and the
/// objectness-threshold sweep around the full method.
inline std::vector<AblationCell> default_grid() {
  using S = SamplingMode;
  using W = WeightMode;
  return {
      make_cell("a", "baseline", S::kOff, W::kOff),
      make_cell("b", "uniform sampling", S::kUniform, W::kOff),
      make_cell("c", "class-probabilistic sampling", S::kHighLogit, W::kOff),
      make_cell("d", "uniform sampling + geometry-weighted matching", S::kUniform, W::kLowChamfer),
      make_cell("e", "class-probabilistic sampling + geometry-weighted matching", S::kHighLogit, W::kLowChamfer),
      make_cell("g", "feature matching, constant weights", S::kOff, W::kConstant),
      make_cell("h", "feature matching, geometry weights", S::kOff, W::kLowChamfer),
      make_cell("i", "class-probabilistic sampling + constant-weight matching", S::kHighLogit, W::kConstant),
      make_cell("lls", "low-logit sampling + geometry-weighted matching", S::kLowLogit, W::kLowChamfer),
      make_cell("hcd", "class-probabilistic sampling + high-distance weighting", S::kHighLogit, W::kHighChamfer),
      make_cell("tau05", "full method, tau_obj 0.5", S::kHighLogit, W::kLowChamfer, 0.5),
      make_cell("tau07", "full method, tau_obj 0.7", S::kHighLogit, W::kLowChamfer, 0.7),
  };
}

/// Cells by id, in the order given.
inline std::vector<AblationCell> select_cells(const std::vector<std::string>& ids) {
  const auto all = default_grid();
  std::vector<AblationCell> out;
  for (const auto& id : ids) {
    bool found = false;
    for (const auto& c : all)
      if (c.id == id) {
        out.push_back(c);
        found = true;
      }
    if (!found) throw std::invalid_argument("unknown ablation cell '" + id + "'");
  }
  return out;
}

struct CellResult {
  std::string id;
  std::string description;
  TrainerConfig config;
  std::vector<double> map25;  // per split
  std::vector<double> map50;
  std::size_t collision_violations = 0;
  std::size_t misaligned = 0;
  std::size_t replay_mismatches = 0;  // counted only with verify_alignment
  std::size_t inserted = 0;

  static double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  }
  /// Sample standard deviation (n - 1).
  static double stddev(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
  }
};

struct AblationInputs {
  const std::vector<Scene>* scenes = nullptr;
  std::vector<DatasetSplit> splits;
  const std::vector<Scene>* eval_scenes = nullptr;
  std::uint64_t eval_seed = 0;
};

namespace detail {

inline void run_parallel(std::size_t n, int jobs, const std::function<void(std::size_t)>& task) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex m;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      {
        std::lock_guard<std::mutex> lock(m);
        if (failure) return;
      }
      try {
        task(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(m);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace detail

/// Trainer seed used for split `i`; a single-split `train` run with this
/// seed reproduces the corresponding ablation cell.
inline std::uint64_t split_trainer_seed(std::uint64_t base, std::size_t i) { return base + i; }

/// Runs every cell on every split. When `out_dir` is non-empty, per-cell
/// teacher checkpoints, train logs and eval CSVs are written below it.
inline std::vector<CellResult> run_ablation(const TrainerConfig& base, const std::vector<AblationCell>& cells,
                                            const AblationInputs& in, int jobs,
                                            const std::string& out_dir = {}) {
  if (!in.scenes || !in.eval_scenes) throw std::invalid_argument("run_ablation: missing scenes");
  if (in.splits.empty()) throw std::invalid_argument("run_ablation: no splits");
  const std::size_t n_splits = in.splits.size();
  std::vector<SplitView> views;
  for (const auto& s : in.splits) views.push_back(resolve_split(*in.scenes, s));

  std::vector<ModelParams> pretrained(n_splits);
  detail::run_parallel(n_splits, jobs, [&](std::size_t i) {
    TrainerConfig c = base;
    c.seed = split_trainer_seed(base.seed, i);
    pretrained[i] = pretrain(c, views[i].labeled);
    log::info("pretrained split " + std::to_string(i));
  });

  std::vector<CellResult> results(cells.size());
  for (std::size_t k = 0; k < cells.size(); ++k) {
    results[k].id = cells[k].id;
    results[k].description = cells[k].description;
    results[k].config = base;
    cells[k].apply(results[k].config);
    results[k].map25.assign(n_splits, 0.0);
    results[k].map50.assign(n_splits, 0.0);
  }
  std::vector<std::vector<StepRecord>> totals(cells.size() * n_splits);
  detail::run_parallel(cells.size() * n_splits, jobs, [&](std::size_t t) {
    const std::size_t k = t / n_splits, i = t % n_splits;
    TrainerConfig c = results[k].config;
    c.seed = split_trainer_seed(base.seed, i);
    c.checkpoint_dir.clear();
    const TrainResult tr = train_semi(c, views[i].labeled, views[i].unlabeled, pretrained[i]);
    const EvalResult ev = evaluate(tr.teacher, *in.eval_scenes, {c.nms_iou, in.eval_seed});
    results[k].map25[i] = ev.map25;
    results[k].map50[i] = ev.map50;
    StepRecord sum;
    for (const auto& r : tr.log) {
      sum.n_collision_violations += r.n_collision_violations;
      sum.n_misaligned += r.n_misaligned;
      sum.n_replay_mismatch += r.n_replay_mismatch;
      sum.n_inserted += r.n_inserted;
    }
    totals[t].push_back(sum);
    if (!out_dir.empty()) {
      const auto dir = std::filesystem::path(out_dir) / ("cell_" + cells[k].id + "_split" + std::to_string(i));
      std::filesystem::create_directories(dir);
      write_checkpoint((dir / "teacher.ckpt").string(), tr.teacher);
      write_train_log((dir / "train_log.csv").string(), tr.log);
      write_eval_csv((dir / "eval.csv").string(), ev);
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf), "cell %s split %zu: mAP25 %.4f mAP50 %.4f", cells[k].id.c_str(), i,
                  ev.map25, ev.map50);
    log::info(buf);
  });
  for (std::size_t t = 0; t < totals.size(); ++t) {
    auto& r = results[t / n_splits];
    r.collision_violations += totals[t][0].n_collision_violations;
    r.misaligned += totals[t][0].n_misaligned;
    r.replay_mismatches += totals[t][0].n_replay_mismatch;
    r.inserted += totals[t][0].n_inserted;
  }
  return results;
}

inline const char* kAblationHeader =
    "id,description,uniform_sampling,class_prob_sampling,feature_matching,geo_weights,sampling_mode,"
    "geometry_mode,tau_obj,n_seeds,map25_mean,map25_std,map50_mean,map50_std,map25_per_seed,"
    "map50_per_seed,config_hash";

/// One row per cell; mAP values in points (x100).
inline void write_ablation_csv(std::ostream& os, const std::vector<CellResult>& results) {
  os << kAblationHeader << '\n';
  for (const auto& r : results) {
    RunConfig rc;
    rc.trainer = r.config;
    rc.trainer.seed = 0;
    const auto& c = r.config;
    const bool sampling = c.sampling != SamplingMode::kOff;
    const bool matching = c.geometry != WeightMode::kOff && c.lambda_f > 0.0;
    auto pts = [](const std::vector<double>& v) {
      std::string s;
      char buf[32];
      for (double x : v) {
        std::snprintf(buf, sizeof(buf), "%.4f", 100.0 * x);
        s += (s.empty() ? "" : ";") + std::string(buf);
      }
      return s;
    };
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%s,%s,%d,%d,%d,%d,%s,%s,%.2f,%zu,%.4f,%.4f,%.4f,%.4f,%s,%s,%s\n",
                  r.id.c_str(), r.description.c_str(), sampling ? 1 : 0,
                  (c.sampling == SamplingMode::kHighLogit || c.sampling == SamplingMode::kLowLogit) ? 1 : 0,
                  matching ? 1 : 0,
                  (c.geometry == WeightMode::kLowChamfer || c.geometry == WeightMode::kHighChamfer) ? 1 : 0,
                  get_config_value(rc, "sampling_mode").c_str(), get_config_value(rc, "geometry_mode").c_str(),
                  c.tau_obj, r.map25.size(), 100.0 * CellResult::mean(r.map25),
                  100.0 * CellResult::stddev(r.map25), 100.0 * CellResult::mean(r.map50),
                  100.0 * CellResult::stddev(r.map50), pts(r.map25).c_str(), pts(r.map50).c_str(),
                  hash_hex(config_hash(rc)).c_str());
    os << buf;
  }
}

inline void write_ablation_csv(const std::string& path, const std::vector<CellResult>& results) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_ablation_csv(os, results);
}

/// Line chart of full-method mAP@0.25 against tau_obj (cells e, tau05,
/// tau07 when present), with the baseline as a flat reference.
inline std::string tau_sweep_svg(const std::vector<CellResult>& results) {
  plot::Series sweep{"full method", {}, {}, {}};
  plot::Series baseline{"baseline (a)", {}, {}, {}};
  const CellResult* a = nullptr;
  std::vector<const CellResult*> pts;
  for (const auto& r : results) {
    if (r.id == "a") a = &r;
    if (r.id == "e" || r.id == "tau05" || r.id == "tau07") pts.push_back(&r);
  }
  std::sort(pts.begin(), pts.end(),
            [](const CellResult* x, const CellResult* y) { return x->config.tau_obj < y->config.tau_obj; });
  for (const auto* r : pts) {
    sweep.x.push_back(r->config.tau_obj);
    sweep.y.push_back(100.0 * CellResult::mean(r->map25));
    sweep.err.push_back(100.0 * CellResult::stddev(r->map25));
    if (a) {
      baseline.x.push_back(r->config.tau_obj);
      baseline.y.push_back(100.0 * CellResult::mean(a->map25));
    }
  }
  std::vector<plot::Series> series{sweep};
  if (a && !baseline.x.empty()) series.push_back(baseline);
  return plot::line_chart({"mAP@0.25 vs objectness threshold", "tau_obj", "mAP@0.25 (points)"}, series);
}

inline std::string ablation_bar_svg(const std::vector<CellResult>& results) {
  std::vector<plot::Bar> bars;
  for (const auto& r : results)
    bars.push_back({r.id, 100.0 * CellResult::mean(r.map25), 100.0 * CellResult::stddev(r.map25)});
  return plot::bar_chart({"Ablation grid, mean mAP@0.25 over splits", "cell", "mAP@0.25 (points)", 720, 400}, bars);
}

}  // namespace dpke
