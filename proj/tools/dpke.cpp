// dpke: data generation, training, evaluation, ablations and statistics.
//
//   dpke gen-data --scenes 200 --seed 1 --out data
//   dpke pretrain --config run.cfg --out runs/pre
//   dpke train    --config run.cfg --out runs/semi
//   dpke eval     --config run.cfg --out runs/eval
//   dpke ablate   --config run.cfg --splits a.json,b.json,c.json --out runs/ablate
//   dpke stats    --config run.cfg --out runs/stats
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <cstdio>
#include <exception>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dpke/commands.hpp"
#include "dpke/config.hpp"

namespace {

struct Globals {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  bool force = false;
  std::vector<std::string> overrides;
};

void add_globals(CLI::App* cmd, Globals& g, bool with_config) {
  if (with_config) {
    cmd->add_option("--config", g.config, "Run configuration file (key = value lines)");
    cmd->add_option("--set", g.overrides, "Override a configuration key, KEY=VALUE (repeatable)");
  }
  cmd->add_option("--out", g.out, "Output directory")->required();
  cmd->add_option("--seed", g.seed, "Seed (data seed for gen-data, trainer seed otherwise)");
  cmd->add_option("--jobs", g.jobs, "Worker threads")->check(CLI::PositiveNumber);
  cmd->add_flag("--force", g.force, "Overwrite existing outputs");
}

dpke::RunConfig load_config(const Globals& g) {
  dpke::RunConfig cfg = g.config.empty() ? dpke::RunConfig{} : dpke::load_run_config(g.config);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw dpke::ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    dpke::set_config_value(cfg, dpke::detail::trim(kv.substr(0, eq)), dpke::detail::trim(kv.substr(eq + 1)));
  }
  if (g.seed) cfg.trainer.seed = *g.seed;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised 3D detection lab: synthetic scenes, vote detector, "
               "class-probabilistic pasting and geometry-weighted feature matching"};
  app.require_subcommand(1);
  Globals g;

  dpke::cmd::GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate dataset, held-out scenes and split files");
  add_globals(gen_cmd, g, false);
  gen_cmd->add_option("--scenes", gen.scenes, "Number of training scenes (>= 1)")->capture_default_str();
  gen_cmd->add_option("--eval-scenes", gen.eval_scenes, "Number of held-out scenes (>= 1)")->capture_default_str();

  auto* pre_cmd = app.add_subcommand("pretrain", "Supervised pretraining on the labeled part of a split");
  add_globals(pre_cmd, g, true);

  auto* train_cmd = app.add_subcommand("train", "Semi-supervised training from a pretrained checkpoint");
  add_globals(train_cmd, g, true);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on held-out scenes");
  add_globals(eval_cmd, g, true);

  dpke::cmd::AblateOptions abl;
  auto* abl_cmd = app.add_subcommand("ablate", "Run the ablation grid over several splits");
  add_globals(abl_cmd, g, true);
  abl_cmd->add_option("--splits", abl.splits, "Split files, one per seed")->delimiter(',');
  abl_cmd->add_option("--cells", abl.cells, "Cell ids to run (default: full grid)")->delimiter(',');

  auto* stats_cmd = app.add_subcommand("stats", "Teacher supervision breakdown on unlabeled scenes");
  add_globals(stats_cmd, g, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen_cmd) {
      gen.out = g.out;
      gen.force = g.force;
      if (g.seed) gen.seed = *g.seed;
      dpke::cmd::gen_data(gen);
    } else if (*pre_cmd) {
      dpke::cmd::pretrain(load_config(g), g.out, g.force);
    } else if (*train_cmd) {
      dpke::cmd::train(load_config(g), g.out, g.force);
    } else if (*eval_cmd) {
      dpke::RunConfig cfg = load_config(g);
      if (g.seed) cfg.eval_seed = *g.seed;
      const auto ev = dpke::cmd::eval(cfg, g.out, g.force);
      std::printf("mAP@0.25 %.4f  mAP@0.5 %.4f\n", ev.map25, ev.map50);
    } else if (*abl_cmd) {
      abl.jobs = g.jobs;
      const auto rows = dpke::cmd::ablate(load_config(g), abl, g.out, g.force);
      for (const auto& r : rows)
        std::printf("%-6s mAP@0.25 %6.2f +- %5.2f\n", r.id.c_str(), 100.0 * dpke::CellResult::mean(r.map25),
                    100.0 * dpke::CellResult::stddev(r.map25));
    } else if (*stats_cmd) {
      dpke::cmd::stats(load_config(g), g.out, g.force);
    }
  } catch (const dpke::cmd::CommandError& e) {
    std::fprintf(stderr, "dpke: %s\n", e.what());
    return 2;
  } catch (const dpke::ConfigError& e) {
    std::fprintf(stderr, "dpke: config: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "dpke: %s\n", e.what());
    return 1;
  }
  return 0;
}
