#pragma once

// Flat `key = value` run configuration. Every TrainerConfig field has a key;
// path keys locate the dataset, split, evaluation scenes, checkpoint and
// output directory. Unknown keys and malformed values are rejected with the
// offending line number.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpke/trainer.hpp"

namespace dpke {

struct RunConfig {
  TrainerConfig trainer;
  std::uint64_t eval_seed = 0;
  std::string dataset;       // training scenes (JSONL)
  std::string split;         // split JSON
  std::string eval_dataset;  // held-out scenes (JSONL)
  std::string checkpoint;    // pretrained or evaluated checkpoint
  std::string out_dir;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("not a number: '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("not a number: '" + v + "'");
  return out;
}

template <class Int>
Int parse_int(const std::string& v) {
  Int out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) throw ConfigError("not an integer: '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("not a boolean: '" + v + "'");
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct ConfigKey {
  const char* name;
  bool affects_training;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
ConfigKey int_key(const char* name, T TrainerConfig::*field) {
  return {name, true, [field](const RunConfig& c) { return std::to_string(c.trainer.*field); },
          [field](RunConfig& c, const std::string& v) { c.trainer.*field = parse_int<T>(v); }};
}

inline ConfigKey real_key(const char* name, double TrainerConfig::*field) {
  return {name, true, [field](const RunConfig& c) { return fmt_double(c.trainer.*field); },
          [field](RunConfig& c, const std::string& v) { c.trainer.*field = parse_double(v); }};
}

template <class T>
ConfigKey arch_int(const char* name, T ArchConfig::*field) {
  return {name, true, [field](const RunConfig& c) { return std::to_string(c.trainer.arch.*field); },
          [field](RunConfig& c, const std::string& v) { c.trainer.arch.*field = parse_int<T>(v); }};
}

inline ConfigKey arch_real(const char* name, double ArchConfig::*field) {
  return {name, true, [field](const RunConfig& c) { return fmt_double(c.trainer.arch.*field); },
          [field](RunConfig& c, const std::string& v) { c.trainer.arch.*field = parse_double(v); }};
}

template <class Owner>
ConfigKey nested_real(const char* name, Owner TrainerConfig::*owner, double Owner::*field) {
  return {name, true, [=](const RunConfig& c) { return fmt_double(c.trainer.*owner.*field); },
          [=](RunConfig& c, const std::string& v) { c.trainer.*owner.*field = parse_double(v); }};
}

inline ConfigKey path_key(const char* name, std::string RunConfig::*field) {
  return {name, false, [field](const RunConfig& c) { return c.*field; },
          [field](RunConfig& c, const std::string& v) { c.*field = v; }};
}

template <class E>
ConfigKey enum_key(const char* name, E TrainerConfig::*field,
                   std::vector<std::pair<const char*, E>> names) {
  return {name, true,
          [=](const RunConfig& c) {
            for (const auto& [n, e] : names)
              if (c.trainer.*field == e) return std::string(n);
            return std::string("?");
          },
          [=](RunConfig& c, const std::string& v) {
            for (const auto& [n, e] : names)
              if (v == n) {
                c.trainer.*field = e;
                return;
              }
            std::string allowed;
            for (const auto& [n, e] : names) allowed += std::string(allowed.empty() ? "" : "|") + n;
            throw ConfigError("invalid value '" + v + "' (expected " + allowed + ")");
          }};
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    using T = TrainerConfig;
    std::vector<ConfigKey> k;
    k.push_back(arch_int("num_points", &ArchConfig::num_points));
    k.push_back(arch_int("num_seeds", &ArchConfig::num_seeds));
    k.push_back(arch_int("num_proposals", &ArchConfig::num_proposals));
    k.push_back(arch_int("num_classes", &ArchConfig::num_classes));
    k.push_back(arch_int("knn", &ArchConfig::knn));
    k.push_back(arch_int("seed_width", &ArchConfig::seed_width));
    k.push_back(arch_int("proposal_width", &ArchConfig::proposal_width));
    k.push_back(arch_real("cluster_radius", &ArchConfig::cluster_radius));
    k.push_back(arch_real("neighbor_scale", &ArchConfig::neighbor_scale));
    k.push_back(int_key("epochs_pretrain", &T::epochs_pretrain));
    k.push_back(int_key("epochs_semi", &T::epochs_semi));
    k.push_back(int_key("n_aug", &T::aug_epochs));
    k.push_back(int_key("batch_labeled", &T::batch_labeled));
    k.push_back(int_key("batch_unlabeled", &T::batch_unlabeled));
    k.push_back(real_key("lr", &T::lr));
    k.push_back({"lr_decay_epochs", true,
                 [](const RunConfig& c) {
                   std::string s;
                   for (int e : c.trainer.lr_decay_epochs) s += (s.empty() ? "" : ",") + std::to_string(e);
                   return s;
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.trainer.lr_decay_epochs.clear();
                   std::stringstream ss(v);
                   std::string tok;
                   while (std::getline(ss, tok, ','))
                     if (!trim(tok).empty()) c.trainer.lr_decay_epochs.push_back(parse_int<int>(trim(tok)));
                 }});
    k.push_back(real_key("lr_decay_factor", &T::lr_decay_factor));
    k.push_back(real_key("ema_alpha", &T::ema_alpha));
    k.push_back(real_key("tau_obj", &T::tau_obj));
    k.push_back(nested_real("tau_obj_strict", &T::strict, &PseudoThresholds::objectness));
    k.push_back(nested_real("tau_cls", &T::strict, &PseudoThresholds::class_confidence));
    k.push_back(nested_real("tau_iou", &T::strict, &PseudoThresholds::iou));
    k.push_back(real_key("delta", &T::delta));
    k.push_back({"m0", true, [](const RunConfig& c) { return std::to_string(c.trainer.m0); },
                 [](RunConfig& c, const std::string& v) { c.trainer.m0 = parse_int<std::size_t>(v); }});
    k.push_back(real_key("w_threshold", &T::w_threshold));
    k.push_back(enum_key<ChamferReduction>("chamfer_reduction", &T::reduction,
                                           {{"mean", ChamferReduction::kMean}, {"sum", ChamferReduction::kSum}}));
    k.push_back(real_key("lambda_u", &T::lambda_u));
    k.push_back(real_key("lambda_f", &T::lambda_f));
    k.push_back(nested_real("w_obj", &T::weights, &LossWeights::objectness));
    k.push_back(nested_real("w_cls", &T::weights, &LossWeights::cls));
    k.push_back(nested_real("w_center", &T::weights, &LossWeights::center));
    k.push_back(nested_real("w_size", &T::weights, &LossWeights::size));
    k.push_back(nested_real("w_vote", &T::weights, &LossWeights::vote));
    k.push_back(nested_real("w_iou", &T::weights, &LossWeights::iou));
    k.push_back(nested_real("assign_positive", &T::assign, &AssignConfig::positive_radius));
    k.push_back(nested_real("assign_negative", &T::assign, &AssignConfig::negative_radius));
    k.push_back(nested_real("vote_radius", &T::assign, &AssignConfig::vote_radius));
    k.push_back(enum_key<SamplingMode>("sampling_mode", &T::sampling,
                                       {{"hls", SamplingMode::kHighLogit}, {"lls", SamplingMode::kLowLogit},
                                        {"uniform", SamplingMode::kUniform}, {"off", SamplingMode::kOff}}));
    k.push_back(enum_key<WeightMode>("geometry_mode", &T::geometry,
                                     {{"lcd", WeightMode::kLowChamfer}, {"hcd", WeightMode::kHighChamfer},
                                      {"constant", WeightMode::kConstant}, {"off", WeightMode::kOff}}));
    k.push_back(enum_key<GateSource>("gate_source", &T::gate_source,
                                     {{"teacher", GateSource::kTeacher}, {"student", GateSource::kStudent}}));
    k.push_back(int_key("max_inserts", &T::max_inserts));
    k.push_back(int_key("insert_attempts", &T::insert_attempts));
    k.push_back(real_key("collision_objectness", &T::collision_objectness));
    k.push_back(real_key("nms_iou", &T::nms_iou));
    k.push_back(real_key("room_extent", &T::room_extent));
    k.push_back(real_key("stats_momentum", &T::stats_momentum));
    k.push_back(nested_real("flip_probability", &T::strong, &StrongAugConfig::flip_probability));
    k.push_back(nested_real("scale_min", &T::strong, &StrongAugConfig::scale_min));
    k.push_back(nested_real("scale_max", &T::strong, &StrongAugConfig::scale_max));
    k.push_back(int_key("seed", &T::seed));
    k.push_back(int_key("checkpoint_every", &T::checkpoint_every));
    k.push_back({"verify_alignment", false,
                 [](const RunConfig& c) { return std::string(c.trainer.verify_alignment ? "true" : "false"); },
                 [](RunConfig& c, const std::string& v) { c.trainer.verify_alignment = parse_bool(v); }});
    k.push_back({"eval_seed", true, [](const RunConfig& c) { return std::to_string(c.eval_seed); },
                 [](RunConfig& c, const std::string& v) { c.eval_seed = parse_int<std::uint64_t>(v); }});
    k.push_back(path_key("dataset", &RunConfig::dataset));
    k.push_back(path_key("split", &RunConfig::split));
    k.push_back(path_key("eval_dataset", &RunConfig::eval_dataset));
    k.push_back(path_key("checkpoint", &RunConfig::checkpoint));
    k.push_back(path_key("out_dir", &RunConfig::out_dir));
    return k;
  }();
  return keys;
}

}  // namespace detail

/// Sets one key; throws ConfigError for unknown keys or bad values.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys()) {
    if (key == k.name) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  for (const auto& k : detail::config_keys())
    if (key == k.name) return k.get(cfg);
  throw ConfigError("unknown key '" + key + "'");
}

/// Applies `key = value` lines on top of `cfg`. '#' starts a comment.
inline void parse_run_config(std::istream& is, RunConfig& cfg) {
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(n) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(n) + ": " + e.what());
    }
  }
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  RunConfig cfg;
  parse_run_config(is, cfg);
  // Relative paths inside the file are resolved against its directory.
  const auto base = std::filesystem::path(path).parent_path();
  for (std::string* p : {&cfg.dataset, &cfg.split, &cfg.eval_dataset, &cfg.checkpoint, &cfg.out_dir})
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  return cfg;
}

/// Canonical dump: every key in a fixed order.
inline std::string dump_run_config(const RunConfig& cfg, bool training_only = false) {
  std::string out;
  for (const auto& k : detail::config_keys()) {
    if (training_only && !k.affects_training) continue;
    out += std::string(k.name) + " = " + k.get(cfg) + "\n";
  }
  return out;
}

/// FNV-1a over the canonical dump of the training-relevant keys.
inline std::uint64_t config_hash(const RunConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : dump_run_config(cfg, true)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dpke
