// Copyright 2026 The gradleak Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Subcommand runners behind the gradleak tool.
//
// A run takes a resolved JSON config, computes every output file in memory
// and only then touches the output directory, so a bad config never leaves
// partial results behind. The config written to manifest.json is the fully
// resolved one; rerunning it reproduces the outputs byte for byte.

#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "gradleak/analytic.hpp"
#include "gradleak/attacks.hpp"
#include "gradleak/data.hpp"
#include "gradleak/defenses.hpp"
#include "gradleak/error.hpp"
#include "gradleak/eval.hpp"
#include "gradleak/json_io.hpp"
#include "gradleak/models.hpp"
#include "gradleak/priors.hpp"
#include "gradleak/rng.hpp"

#ifndef GRADLEAK_VERSION
#define GRADLEAK_VERSION "unknown"
#endif

namespace gradleak::cli {

inline constexpr int kSchemaVersion = 1;
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{
      "attack", "matrix", "synth-ablation", "mc-ablation",
      "risk",   "calibrate-beta", "train"};
  return names;
}

// GRADLEAK_DATA_DIR in the environment, else the directory baked in at build
// time.
inline std::string data_dir() {
  if (const char* env = std::getenv("GRADLEAK_DATA_DIR"); env && *env) return env;
#ifdef GRADLEAK_DEFAULT_DATA_DIR
  return GRADLEAK_DEFAULT_DATA_DIR;
#else
  return "data";
#endif
}

// GRADLEAK_OUT in the environment, else ./gradleak-out.
inline std::string default_out_dir() {
  if (const char* env = std::getenv("GRADLEAK_OUT"); env && *env) return env;
  return "gradleak-out";
}

inline Json bundled_digits(bool standardize = false) {
  const std::string dir = data_dir();
  Json j;
  j["source"] = "idx";
  j["images"] = dir + "/digits8x8-images.idx3-ubyte";
  j["labels"] = dir + "/digits8x8-labels.idx1-ubyte";
  j["standardize"] = standardize;
  return j;
}

struct OutputFile {
  std::string name;
  std::string content;
};

struct RunResult {
  Json config;  // resolved
  std::vector<OutputFile> files;
};

namespace detail {

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <class T>
T get(const Json& j, const std::string& key, const std::string& where) {
  const Json& v = require_key(j, key, where);
  try {
    return v.get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <class T>
T get_or(const Json& j, const std::string& key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  return get<T>(j, key, where);
}

// I/O and format problems in user-named inputs are configuration errors.
template <class F>
auto config_input(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

inline void check_top_level(const Json& cfg, std::set<std::string> allowed,
                            const std::string& sub) {
  allowed.insert("schema_version");
  allowed.insert("seed");
  require_known_keys(cfg, allowed, sub);
  const int version = get<int>(cfg, "schema_version", sub);
  if (version != kSchemaVersion) {
    throw ConfigError(sub + ": unsupported schema_version " + std::to_string(version));
  }
  get<std::uint64_t>(cfg, "seed", sub);
}

// ---- networks ----

// Exactly one of "network" (a spec, initialized from its seed) or
// "checkpoint" (a path). A spec without a seed takes the run seed.
inline void resolve_network(Json& cfg, const std::string& sub) {
  const bool has_net = cfg.contains("network"), has_ckpt = cfg.contains("checkpoint");
  if (has_net && has_ckpt) {
    throw ConfigError(sub + ": give either \"network\" or \"checkpoint\", not both");
  }
  if (!has_net && !has_ckpt) {
    throw ConfigError(sub + ": missing required field \"network\"");
  }
  if (has_net) {
    Json& net = cfg["network"];
    if (net.is_object() && !net.contains("seed")) net["seed"] = cfg.at("seed");
  }
}

inline models::Checkpoint load_network(const Json& cfg, const std::string& sub) {
  if (cfg.contains("checkpoint")) {
    const auto path = get<std::string>(cfg, "checkpoint", sub);
    return config_input(sub + ".checkpoint",
                        [&] { return models::load_checkpoint(path); });
  }
  const auto spec = models::network_spec_from_json(cfg.at("network"));
  return {spec, models::init_parameters(spec), 0};
}

// ---- data sources ----

inline void check_source_keys(const Json& s, const std::string& where, bool with_index,
                              const std::set<std::string>& sources) {
  if (!s.is_object()) throw ConfigError(where + ": expected a JSON object");
  const auto kind = get<std::string>(s, "source", where);
  if (!sources.count(kind)) {
    throw ConfigError(where + ": unsupported source \"" + kind + "\"");
  }
  std::set<std::string> keys{"source"};
  if (kind == "idx") keys = {"source", "images", "labels", "limit", "standardize", "classes"};
  if (kind == "synthetic") keys = {"source", "task"};
  if (kind == "csv") keys = {"source", "path", "shape", "label"};
  if (with_index && kind != "csv") keys.insert("index");
  require_known_keys(s, keys, where);
}

inline data::ImageDataset load_dataset(const Json& s, const std::string& where,
                                       bool with_index = false) {
  check_source_keys(s, where, with_index, {"idx"});
  const auto images = get<std::string>(s, "images", where);
  const auto labels = get<std::string>(s, "labels", where);
  const auto classes = get_or<std::size_t>(s, "classes", 10, where);
  data::ImageDataset ds = config_input(where, [&] {
    const std::size_t limit = s.contains("limit")
                                  ? get<std::size_t>(s, "limit", where)
                                  : data::read_idx_header(images).count;
    return data::load_idx(images, labels, limit, classes);
  });
  if (get_or<bool>(s, "standardize", false, where)) ds = data::standardized(std::move(ds));
  return ds;
}

// Spatial shape of a source's inputs when they are images.
inline std::optional<priors::ImageShape> source_image_shape(const Json& s,
                                                            const std::string& where) {
  const auto kind = get<std::string>(s, "source", where);
  if (kind == "idx") {
    const auto images = get<std::string>(s, "images", where);
    const auto h = config_input(where, [&] { return data::read_idx_header(images); });
    return priors::ImageShape{h.rows, h.cols};
  }
  if (kind == "csv") {
    const auto shape = get<std::vector<std::size_t>>(s, "shape", where);
    if (shape.size() == 2) return priors::ImageShape{shape[0], shape[1]};
  }
  return std::nullopt;
}

struct Input {
  models::LabeledExample ex;
  std::optional<priors::ImageShape> shape;
  double psnr_max_val = 1.0;
};

inline Input load_input(const Json& s, const std::string& where) {
  check_source_keys(s, where, true, {"idx", "synthetic", "csv"});
  const auto kind = get<std::string>(s, "source", where);
  Input in;
  in.shape = source_image_shape(s, where);
  if (kind == "idx") {
    const auto ds = load_dataset(s, where, true);
    const auto index = get_or<std::size_t>(s, "index", 0, where);
    if (index >= ds.size()) {
      throw ConfigError(where + ".index: " + std::to_string(index) +
                        " is out of range for " + std::to_string(ds.size()) +
                        " examples");
    }
    in.ex = ds.example(index);
    in.psnr_max_val = ds.psnr_max_val();
  } else if (kind == "synthetic") {
    const auto task = data::synthetic_task_from_json(s.value("task", Json::object()));
    in.ex = data::synthetic_example(task, get_or<std::uint64_t>(s, "index", 0, where));
  } else {
    const auto path = get<std::string>(s, "path", where);
    const auto shape = get<std::vector<std::size_t>>(s, "shape", where);
    if (shape.empty() || shape.size() > 2) {
      throw ConfigError(where + ".shape: expected [D] or [H, W]");
    }
    in.ex.x = config_input(where, [&] {
                return data::load_csv_tensor(path, Shape(shape.begin(), shape.end()));
              }).flattened();
    in.ex.y = get<std::size_t>(s, "label", where);
  }
  return in;
}

inline data::ImageDataset load_digits_like(const Json& cfg, const std::string& sub) {
  return load_dataset(require_key(cfg, "dataset", sub), sub + ".dataset");
}

// ---- attack configs ----

inline bool is_image_prior_name(const std::string& kind) {
  return kind == "tv_aniso" || kind == "pixel_range" || kind == "tv_plus_range";
}

// Fills in what an attack config leaves to its data: the prior's image shape
// and the PSNR peak value of standardized inputs.
inline void complete_attack_json(Json& attack, const std::string& where,
                                 const std::optional<priors::ImageShape>& shape,
                                 double psnr_max_val) {
  if (!attack.is_object()) throw ConfigError(where + ": expected a JSON object");
  if (attack.contains("prior") && attack["prior"].is_object()) {
    Json& prior = attack["prior"];
    if (prior.contains("kind") && prior["kind"].is_string() &&
        is_image_prior_name(prior["kind"].get<std::string>()) &&
        !prior.contains("image_shape") && shape) {
      prior["image_shape"] = {shape->height, shape->width};
    }
  }
  if (!attack.contains("psnr_max_val")) attack["psnr_max_val"] = psnr_max_val;
}

inline void check_input_size(const models::Network& net, std::size_t dim,
                             const std::string& sub) {
  if (net.spec.input_size() != dim) {
    throw ConfigError(sub + ": network input size " +
                      std::to_string(net.spec.input_size()) +
                      " does not match data dimension " + std::to_string(dim));
  }
}

inline Tensor as_image(const Tensor& x, const std::optional<priors::ImageShape>& shape) {
  if (shape && shape->height * shape->width == x.size()) {
    return x.reshaped({shape->height, shape->width});
  }
  return x;
}

// ---- subcommands ----

inline Json default_matrix_attacks() {
  Json list = Json::array();
  for (const char* name : {"bayes", "l2", "l1"}) {
    Json a;
    a["name"] = name;
    a["config"] = {{"conditional", name},
                   {"steps", 300},
                   {"prior", {{"kind", "tv_aniso"}}}};
    list.push_back(std::move(a));
  }
  return list;
}

inline Json default_matrix_defenses() {
  Json list = Json::array();
  list.push_back({{"name", "prune_gaussian"},
                  {"defense", defenses::to_json(
                                  defenses::DefenseMechanism::prune_gaussian(0.5, 0.1))}});
  list.push_back({{"name", "gaussian"},
                  {"defense", defenses::to_json(defenses::DefenseMechanism::gaussian(0.1))}});
  return list;
}

}  // namespace detail

// Defaults for every top-level key a subcommand can fill by itself. Required
// inputs (network or checkpoint, defense) have none.
inline Json default_config(const std::string& sub) {
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["seed"] = 0;
  if (sub == "attack") {
    j["input"] = bundled_digits();
    j["attack"] = Json::object();
    j["mode"] = "auto";
    j["save_image"] = true;
  } else if (sub == "matrix") {
    j["dataset"] = bundled_digits();
    j["dataset_name"] = "digits8x8";
    j["n"] = 10;
    j["grid"] = {{"preset", "table2-desk"}};
    j["attacks"] = detail::default_matrix_attacks();
    j["defenses"] = detail::default_matrix_defenses();
    j["network"] = {{"layer_sizes", std::vector<std::size_t>{64, 32, 10}}};
    j["checkpoints"] = Json::array({0});
    j["train_lr"] = 0.1;
  } else if (sub == "synth-ablation") {
    const eval::SyntheticAblationConfig c;
    j["steps"] = c.steps;
    j["trials"] = c.trials;
    j["dim"] = c.dim;
    j["classes"] = c.classes;
    j["hidden"] = c.hidden;
    j["noise_b"] = c.noise_b;
    j["lr"] = c.lr;
    j["lr_decay"] = c.lr_decay;
    j["beta"] = c.beta;
  } else if (sub == "mc-ablation") {
    const eval::McAblationConfig c;
    j["dataset"] = bundled_digits(true);
    j["k_values"] = c.k_values;
    j["trials"] = c.trials;
    j["steps"] = c.steps;
    j["sigma"] = c.sigma;
    j["delta"] = c.delta;
    j["lr"] = c.lr;
    j["lr_decay"] = c.lr_decay;
    j["beta"] = c.beta;
    j["calibrate"] = c.calibrate;
    j["probe_count"] = c.probe_count;
    j["hidden"] = c.hidden;
  } else if (sub == "risk") {
    j["attacker"] = {{"kind", "analytic"}};
    j["sampler"] = bundled_digits();
    j["deltas"] = {0.5, 1.0, 2.0, 4.0};
    j["trials"] = 100;
  } else if (sub == "calibrate-beta") {
    j["dataset"] = bundled_digits();
    j["attack"] = {{"conditional", "bayes"}, {"prior", {{"kind", "tv_aniso"}}}};
    j["probes"] = 5;
  } else if (sub == "train") {
    j["dataset"] = bundled_digits();
    j["steps"] = 100;
    j["lr"] = 0.1;
  } else {
    throw ConfigError("unknown subcommand \"" + sub + "\"");
  }
  return j;
}

inline void fill_defaults(Json& cfg, const std::string& sub) {
  const Json d = default_config(sub);
  for (auto it = d.begin(); it != d.end(); ++it) {
    if (!cfg.contains(it.key())) cfg[it.key()] = it.value();
  }
}

namespace detail {

inline RunResult run_attack(Json cfg) {
  const std::string sub = "attack";
  check_top_level(cfg,
                  {"network", "checkpoint", "defense", "input", "attack", "mode",
                   "defended_layer", "save_image"},
                  sub);
  fill_defaults(cfg, sub);
  resolve_network(cfg, sub);
  require_key(cfg, "defense", sub);
  const Input in = load_input(cfg["input"], sub + ".input");
  complete_attack_json(cfg["attack"], sub + ".attack", in.shape, in.psnr_max_val);

  const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
  const auto ckpt = load_network(cfg, sub);
  const models::Network net{ckpt.spec, ckpt.state};
  const auto defense = defenses::defense_from_json(cfg.at("defense"));
  auto attack = attacks::attack_config_from_json(cfg.at("attack"));
  if (!cfg["attack"].contains("seed")) attack.seed = derive_seed(seed, 1);
  std::string mode = get<std::string>(cfg, "mode", sub);
  if (mode != "auto" && mode != "optimize" && mode != "analytic" &&
      mode != "layer_drop" && mode != "joint") {
    throw ConfigError(sub + ".mode: unknown mode \"" + mode + "\"");
  }
  std::optional<std::size_t> defended_layer;
  if (cfg.contains("defended_layer")) {
    if (mode != "layer_drop") {
      throw ConfigError(sub + ".defended_layer: only used by mode \"layer_drop\"");
    }
    defended_layer = get<std::size_t>(cfg, "defended_layer", sub);
  }
  const bool save_image = get<bool>(cfg, "save_image", sub);
  check_input_size(net, in.ex.x.size(), sub);
  if (in.ex.y >= net.spec.num_classes()) {
    throw ConfigError(sub + ".input: label exceeds the network's class count");
  }

  const auto grad = models::loss_and_param_grad(net.spec, net.state, in.ex).grad;
  const auto released =
      defenses::sample(defense, grad, net.state.segments, derive_seed(seed, 0));
  if (mode == "auto") {
    mode = defense.kind == defenses::DefenseKind::kNone ? "analytic" : "optimize";
  }

  Json result;
  Tensor x_hat;
  if (mode == "analytic") {
    const auto inv = analytic::invert_released(released);
    x_hat = inv.x;
    result["label"] = attacks::recover_label(released, net).label;
    result["psnr"] = json_number(analytic::psnr(in.ex.x, inv.x, attack.psnr_max_val));
    Json x = Json::array();
    for (double v : inv.x.data()) x.push_back(json_number(v));
    result["x_hat"] = std::move(x);
    result["primary_row"] = inv.primary_row;
    result["rows_used"] = inv.rows_used;
    result["consistency_residual"] = json_number(inv.consistency_residual);
  } else if (mode == "optimize") {
    const auto r = attacks::run_attack(attack, released, net, in.ex.x);
    x_hat = r.x_hat;
    result = attacks::to_json(r);
  } else if (mode == "joint") {
    const auto r = attacks::run_joint_attack(attack, released, net, in.ex.x);
    x_hat = r.reconstruction.x_hat;
    result = attacks::to_json(r.reconstruction);
    result["label_probs"] = r.label_probs.values();
  } else {
    const auto r = attacks::layer_drop_attack(attack, released, net, defended_layer,
                                              in.ex.x);
    x_hat = r.best.x_hat;
    result = attacks::to_json(r.best);
    result["dropped_layer"] = r.layer;
    Json sweep = Json::array();
    for (std::size_t l = 0; l < r.per_layer.size(); ++l) {
      Json s;
      s["layer"] = l;
      s["final_objective"] = json_number(r.per_layer[l].objective_trace.back());
      s["psnr"] = json_number(*r.per_layer[l].psnr);
      sweep.push_back(std::move(s));
    }
    result["sweep"] = std::move(sweep);
  }
  Json out;
  out["mode"] = mode;
  out["true_label"] = in.ex.y;
  for (auto it = result.begin(); it != result.end(); ++it) out[it.key()] = it.value();

  RunResult rr;
  rr.files.push_back({"result.json", dump_json(out) + "\n"});
  if (save_image) {
    rr.files.push_back({"x_hat.csv", data::format_csv_tensor(as_image(x_hat, in.shape))});
  }
  rr.config = std::move(cfg);
  return rr;
}

inline RunResult run_matrix(Json cfg, std::size_t jobs) {
  const std::string sub = "matrix";
  check_top_level(cfg,
                  {"dataset", "dataset_name", "n", "grid", "attacks", "defenses",
                   "network", "checkpoints", "train_lr"},
                  sub);
  fill_defaults(cfg, sub);
  resolve_network(cfg, sub);

  const auto ds = load_digits_like(cfg, sub);
  const auto grid = eval::grid_from_json(cfg.at("grid"));
  const priors::ImageShape shape{ds.height, ds.width};
  std::vector<eval::AttackEntry> attack_list;
  if (!cfg["attacks"].is_array()) throw ConfigError("matrix.attacks: expected array");
  for (Json& a : cfg["attacks"]) {
    require_known_keys(a, {"name", "config"}, "matrix.attacks[]");
    const auto name = get<std::string>(a, "name", "matrix.attacks[]");
    if (!a.contains("config")) a["config"] = Json::object();
    complete_attack_json(a["config"], "matrix.attacks." + name, shape,
                         ds.psnr_max_val());
    attack_list.push_back({name, attacks::attack_config_from_json(a["config"])});
  }
  std::vector<eval::DefenseEntry> defense_list;
  if (!cfg["defenses"].is_array()) throw ConfigError("matrix.defenses: expected array");
  for (const Json& d : cfg["defenses"]) {
    require_known_keys(d, {"name", "defense"}, "matrix.defenses[]");
    defense_list.push_back({get<std::string>(d, "name", "matrix.defenses[]"),
                            defenses::defense_from_json(
                                require_key(d, "defense", "matrix.defenses[]"))});
  }
  const auto spec = models::network_spec_from_json(cfg.at("network"));
  if (spec.input_size() != ds.height * ds.width) {
    throw ConfigError("matrix: network input size does not match the images");
  }
  const auto steps = get<std::vector<std::size_t>>(cfg, "checkpoints", sub);
  const double train_lr = get<double>(cfg, "train_lr", sub);
  if (!(train_lr > 0.0)) throw ConfigError("matrix.train_lr must be > 0");
  eval::MatrixOptions opt;
  opt.dataset_name = get<std::string>(cfg, "dataset_name", sub);
  opt.n = get<std::size_t>(cfg, "n", sub);
  opt.seed = cfg.at("seed").get<std::uint64_t>();
  opt.jobs = jobs;
  if (opt.n < 1 || opt.n > ds.size()) {
    throw ConfigError("matrix.n must be in [1, " + std::to_string(ds.size()) + "]");
  }

  std::vector<models::LabeledExample> train_set;
  for (std::size_t i = 0; i < ds.size(); ++i) train_set.push_back(ds.example(i));
  std::vector<eval::CheckpointEntry> checkpoints;
  const auto init = models::init_parameters(spec);
  for (std::size_t s : steps) {
    checkpoints.push_back(
        {s, {spec, models::train_steps(spec, init, train_set, s, train_lr)}});
  }
  const auto table = eval::run_matrix(grid, attack_list, defense_list, checkpoints, ds, opt);

  RunResult rr;
  rr.files.push_back({"results.csv", eval::result_csv(table)});
  rr.files.push_back({"results.json", dump_json(eval::result_json(table)) + "\n"});
  rr.files.push_back({"runs.jsonl", eval::records_jsonl(table)});
  rr.config = std::move(cfg);
  return rr;
}

// Mean and standard error of the per-trial difference a - b.
inline Json paired_difference(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) d.push_back(a[i] - b[i]);
  Json j;
  j["mean"] = json_number(eval::mean_of(d));
  j["stderr"] = json_number(eval::standard_error(d));
  return j;
}

inline RunResult run_synth_ablation(Json cfg, std::size_t jobs) {
  const std::string sub = "synth-ablation";
  eval::SyntheticAblationConfig c;
  check_top_level(cfg,
                  {"steps", "trials", "dim", "classes", "hidden", "noise_b", "lr",
                   "lr_decay", "beta"},
                  sub);
  fill_defaults(cfg, sub);
  c.seed = cfg.at("seed").get<std::uint64_t>();
  c.steps = get<std::size_t>(cfg, "steps", sub);
  c.trials = get<std::size_t>(cfg, "trials", sub);
  c.dim = get<std::size_t>(cfg, "dim", sub);
  c.classes = get<std::size_t>(cfg, "classes", sub);
  c.hidden = get<std::size_t>(cfg, "hidden", sub);
  c.noise_b = get<double>(cfg, "noise_b", sub);
  c.lr = get<double>(cfg, "lr", sub);
  c.lr_decay = get<double>(cfg, "lr_decay", sub);
  c.beta = get<double>(cfg, "beta", sub);
  c.jobs = jobs;
  const auto res = eval::synthetic_ablation(c);

  RunResult rr;
  Json variants = Json::array();
  const auto& matched = res.variants.front();
  for (const auto& v : res.variants) {
    rr.files.push_back({"trace_" + v.name + ".csv",
                        eval::trace_csv(v.mean_distance, v.stderr_distance,
                                        "mean_l2_distance")});
    Json j;
    j["name"] = v.name;
    j["prior"] = priors::kind_name(v.prior);
    j["conditional"] = defenses::kind_name(v.conditional);
    j["final_mean_distance"] = json_number(v.mean_distance.back());
    j["final_stderr"] = json_number(v.stderr_distance.back());
    if (&v != &matched) {
      j["minus_matched"] = paired_difference(v.final_distance, matched.final_distance);
    }
    variants.push_back(std::move(j));
  }
  Json summary;
  summary["trials"] = c.trials;
  summary["steps"] = c.steps;
  summary["variants"] = std::move(variants);
  rr.files.push_back({"summary.json", dump_json(summary) + "\n"});
  rr.config = std::move(cfg);
  return rr;
}

inline RunResult run_mc_ablation(Json cfg, std::size_t jobs) {
  const std::string sub = "mc-ablation";
  eval::McAblationConfig c;
  check_top_level(cfg,
                  {"dataset", "k_values", "trials", "steps", "sigma", "delta", "lr",
                   "lr_decay", "beta", "calibrate", "probe_count", "hidden"},
                  sub);
  fill_defaults(cfg, sub);
  c.seed = cfg.at("seed").get<std::uint64_t>();
  c.k_values = get<std::vector<std::size_t>>(cfg, "k_values", sub);
  c.trials = get<std::size_t>(cfg, "trials", sub);
  c.steps = get<std::size_t>(cfg, "steps", sub);
  c.sigma = get<double>(cfg, "sigma", sub);
  c.delta = get<double>(cfg, "delta", sub);
  c.lr = get<double>(cfg, "lr", sub);
  c.lr_decay = get<double>(cfg, "lr_decay", sub);
  c.beta = get<double>(cfg, "beta", sub);
  c.calibrate = get<bool>(cfg, "calibrate", sub);
  c.probe_count = get<std::size_t>(cfg, "probe_count", sub);
  c.hidden = get<std::size_t>(cfg, "hidden", sub);
  c.jobs = jobs;
  c.validate();
  const auto ds = load_digits_like(cfg, sub);
  const auto res = eval::mc_ablation(c, ds);
  const auto& curves = res.curves;

  RunResult rr;
  Json list = Json::array();
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& cv = curves[i];
    rr.files.push_back({"psnr_k" + std::to_string(cv.k) + ".csv",
                        eval::trace_csv(cv.mean_psnr, cv.stderr_psnr, "mean_psnr")});
    Json j;
    j["k"] = cv.k;
    j["final_mean_psnr"] = json_number(cv.mean_psnr.back());
    j["final_stderr"] = json_number(cv.stderr_psnr.back());
    if (i > 0) {
      j["minus_previous_k"] = paired_difference(cv.final_psnr, curves[i - 1].final_psnr);
    }
    list.push_back(std::move(j));
  }
  Json summary;
  summary["trials"] = c.trials;
  summary["steps"] = c.steps;
  summary["psnr_max_val"] = ds.psnr_max_val();
  summary["beta"] = res.beta;
  if (res.calibration) {
    Json sweep = Json::array();
    for (std::size_t b = 0; b < res.calibration->betas.size(); ++b) {
      sweep.push_back({{"beta", res.calibration->betas[b]},
                       {"mean_psnr", json_number(res.calibration->mean_psnr[b])}});
    }
    summary["beta_sweep"] = std::move(sweep);
  }
  summary["curves"] = std::move(list);
  rr.files.push_back({"summary.json", dump_json(summary) + "\n"});
  rr.config = std::move(cfg);
  return rr;
}

inline RunResult run_risk(Json cfg, std::size_t jobs) {
  const std::string sub = "risk";
  check_top_level(cfg,
                  {"network", "checkpoint", "defense", "attacker", "sampler", "deltas",
                   "trials"},
                  sub);
  fill_defaults(cfg, sub);
  resolve_network(cfg, sub);
  require_key(cfg, "defense", sub);

  const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
  const auto ckpt = load_network(cfg, sub);
  const models::Network net{ckpt.spec, ckpt.state};
  const auto defense = defenses::defense_from_json(cfg.at("defense"));
  const auto deltas = get<std::vector<double>>(cfg, "deltas", sub);
  if (deltas.empty()) throw ConfigError("risk.deltas: need at least one radius");
  for (double d : deltas) {
    if (!(d >= 0.0)) throw ConfigError("risk.deltas: radii must be >= 0");
  }
  const auto trials = get<std::size_t>(cfg, "trials", sub);
  if (trials < 1) throw ConfigError("risk.trials must be >= 1");

  Json& sampler_json = cfg["sampler"];
  check_source_keys(sampler_json, "risk.sampler", false, {"idx", "synthetic"});
  std::optional<data::ImageDataset> ds;
  eval::ExampleSampler sampler;
  std::size_t dim = 0;
  std::optional<priors::ImageShape> shape;
  double max_val = 1.0;
  if (get<std::string>(sampler_json, "source", "risk.sampler") == "idx") {
    ds = load_dataset(sampler_json, "risk.sampler");
    sampler = eval::dataset_sampler(*ds);
    dim = ds->height * ds->width;
    shape = priors::ImageShape{ds->height, ds->width};
    max_val = ds->psnr_max_val();
  } else {
    const auto task =
        data::synthetic_task_from_json(sampler_json.value("task", Json::object()));
    sampler = eval::synthetic_sampler(task);
    dim = task.dim;
  }
  check_input_size(net, dim, sub);

  Json& aj = cfg["attacker"];
  const auto kind = get<std::string>(aj, "kind", "risk.attacker");
  eval::Attacker attacker;
  if (kind == "analytic") {
    require_known_keys(aj, {"kind"}, "risk.attacker");
    attacker = eval::analytic_attacker();
  } else if (kind == "constant") {
    require_known_keys(aj, {"kind", "value"}, "risk.attacker");
    if (!aj.contains("value")) aj["value"] = 0.0;
    attacker = eval::constant_attacker(
        Tensor::filled({dim}, get<double>(aj, "value", "risk.attacker")));
  } else if (kind == "optimization") {
    require_known_keys(aj, {"kind", "attack"}, "risk.attacker");
    if (!aj.contains("attack")) aj["attack"] = Json::object();
    complete_attack_json(aj["attack"], "risk.attacker.attack", shape, max_val);
    attacker = eval::optimization_attacker(attacks::attack_config_from_json(aj["attack"]));
  } else {
    throw ConfigError("risk.attacker: unknown kind \"" + kind + "\"");
  }

  const auto curve = eval::risk_curve(attacker, defense, net, sampler, deltas, trials,
                                      seed, jobs);
  Json estimates = Json::array();
  std::string csv = "delta,risk,stderr,trials,attacker_failures\n";
  for (const auto& r : curve) {
    estimates.push_back(eval::to_json(r));
    csv += format_double(r.delta) + "," + format_double(r.risk) + "," +
           format_double(r.std_error) + "," + std::to_string(r.trials) + "," +
           std::to_string(r.attacker_failures) + "\n";
  }
  RunResult rr;
  rr.files.push_back({"risk.json", dump_json(Json{{"estimates", estimates}}) + "\n"});
  rr.files.push_back({"risk.csv", csv});
  rr.config = std::move(cfg);
  return rr;
}

inline RunResult run_calibrate_beta(Json cfg, std::size_t jobs) {
  const std::string sub = "calibrate-beta";
  check_top_level(cfg, {"network", "checkpoint", "defense", "dataset", "attack", "probes"},
                  sub);
  fill_defaults(cfg, sub);
  resolve_network(cfg, sub);
  require_key(cfg, "defense", sub);

  const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
  const auto ds = load_digits_like(cfg, sub);
  complete_attack_json(cfg["attack"], sub + ".attack",
                       priors::ImageShape{ds.height, ds.width}, ds.psnr_max_val());
  const auto tmpl = attacks::attack_config_from_json(cfg.at("attack"));
  const auto ckpt = load_network(cfg, sub);
  const models::Network net{ckpt.spec, ckpt.state};
  check_input_size(net, ds.height * ds.width, sub);
  const auto defense = defenses::defense_from_json(cfg.at("defense"));
  const auto probes = get<std::size_t>(cfg, "probes", sub);
  if (probes < 1 || probes > ds.size()) {
    throw ConfigError(sub + ".probes must be in [1, " + std::to_string(ds.size()) + "]");
  }

  std::vector<eval::AttackProblem> problems;
  for (std::size_t i = 0; i < probes; ++i) {
    const std::uint64_t s = derive_seed(seed, i);
    const auto ex = ds.example(i);
    const auto grad = models::loss_and_param_grad(net.spec, net.state, ex).grad;
    problems.push_back({&net,
                        defenses::sample(defense, grad, net.state.segments,
                                         derive_seed(s, 0)),
                        ex.x, derive_seed(s, 1)});
  }
  const auto cal = eval::calibrate_beta(tmpl, problems, jobs);

  Json j;
  j["beta_star"] = cal.beta_star;
  j["range"] = {cal.range_lo, cal.range_hi};
  j["probes"] = probes;
  Json sweep = Json::array();
  std::string csv = "beta,mean_psnr\n";
  for (std::size_t b = 0; b < cal.betas.size(); ++b) {
    sweep.push_back({{"beta", cal.betas[b]}, {"mean_psnr", json_number(cal.mean_psnr[b])}});
    csv += format_double(cal.betas[b]) + "," + format_double(cal.mean_psnr[b]) + "\n";
  }
  j["sweep"] = std::move(sweep);
  RunResult rr;
  rr.files.push_back({"calibration.json", dump_json(j) + "\n"});
  rr.files.push_back({"sweep.csv", csv});
  rr.config = std::move(cfg);
  return rr;
}

inline RunResult run_train(Json cfg) {
  const std::string sub = "train";
  check_top_level(cfg, {"network", "checkpoint", "dataset", "steps", "lr"}, sub);
  fill_defaults(cfg, sub);
  resolve_network(cfg, sub);

  const auto start = load_network(cfg, sub);
  const auto steps = get<std::size_t>(cfg, "steps", sub);
  const double lr = get<double>(cfg, "lr", sub);
  if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
  const auto ds = load_digits_like(cfg, sub);
  check_input_size({start.spec, start.state}, ds.height * ds.width, sub);
  std::vector<models::LabeledExample> train_set;
  for (std::size_t i = 0; i < ds.size(); ++i) train_set.push_back(ds.example(i));

  models::Checkpoint out = start;
  out.state = models::train_steps(start.spec, start.state, train_set, steps, lr);
  out.step = start.step + steps;
  std::size_t correct = 0;
  double loss = 0.0;
  for (const auto& ex : train_set) {
    correct += models::predict(out.spec, out.state, ex.x) == ex.y ? 1 : 0;
    loss += models::loss_and_param_grad(out.spec, out.state, ex).loss;
  }
  Json j;
  j["start_step"] = start.step;
  j["step"] = out.step;
  j["lr"] = lr;
  j["examples"] = train_set.size();
  j["mean_loss"] = json_number(loss / static_cast<double>(train_set.size()));
  j["accuracy"] = static_cast<double>(correct) / static_cast<double>(train_set.size());
  RunResult rr;
  rr.files.push_back({"checkpoint.bin", models::encode_checkpoint(out)});
  rr.files.push_back({"train.json", dump_json(j) + "\n"});
  rr.config = std::move(cfg);
  return rr;
}

}  // namespace detail

// Top-level keys of `overlay` replace those of `base`.
inline Json merge_config(Json base, const Json& overlay) {
  if (!overlay.is_object()) throw ConfigError("config: expected a JSON object");
  for (auto it = overlay.begin(); it != overlay.end(); ++it) base[it.key()] = it.value();
  return base;
}

inline Json read_config_file(const std::string& path) {
  const std::string text =
      detail::config_input("config", [&] { return read_text_file(path); });
  try {
    return Json::parse(text);
  } catch (const Json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline RunResult run(const std::string& sub, const Json& config, std::size_t jobs) {
  if (sub == "attack") return detail::run_attack(config);
  if (sub == "matrix") return detail::run_matrix(config, jobs);
  if (sub == "synth-ablation") return detail::run_synth_ablation(config, jobs);
  if (sub == "mc-ablation") return detail::run_mc_ablation(config, jobs);
  if (sub == "risk") return detail::run_risk(config, jobs);
  if (sub == "calibrate-beta") return detail::run_calibrate_beta(config, jobs);
  if (sub == "train") return detail::run_train(config);
  throw ConfigError("unknown subcommand \"" + sub + "\"");
}

inline std::string config_hash(const Json& config) {
  return detail::hex64(fnv1a64(dump_json(config, -1)));
}

inline Json manifest(const std::string& sub, const RunResult& r) {
  Json j;
  j["tool"] = "gradleak";
  j["version"] = GRADLEAK_VERSION;
  j["schema_version"] = kSchemaVersion;
  j["subcommand"] = sub;
  j["seed"] = r.config.at("seed");
  j["config_hash"] = config_hash(r.config);
  j["config"] = r.config;
  Json outputs;
  for (const auto& f : r.files) outputs[f.name] = detail::hex64(fnv1a64(f.content));
  j["outputs"] = std::move(outputs);
  return j;
}

// Reruns a manifest's resolved config; the config must resolve to itself.
inline std::pair<std::string, RunResult> rerun(const Json& m, std::size_t jobs) {
  require_known_keys(m,
                     {"tool", "version", "schema_version", "subcommand", "seed",
                      "config_hash", "config", "outputs"},
                     "manifest");
  const auto sub = detail::get<std::string>(m, "subcommand", "manifest");
  const auto hash = detail::get<std::string>(m, "config_hash", "manifest");
  const Json& config = require_key(m, "config", "manifest");
  if (config_hash(config) != hash) {
    throw ConfigError("manifest: config does not match config_hash");
  }
  RunResult r = run(sub, config, jobs);
  if (config_hash(r.config) != hash) {
    throw ConfigError("manifest: config is not fully resolved");
  }
  return {sub, std::move(r)};
}

// Writes the outputs, then manifest.json.
inline void write_outputs(const std::string& dir, const std::string& sub,
                          const RunResult& r) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir + ": " + ec.message());
  for (const auto& f : r.files) write_text_file(dir + "/" + f.name, f.content);
  write_text_file(dir + "/manifest.json", dump_json(manifest(sub, r)) + "\n");
}

}  // namespace gradleak::cli
