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

// gradleak command-line tool. Every subcommand reads an optional JSON config
// (--config), applies flag overrides on top (flags win) and writes its
// outputs plus manifest.json to --out.

#include <cstdint>
#include <deque>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gradleak/cli.hpp"

namespace {

using gradleak::Json;
namespace cli = gradleak::cli;

struct Patch {
  std::string pointer;
  Json value;
  bool replace = false;  // applied before plain patches
};

struct Command {
  std::string name;
  CLI::App* app = nullptr;
  std::string config;
  std::string out;
  std::string manifest;
  std::size_t jobs = gradleak::eval::default_jobs();
  std::vector<Patch> patches;
};

template <class T>
CLI::Option* flag(Command& c, const std::string& name, const std::string& pointer,
                  const std::string& help) {
  return c.app->add_option_function<T>(
      name, [&c, pointer](const T& v) { c.patches.push_back({pointer, Json(v), false}); },
      help);
}

template <class T>
CLI::Option* list_flag(Command& c, const std::string& name, const std::string& pointer,
                       const std::string& help) {
  return flag<std::vector<T>>(c, name, pointer, help)->delimiter(',');
}

// Sets {"kind": value} at `pointer`, replacing the whole object.
CLI::Option* kind_flag(Command& c, const std::string& name, const std::string& pointer,
                       const std::string& help) {
  return c.app->add_option_function<std::string>(
      name,
      [&c, pointer](const std::string& v) {
        c.patches.push_back({pointer, Json{{"kind", v}}, true});
      },
      help);
}

CLI::Option* json_flag(Command& c, const std::string& name, const std::string& pointer,
                       const std::string& help) {
  return c.app->add_option_function<std::string>(
      name,
      [&c, name, pointer](const std::string& v) {
        try {
          c.patches.push_back({pointer, Json::parse(v), true});
        } catch (const Json::exception& e) {
          throw CLI::ValidationError(name, e.what());
        }
      },
      help);
}

void add_common(Command& c) {
  c.app->add_option("--config", c.config, "JSON config file");
  c.app->add_option("--out", c.out, "output directory (default: $GRADLEAK_OUT or ./gradleak-out)");
  c.app->add_option("--jobs", c.jobs, "parallel work items")->check(CLI::PositiveNumber);
  flag<std::uint64_t>(c, "--seed", "/seed", "master seed");
}

void add_network(Command& c, bool checkpoint = true) {
  list_flag<std::size_t>(c, "--layers", "/network/layer_sizes",
                         "layer sizes, input first, e.g. 64,32,10");
  flag<std::uint64_t>(c, "--net-seed", "/network/seed", "parameter init seed");
  if (checkpoint) flag<std::string>(c, "--checkpoint", "/checkpoint", "checkpoint file");
}

void add_defense(Command& c) {
  kind_flag(c, "--defense", "/defense",
            "none|gaussian|laplacian|prune_gaussian|prune_laplacian|clip_gaussian|"
            "layer_perturb");
  flag<double>(c, "--sigma", "/defense/sigma", "Gaussian noise scale");
  flag<double>(c, "--b", "/defense/b", "Laplacian noise scale");
  flag<double>(c, "--prune-rate", "/defense/prune_rate", "pruning probability");
  flag<double>(c, "--clip-bound", "/defense/clip_bound", "clipping bound");
  flag<std::size_t>(c, "--defense-layer", "/defense/defended_layer",
                    "layer perturbed by layer_perturb");
  flag<double>(c, "--perturb-mask-rate", "/defense/perturb_mask_rate",
               "layer_perturb noise scale");
}

void add_attack(Command& c, const std::string& p) {
  flag<std::size_t>(c, "--k", p + "/k", "Monte Carlo samples per step");
  flag<double>(c, "--delta", p + "/delta", "ball radius");
  flag<std::size_t>(c, "--steps", p + "/steps", "attack iterates");
  flag<double>(c, "--lr", p + "/lr", "learning rate");
  flag<double>(c, "--lr-decay", p + "/lr_decay", "per-step learning rate decay");
  flag<double>(c, "--beta", p + "/beta", "prior weight");
  flag<std::string>(c, "--init", p + "/init", "gaussian_noise|zeros|provided");
  list_flag<double>(c, "--init-x", p + "/init_x", "initial point for init=provided");
  flag<std::string>(c, "--conditional", p + "/conditional", "bayes|l2|l1|cosine");
  json_flag(c, "--assumed-defense", p + "/assumed_defense",
            "defense JSON used by the bayes term");
  kind_flag(c, "--prior", p + "/prior",
            "uniform|gaussian_unit|laplacian_unit|tv_aniso|pixel_range|tv_plus_range");
  flag<double>(c, "--prior-phi", p + "/prior/phi", "tv_plus_range mixing weight");
  list_flag<std::size_t>(c, "--image-shape", p + "/prior/image_shape",
                         "prior image shape H,W (default: from the data)");
  list_flag<std::size_t>(c, "--layer-mask", p + "/layer_mask",
                         "layers left out of the gradient term");
  flag<double>(c, "--layer-weight-gamma", p + "/layer_weight_gamma",
               "exponential layer weighting base");
  flag<std::string>(c, "--optimizer", p + "/optimizer", "adam|ascent");
  flag<std::size_t>(c, "--label", p + "/label", "label to assume instead of recovering it");
  flag<double>(c, "--psnr-max-val", p + "/psnr_max_val", "PSNR peak value");
  flag<std::uint64_t>(c, "--attack-seed", p + "/seed", "attack seed (default: derived)");
}

void add_dataset(Command& c, const std::string& p) {
  flag<std::string>(c, "--images", p + "/images", "IDX image file");
  flag<std::string>(c, "--labels", p + "/labels", "IDX label file");
  flag<std::size_t>(c, "--limit", p + "/limit", "read only the first N examples");
  flag<bool>(c, "--standardize", p + "/standardize", "standardize pixels (true|false)");
}

void build(std::deque<Command>& cmds, CLI::App& app) {
  auto make = [&](const std::string& name, const std::string& help) -> Command& {
    cmds.push_back({});
    Command& c = cmds.back();
    c.name = name;
    c.app = app.add_subcommand(name, help);
    if (name != "rerun") add_common(c);
    return c;
  };

  Command& attack = make("attack", "reconstruct one input from its released gradient");
  add_network(attack);
  add_defense(attack);
  add_attack(attack, "/attack");
  flag<std::string>(attack, "--mode", "/mode", "auto|optimize|analytic|layer_drop|joint");
  flag<std::size_t>(attack, "--drop-layer", "/defended_layer",
                    "layer dropped by layer_drop (default: sweep all)");
  attack.app->add_flag_callback(
      "--no-image",
      [&attack] { attack.patches.push_back({"/save_image", Json(false), false}); },
      "do not write x_hat.csv");
  attack.app->add_option_function<std::string>(
      "--source",
      [&attack](const std::string& v) {
        attack.patches.push_back(
            {"/input", v == "idx" ? cli::bundled_digits() : Json{{"source", v}}, true});
      },
      "idx|synthetic|csv (resets the other input fields)");
  flag<std::size_t>(attack, "--index", "/input/index", "example index");
  add_dataset(attack, "/input");
  flag<std::string>(attack, "--csv", "/input/path", "CSV input file");
  list_flag<std::size_t>(attack, "--shape", "/input/shape", "CSV input shape");
  flag<std::size_t>(attack, "--input-label", "/input/label", "CSV input label");

  Command& matrix = make("matrix", "attack x defense x checkpoint PSNR table");
  list_flag<std::size_t>(matrix, "--layers", "/network/layer_sizes", "layer sizes");
  flag<std::uint64_t>(matrix, "--net-seed", "/network/seed", "parameter init seed");
  flag<std::size_t>(matrix, "--n", "/n", "examples per cell");
  matrix.app->add_option_function<std::string>(
      "--preset",
      [&matrix](const std::string& v) {
        matrix.patches.push_back({"/grid", Json{{"preset", v}}, true});
      },
      "grid preset: table2-desk|paper");
  list_flag<std::size_t>(matrix, "--checkpoints", "/checkpoints", "training steps");
  flag<double>(matrix, "--train-lr", "/train_lr", "training learning rate");
  add_dataset(matrix, "/dataset");

  Command& synth = make("synth-ablation", "prior x conditional ablation on synthetic data");
  flag<std::size_t>(synth, "--steps", "/steps", "attack iterates");
  flag<std::size_t>(synth, "--trials", "/trials", "trials");
  flag<std::size_t>(synth, "--dim", "/dim", "input dimension");
  flag<std::size_t>(synth, "--classes", "/classes", "classes");
  flag<std::size_t>(synth, "--hidden", "/hidden", "hidden units");
  flag<double>(synth, "--noise-b", "/noise_b", "Laplacian defense scale");
  flag<double>(synth, "--lr", "/lr", "learning rate");
  flag<double>(synth, "--lr-decay", "/lr_decay", "learning rate decay");
  flag<double>(synth, "--beta", "/beta", "prior weight");

  Command& mc = make("mc-ablation", "Monte Carlo sample-count ablation");
  list_flag<std::size_t>(mc, "--k-values", "/k_values", "sample counts, ascending");
  flag<std::size_t>(mc, "--trials", "/trials", "trials");
  flag<std::size_t>(mc, "--steps", "/steps", "attack iterates");
  flag<double>(mc, "--sigma", "/sigma", "Gaussian defense scale");
  flag<double>(mc, "--delta", "/delta", "ball radius");
  flag<double>(mc, "--lr", "/lr", "learning rate");
  flag<double>(mc, "--lr-decay", "/lr_decay", "learning rate decay");
  flag<double>(mc, "--beta", "/beta", "prior weight (with --calibrate false)");
  flag<bool>(mc, "--calibrate", "/calibrate", "pick beta by a decade sweep (true|false)");
  flag<std::size_t>(mc, "--probe-count", "/probe_count", "calibration probe images");
  flag<std::size_t>(mc, "--hidden", "/hidden", "hidden units");
  add_dataset(mc, "/dataset");

  Command& risk = make("risk", "Monte Carlo adversarial risk");
  add_network(risk);
  add_defense(risk);
  kind_flag(risk, "--attacker", "/attacker", "analytic|constant|optimization");
  flag<double>(risk, "--value", "/attacker/value", "constant attacker output value");
  list_flag<double>(risk, "--deltas", "/deltas", "success radii");
  flag<std::size_t>(risk, "--trials", "/trials", "trials");

  Command& cal = make("calibrate-beta", "decade sweep for the prior weight");
  add_network(cal);
  add_defense(cal);
  add_attack(cal, "/attack");
  flag<std::size_t>(cal, "--probes", "/probes", "probe examples");
  add_dataset(cal, "/dataset");

  Command& train = make("train", "SGD training with checkpoint output");
  add_network(train);
  flag<std::size_t>(train, "--steps", "/steps", "SGD steps");
  flag<double>(train, "--lr", "/lr", "learning rate");
  add_dataset(train, "/dataset");

  Command& rerun = make("rerun", "rerun a manifest.json into a new output directory");
  rerun.app->add_option("--manifest", rerun.manifest, "manifest.json of an earlier run")
      ->required();
  rerun.app->add_option("--out", rerun.out, "output directory");
  rerun.app->add_option("--jobs", rerun.jobs, "parallel work items")
      ->check(CLI::PositiveNumber);
}

Json apply_patches(Json cfg, const std::vector<Patch>& patches) {
  try {
    for (bool replace : {true, false}) {
      for (const auto& p : patches) {
        if (p.replace == replace) cfg[Json::json_pointer(p.pointer)] = p.value;
      }
    }
  } catch (const Json::exception& e) {
    throw gradleak::ConfigError(std::string("flag override: ") + e.what());
  }
  return cfg;
}

int execute(const Command& c) {
  const std::string out = c.out.empty() ? cli::default_out_dir() : c.out;
  if (c.name == "rerun") {
    const auto [sub, result] = cli::rerun(cli::read_config_file(c.manifest), c.jobs);
    cli::write_outputs(out, sub, result);
    std::cout << sub << ": wrote " << result.files.size() + 1 << " files to " << out
              << "\n";
    return cli::kExitOk;
  }
  Json cfg = cli::default_config(c.name);
  if (!c.config.empty()) cfg = cli::merge_config(cfg, cli::read_config_file(c.config));
  cfg = apply_patches(std::move(cfg), c.patches);
  const auto result = cli::run(c.name, cfg, c.jobs);
  cli::write_outputs(out, c.name, result);
  std::cout << c.name << ": wrote " << result.files.size() + 1 << " files to " << out
            << "\n";
  return cli::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gradleak: gradient leakage attacks, defenses and evaluation"};
  app.set_version_flag("--version", GRADLEAK_VERSION);
  app.require_subcommand(1);
  std::deque<Command> commands;
  build(commands, app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kExitOk : cli::kExitConfig;
  }
  for (const Command& c : commands) {
    if (!c.app->parsed()) continue;
    try {
      return execute(c);
    } catch (const gradleak::ConfigError& e) {
      std::cerr << "gradleak " << c.name << ": config error: " << e.what() << "\n";
      return cli::kExitConfig;
    } catch (const std::exception& e) {
      std::cerr << "gradleak " << c.name << ": error: " << e.what() << "\n";
      return cli::kExitRuntime;
    }
  }
  return cli::kExitConfig;
}
