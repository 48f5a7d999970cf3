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

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "gradleak/analytic.hpp"
#include "gradleak/attacks.hpp"
#include "gradleak/cli.hpp"
#include "gradleak/data.hpp"
#include "gradleak/defenses.hpp"
#include "gradleak/eval.hpp"
#include "gradleak/models.hpp"
#include "gradleak/priors.hpp"
#include "test_util.hpp"

namespace gl = gradleak;
namespace fs = std::filesystem;
using gl::Tensor;
using gl::attacks::AttackConfig;
using gl::attacks::ConditionalKind;
using gl::defenses::DefenseMechanism;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

std::string fmt2(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), f, a, b);
  return buf;
}

gl::data::ImageDataset digits(std::size_t n) {
  const std::string dir = GRADLEAK_DATA_DIR;
  return gl::data::load_idx(dir + "/digits8x8-images.idx3-ubyte",
                            dir + "/digits8x8-labels.idx1-ubyte", n);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 1 ----

Outcome analytic_exactness() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2026);
  std::uniform_int_distribution<std::size_t> width(2, 64), depth(1, 4), cls(2, 10);
  double worst = 0.0;
  int redraws = 0;
  for (int t = 0; t < 100; ++t) {
    while (true) {
      std::vector<std::size_t> sizes{width(rng)};
      const std::size_t layers = depth(rng);
      for (std::size_t l = 1; l < layers; ++l) sizes.push_back(width(rng));
      sizes.push_back(cls(rng));
      const gl::models::NetworkSpec spec{sizes, rng()};
      const auto state = gl::models::init_parameters(spec);
      gl::models::LabeledExample ex{
          Tensor::vector(gl::testing::normal_vector(sizes.front(), rng)),
          std::uniform_int_distribution<std::size_t>(0, sizes.back() - 1)(rng)};
      const auto grad = gl::models::loss_and_param_grad(spec, state, ex).grad;
      const auto released =
          gl::defenses::sample(DefenseMechanism::none(), grad, state.segments, 0);
      try {
        const auto inv = gl::analytic::invert_released(released);
        worst = std::max(worst, gl::max_abs_diff(inv.x, ex.x));
        break;
      } catch (const gl::analytic::NoUsableNeuron&) {
        ++redraws;  // every first-layer unit inactive: nothing to invert
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-9 && secs < 10.0,
          fmt("max |x_hat - x| = %.3g over 100 nets", worst) +
              fmt(", %g redrawn with no active unit", redraws) +
              fmt(", %.2f s (limit 1e-9, 10 s)", secs)};
}

// ---- 2 ----

Outcome synthetic_ordering() {
  gl::eval::SyntheticAblationConfig c;  // 300 trials, 200 steps, Laplace 0.1
  c.jobs = gl::eval::default_jobs();
  const auto res = gl::eval::synthetic_ablation(c);
  const auto& m = res.variants.front();
  bool pass = true;
  std::string detail = fmt("matched %.4f", m.mean_distance.back());
  for (std::size_t v = 1; v < res.variants.size(); ++v) {
    const auto& o = res.variants[v];
    std::vector<double> d;
    for (std::size_t t = 0; t < c.trials; ++t) {
      d.push_back(o.final_distance[t] - m.final_distance[t]);
    }
    const double gap = gl::eval::mean_of(d), se = gl::eval::standard_error(d);
    pass = pass && gap >= se && gap > 0.0;
    detail += "; " + o.name + fmt(" %.4f", o.mean_distance.back()) +
              fmt2(" (gap %.4f, paired SE %.4f", gap, se) +
              fmt(", marginal SE %.4f)", o.stderr_distance.back());
  }
  return {pass, detail};
}

// ---- 3 ----

struct FdNet {
  gl::models::Network net;
  gl::models::LabeledExample ex;
  Tensor grad;
};

FdNet fd_net(std::uint64_t seed) {
  const gl::models::NetworkSpec spec{{16, 12, 4}, seed};
  FdNet f{{spec, gl::models::init_parameters(spec)}, {}, {}};
  std::mt19937_64 rng(seed + 1);
  f.ex.x = Tensor::vector(gl::testing::normal_vector(16, rng));
  f.ex.y = 1;
  f.grad = gl::models::loss_and_param_grad(spec, f.net.state, f.ex).grad;
  return f;
}

// Smallest distance from x to a point where the objective is not smooth.
double kink_distance(const AttackConfig& c, const std::vector<double>& x,
                     const FdNet& f, const gl::defenses::ReleasedGradient& r) {
  double d = INFINITY;
  const auto& w = f.net.state.segments[0];
  const auto& b = f.net.state.segments[1];
  for (std::size_t i = 0; i < w.rows; ++i) {
    double z = f.net.state.theta[b.offset + i];
    for (std::size_t j = 0; j < w.cols; ++j) {
      z += f.net.state.theta[w.offset + i * w.cols + j] * x[j];
    }
    d = std::min(d, std::abs(z));
  }
  using gl::priors::PriorKind;
  if (c.prior.kind == PriorKind::kTvAniso) {
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        if (j + 1 < 4) d = std::min(d, std::abs(x[i * 4 + j] - x[i * 4 + j + 1]));
        if (i + 1 < 4) d = std::min(d, std::abs(x[i * 4 + j] - x[(i + 1) * 4 + j]));
      }
    }
  }
  if (c.prior.kind == PriorKind::kPixelRange) {
    for (double v : x) d = std::min({d, std::abs(v), std::abs(v - 1.0)});
  }
  const bool abs_term =
      c.conditional == ConditionalKind::kL1 ||
      (c.conditional == ConditionalKind::kBayes && c.assumed_defense &&
       c.assumed_defense->kind == gl::defenses::DefenseKind::kLaplacian);
  if (abs_term) {
    const auto g =
        gl::models::loss_and_param_grad(f.net.spec, f.net.state,
                                        {Tensor::vector(x), f.ex.y})
            .grad;
    for (std::size_t k = 0; k < g.size(); ++k) d = std::min(d, std::abs(g[k] - r.g[k]));
  }
  return d;
}

Outcome gradient_correctness() {
  const FdNet f = fd_net(31);
  struct Term {
    const char* name;
    ConditionalKind cond;
    DefenseMechanism defense;
  };
  const std::vector<Term> terms{
      {"bayes-gaussian", ConditionalKind::kBayes, DefenseMechanism::gaussian(0.1)},
      {"bayes-laplacian", ConditionalKind::kBayes, DefenseMechanism::laplacian(0.1)},
      {"bayes-prune-mixture", ConditionalKind::kBayes,
       DefenseMechanism::prune_gaussian(0.5, 0.1)},
      {"l2", ConditionalKind::kL2, DefenseMechanism::gaussian(0.1)},
      {"l1", ConditionalKind::kL1, DefenseMechanism::gaussian(0.1)},
      {"cosine", ConditionalKind::kCosine, DefenseMechanism::gaussian(0.1)}};
  const std::vector<gl::priors::PriorSpec> prior_list{
      gl::priors::PriorSpec::uniform(), gl::priors::PriorSpec::tv(4, 4),
      gl::priors::PriorSpec::pixel_range(4, 4)};
  constexpr double kH = 1e-6, kMargin = 1e-4;
  std::mt19937_64 rng(32);
  double worst = 0.0;
  std::string worst_case;
  int skipped = 0, checked = 0;
  for (const auto& term : terms) {
    const auto r = gl::defenses::sample(term.defense, f.grad, f.net.state.segments, 33);
    for (const auto& prior : prior_list) {
      AttackConfig c;
      c.conditional = term.cond;
      if (term.cond == ConditionalKind::kBayes) c.assumed_defense = term.defense;
      c.prior = prior;
      c.beta = 0.5;
      c.label = f.ex.y;
      for (int n = 0; n < 50;) {
        std::vector<double> x = gl::testing::normal_vector(16, rng, 0.5);
        for (double& v : x) v += 0.5;
        if (kink_distance(c, x, f, r) < kMargin) {
          ++skipped;
          continue;
        }
        const auto fn = [&](const std::vector<double>& z) {
          return gl::attacks::evaluate_objective(c, Tensor::vector(z), r, f.net, f.ex.y)
              .value;
        };
        const auto fd = gl::testing::central_difference(fn, x, kH);
        const auto g =
            gl::attacks::evaluate_objective(c, Tensor::vector(x), r, f.net, f.ex.y).grad;
        const double err = gl::testing::relative_error(g.data(), fd);
        if (err > worst) {
          worst = err;
          worst_case = std::string(term.name) + "+" + gl::priors::kind_name(prior.kind);
        }
        ++n;
        ++checked;
      }
    }
  }
  return {worst < 1e-4,
          fmt("%g points (6 objectives x 3 priors x 50)", checked) +
              fmt(", worst relative error %.3g", worst) + " at " + worst_case +
              fmt(", %g draws within 1e-4 of a kink redrawn", skipped)};
}

// ---- 4 ----

Outcome reduction_identities() {
  const FdNet f = fd_net(41);
  std::mt19937_64 rng(42);
  const double sigma = 0.1, b = 0.1;
  const auto rg = gl::defenses::sample(DefenseMechanism::gaussian(sigma), f.grad,
                                       f.net.state.segments, 43);
  const auto rl = gl::defenses::sample(DefenseMechanism::laplacian(b), f.grad,
                                       f.net.state.segments, 44);
  AttackConfig bayes, l2, l1;
  bayes.conditional = ConditionalKind::kBayes;
  l2.conditional = ConditionalKind::kL2;
  l1.conditional = ConditionalKind::kL1;
  bayes.label = l2.label = l1.label = f.ex.y;
  double worst_g = 0.0, worst_l = 0.0;
  for (int t = 0; t < 50; ++t) {
    const Tensor x = Tensor::vector(gl::testing::normal_vector(16, rng));
    const auto a = gl::attacks::evaluate_objective(bayes, x, rg, f.net, f.ex.y).grad;
    const auto q = gl::attacks::evaluate_objective(l2, x, rg, f.net, f.ex.y).grad;
    std::vector<double> scaled;
    for (double v : q.data()) scaled.push_back(v / (2.0 * sigma * sigma));
    worst_g = std::max(worst_g, gl::testing::relative_error(a.data(), scaled));
    const auto p = gl::attacks::evaluate_objective(bayes, x, rl, f.net, f.ex.y).grad;
    const auto s = gl::attacks::evaluate_objective(l1, x, rl, f.net, f.ex.y).grad;
    std::vector<double> scaled1;
    for (double v : s.data()) scaled1.push_back(v / b);
    worst_l = std::max(worst_l, gl::testing::relative_error(p.data(), scaled1));
  }
  return {worst_g < 1e-10 && worst_l < 1e-10,
          fmt2("gaussian vs l2/(2 sigma^2): %.3g; laplacian vs l1/b: %.3g "
               "(50 points each, limit 1e-10)",
               worst_g, worst_l)};
}

// ---- 5 ----

Outcome prune_advantage() {
  const auto ds = digits(30);
  const gl::models::NetworkSpec spec{{64, 32, 10}, 3};
  const std::vector<gl::eval::CheckpointEntry> ckpt{
      {0, {spec, gl::models::init_parameters(spec)}}};
  AttackConfig base;
  base.steps = 300;
  base.prior = gl::priors::PriorSpec::tv(8, 8);
  AttackConfig bayes = base, l2 = base;
  bayes.conditional = ConditionalKind::kBayes;
  l2.conditional = ConditionalKind::kL2;
  const std::vector<gl::eval::AttackEntry> attack_list{{"bayes", bayes}, {"l2", l2}};
  const std::vector<gl::eval::DefenseEntry> defense_list{
      {"prune_gaussian", DefenseMechanism::prune_gaussian(0.5, 0.1)}};
  gl::eval::MatrixOptions opt;
  opt.n = 30;
  opt.jobs = gl::eval::default_jobs();
  const auto table = gl::eval::run_matrix(gl::eval::grid_preset("table2-desk"),
                                          attack_list, defense_list, ckpt, ds, opt);
  const double pb = table.rows.at(0).mean_psnr, pl = table.rows.at(1).mean_psnr;
  return {pb - pl >= 1.0,
          fmt2("bayes mixture %.2f dB vs l2 %.2f dB", pb, pl) +
              fmt(", difference %.2f dB over 30 images (need >= 1)", pb - pl)};
}

// ---- 6 ----

Outcome mc_trend() {
  const auto ds = gl::data::standardized(digits(100));
  gl::eval::McAblationConfig c;  // k 1/4/16, sigma 0.1, delta 9, 20 trials
  c.jobs = gl::eval::default_jobs();
  const auto res = gl::eval::mc_ablation(c, ds);
  bool pass = true;
  std::string detail = fmt("beta* %g", res.beta);
  for (std::size_t i = 0; i < res.curves.size(); ++i) {
    const auto& cv = res.curves[i];
    detail += fmt("; k=%g", static_cast<double>(cv.k)) +
              fmt2(" %.3f dB (SE %.3f)", cv.mean_psnr.back(), cv.stderr_psnr.back());
    if (i == 0) continue;
    std::vector<double> d;
    for (std::size_t t = 0; t < c.trials; ++t) {
      d.push_back(cv.final_psnr[t] - res.curves[i - 1].final_psnr[t]);
    }
    const double mean = gl::eval::mean_of(d), se = gl::eval::standard_error(d);
    pass = pass && mean >= -se;
    detail += fmt2(" [step %.3f, paired SE %.3f]", mean, se);
  }
  return {pass, detail};
}

// ---- 7 ----

Outcome layer_drop() {
  const auto ds = digits(20);
  const gl::models::NetworkSpec spec{{64, 256, 10}, 3};
  const gl::models::Network net{spec, gl::models::init_parameters(spec)};
  const auto defense = DefenseMechanism::layer_perturb(0, 0.8);
  AttackConfig c;
  c.conditional = ConditionalKind::kL2;
  c.prior = gl::priors::PriorSpec::pixel_range(8, 8);
  c.beta = 1.0;
  c.lr = 0.1;
  c.lr_decay = 0.995;
  c.steps = 500;
  std::vector<double> drop(20), plain(20);
  std::vector<int> found(20);
  gl::eval::parallel_for(20, gl::eval::default_jobs(), [&](std::size_t t) {
    const std::uint64_t s = gl::derive_seed(7, t);
    const auto ex = ds.example(t);
    const auto grad = gl::models::loss_and_param_grad(spec, net.state, ex).grad;
    const auto released = gl::defenses::sample(defense, grad, net.state.segments,
                                               gl::derive_seed(s, 0));
    AttackConfig a = c;
    a.seed = gl::derive_seed(s, 1);
    const auto sweep = gl::attacks::layer_drop_attack(a, released, net, std::nullopt, ex.x);
    found[t] = sweep.layer == 0 ? 1 : 0;
    drop[t] = *sweep.per_layer.at(0).psnr;  // identical to a known-layer run
    plain[t] = *gl::attacks::run_attack(a, released, net, ex.x).psnr;
  });
  const double md = gl::eval::mean_of(drop), mp = gl::eval::mean_of(plain);
  int hits = 0;
  for (int v : found) hits += v;
  return {md - mp >= 2.0 && hits >= 16,
          fmt2("layer-drop %.2f dB vs unmasked l2 %.2f dB", md, mp) +
              fmt(" (need +2); sweep found the defended layer in %g/20 (need 16)",
                  static_cast<double>(hits))};
}

// ---- 8 ----

Outcome label_recovery() {
  const auto ds = digits(100);
  int clean = 0, noisy = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    const gl::models::NetworkSpec spec{{64, 32, 10}, 800 + i};
    const gl::models::Network net{spec, gl::models::init_parameters(spec)};
    const auto ex = ds.example(i);
    const auto grad = gl::models::loss_and_param_grad(spec, net.state, ex).grad;
    const auto r0 =
        gl::defenses::sample(DefenseMechanism::none(), grad, net.state.segments, i);
    const auto r1 = gl::defenses::sample(DefenseMechanism::gaussian(0.01), grad,
                                         net.state.segments, i);
    clean += gl::attacks::recover_label(r0, net).label == ex.y ? 1 : 0;
    noisy += gl::attacks::recover_label(r1, net).label == ex.y ? 1 : 0;
  }
  return {clean == 100 && noisy >= 95,
          fmt2("clean %g/100 (need 100), gaussian 0.01 %g/100 (need 95)", clean, noisy)};
}

// ---- 9 ----

Outcome risk_sanity() {
  const auto task = gl::data::make_synthetic_task(90);
  const gl::models::NetworkSpec spec{{20, 16, 10}, 91};
  const gl::models::Network net{spec, gl::models::init_parameters(spec)};
  const auto sampler = gl::eval::synthetic_sampler(task);
  const std::size_t jobs = gl::eval::default_jobs();
  const std::vector<double> small{1e-9, 1e-6, 1e-3, 1.0};
  const auto a = gl::eval::risk_curve(gl::eval::analytic_attacker(),
                                      DefenseMechanism::none(), net, sampler, small, 200,
                                      92, jobs);
  bool zero = true;
  for (const auto& r : a) zero = zero && r.risk == 0.0;
  const auto c = gl::eval::risk_curve(gl::eval::constant_attacker(Tensor::zeros({20})),
                                      DefenseMechanism::gaussian(0.1), net, sampler,
                                      std::vector<double>{0.1, 1.0}, 200, 93, jobs);
  bool one = true;
  for (const auto& r : c) one = one && r.risk == 1.0;
  AttackConfig cfg;
  cfg.steps = 100;
  const std::vector<double> deltas{0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0};
  const auto m = gl::eval::risk_curve(gl::eval::optimization_attacker(cfg),
                                      DefenseMechanism::gaussian(0.1), net, sampler,
                                      deltas, 40, 94, jobs);
  bool monotone = true;
  std::string curve;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (i > 0) monotone = monotone && m[i].risk <= m[i - 1].risk;
    curve += fmt(" %.3f", m[i].risk);
  }
  return {zero && one && monotone,
          std::string("analytic+none risk 0 at delta in {1e-9..1}: ") +
              (zero ? "yes" : "no") + "; constant attacker risk 1: " +
              (one ? "yes" : "no") + "; optimization attacker risk over delta 0.5..8:" +
              curve + (monotone ? " (non-increasing)" : " (NOT monotone)")};
}

// ---- 10 ----

std::string read_file(const fs::path& p) { return gl::read_text_file(p.string()); }

bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(a)) names.insert(e.path().filename());
  std::set<std::string> other;
  for (const auto& e : fs::directory_iterator(b)) other.insert(e.path().filename());
  if (names != other) {
    why = "file sets differ";
    return false;
  }
  for (const auto& n : names) {
    if (read_file(a / n) != read_file(b / n)) {
      why = n + " differs";
      return false;
    }
  }
  return true;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + GRADLEAK_CLI_PATH + "\" " + args +
                          " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

Outcome cli_determinism() {
  const fs::path root = fs::temp_directory_path() /
                        ("gradleak-acceptance-" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string matrix_cfg = (root / "matrix.json").string();
  gl::write_text_file(
      matrix_cfg,
      R"({"n": 2, "checkpoints": [0, 5],
 "grid": {"preset": "table2-desk", "probe_count": 2},
 "attacks": [{"name": "bayes", "config": {"conditional": "bayes", "steps": 8, "prior": {"kind": "tv_aniso"}}},
             {"name": "l2", "config": {"conditional": "l2", "steps": 8}}],
 "defenses": [{"name": "prune_gaussian", "defense": {"kind": "prune_gaussian", "prune_rate": 0.5, "sigma": 0.1}}]})");
  const std::string ckpt = (root / "train0" / "checkpoint.bin").string();
  struct Run {
    std::string name, args;
  };
  const std::vector<Run> runs{
      {"train0", "train --layers 64,32,10 --steps 20"},
      {"attack", "attack --layers 64,32,10 --defense gaussian --sigma 0.1 --steps 30 "
                 "--conditional bayes --prior tv_aniso --beta 0.1 --seed 5"},
      {"attack_ckpt", "attack --checkpoint " + ckpt + " --defense none"},
      {"matrix", "matrix --config " + matrix_cfg},
      {"synth", "synth-ablation --trials 6 --steps 20 --seed 3"},
      {"mc", "mc-ablation --trials 3 --steps 10 --k-values 1,2 --probe-count 2"},
      {"risk", "risk --layers 64,32,10 --defense gaussian --sigma 0.1 --attacker "
               "optimization --trials 6 --seed 2"},
      {"calibrate", "calibrate-beta --layers 64,32,10 --defense gaussian --sigma 0.1 "
                    "--steps 10 --probes 2"},
  };
  std::string detail;
  bool pass = true;
  for (const auto& r : runs) {
    const fs::path a = root / r.name, b = root / (r.name + "-rerun"),
                   c = root / (r.name + "-again");
    std::string why;
    bool ok = run_cli(r.args + " --jobs 1 --out " + a.string()) == 0 &&
              run_cli("rerun --jobs 3 --manifest " + (a / "manifest.json").string() +
                      " --out " + b.string()) == 0 &&
              run_cli(r.args + " --jobs 2 --out " + c.string()) == 0;
    if (!ok) why = "non-zero exit";
    ok = ok && same_tree(a, b, why) && same_tree(a, c, why);
    if (!ok) detail += " " + r.name + ": " + why + ";";
    pass = pass && ok;
  }
  fs::remove_all(root);
  return {pass, pass ? "train, attack (x2), matrix, synth-ablation, mc-ablation, risk, "
                       "calibrate-beta: manifest reruns and repeat runs byte-identical "
                       "across job counts"
                     : "mismatch:" + detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"analytic inversion exactness", analytic_exactness},
      {"synthetic ablation ordering", synthetic_ordering},
      {"objective gradients vs finite differences", gradient_correctness},
      {"reduction identities", reduction_identities},
      {"prune-defense advantage", prune_advantage},
      {"Monte Carlo sample-count trend", mc_trend},
      {"layer-drop attack", layer_drop},
      {"label recovery", label_recovery},
      {"risk estimator sanity", risk_sanity},
      {"CLI determinism", cli_determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::printf("%s [%d] %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id,
                criteria[i].first.c_str(), o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%d failed\n", failures);
  return failures == 0 ? 0 : 1;
}
