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

// Experiment harness: adversarial risk, beta calibration, the grid-searched
// attack x defense matrix and the two attack ablations.
//
// Work items run in parallel, each with its own RNG stream derived from the
// master seed and the item's position, and results are collected by index,
// so every output is independent of the thread count.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "gradleak/analytic.hpp"
#include "gradleak/attacks.hpp"
#include "gradleak/data.hpp"
#include "gradleak/defenses.hpp"
#include "gradleak/error.hpp"
#include "gradleak/json_io.hpp"
#include "gradleak/models.hpp"
#include "gradleak/priors.hpp"
#include "gradleak/rng.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak::eval {

// ---- parallelism ----

inline std::size_t default_jobs() {
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

// Calls fn(i) for i in [0, n) on up to `jobs` threads. The first exception
// thrown by any call is rethrown after all threads finish.
template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F&& fn) {
  jobs = std::min(std::max<std::size_t>(jobs, 1), n);
  if (jobs <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t) {
    pool.emplace_back([&] {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!error) error = std::current_exception();
          next.store(n);
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---- statistics ----

inline double mean_of(std::span<const double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Standard error of the mean (sample standard deviation / sqrt(n)).
inline double standard_error(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) /
                   static_cast<double>(v.size()));
}

// PSNR of an iterate from its l2 distance to the original.
inline double psnr_from_distance(double distance, std::size_t dim,
                                 double max_val = 1.0) {
  const double mse = distance * distance / static_cast<double>(dim);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / mse);
}

// ---- adversarial risk ----

struct RiskEstimate {
  double risk = 0.0;
  std::size_t trials = 0;
  double delta = 0.0;
  double std_error = 0.0;
  std::size_t attacker_failures = 0;  // counted as losses
};

// Maps a released gradient to a reconstruction. `seed` drives any randomness.
using Attacker = std::function<Tensor(const defenses::ReleasedGradient&,
                                      const models::Network&, std::uint64_t seed)>;
using ExampleSampler = std::function<models::LabeledExample(Rng&)>;

struct RiskTrial {
  double distance = 0.0;  // +inf when the attacker failed
  bool failed = false;
  std::string error;
};

inline Attacker analytic_attacker() {
  return [](const defenses::ReleasedGradient& g, const models::Network&,
            std::uint64_t) { return analytic::invert_released(g).x; };
}

inline Attacker constant_attacker(Tensor output) {
  return [output = std::move(output)](const defenses::ReleasedGradient&,
                                      const models::Network&,
                                      std::uint64_t) { return output; };
}

inline Attacker optimization_attacker(attacks::AttackConfig config) {
  return [config = std::move(config)](const defenses::ReleasedGradient& g,
                                      const models::Network& net,
                                      std::uint64_t seed) {
    attacks::AttackConfig c = config;
    c.seed = seed;
    return attacks::run_attack(c, g, net).x_hat;
  };
}

inline ExampleSampler synthetic_sampler(data::SyntheticTask task) {
  return [task = std::move(task)](Rng& rng) {
    return data::sample_synthetic(task, rng);
  };
}

inline ExampleSampler dataset_sampler(const data::ImageDataset& ds) {
  if (ds.size() == 0) throw ConfigError("risk: dataset is empty");
  return [&ds](Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, ds.size() - 1);
    return ds.example(pick(rng));
  };
}

// Trial t draws (x, y) and g ~ p(g|x) from streams derived from (seed, t).
inline std::vector<RiskTrial> risk_trials(const Attacker& attacker,
                                          const defenses::DefenseMechanism& defense,
                                          const models::Network& net,
                                          const ExampleSampler& sampler,
                                          std::size_t trials, std::uint64_t seed,
                                          std::size_t jobs = 1) {
  if (trials < 1) throw ConfigError("risk: trials must be >= 1");
  defense.validate();
  std::vector<RiskTrial> out(trials);
  parallel_for(trials, jobs, [&](std::size_t t) {
    const std::uint64_t trial_seed = derive_seed(seed, t);
    Rng rng(derive_seed(trial_seed, 0));
    const models::LabeledExample ex = sampler(rng);
    const auto lg = models::loss_and_param_grad(net.spec, net.state, ex);
    const auto released = defenses::sample(defense, lg.grad, net.state.segments,
                                           derive_seed(trial_seed, 1));
    RiskTrial r;
    try {
      const Tensor x_hat = attacker(released, net, derive_seed(trial_seed, 2));
      r.distance = l2_distance(ex.x, x_hat);
    } catch (const std::exception& e) {
      r.failed = true;
      r.error = e.what();
      r.distance = std::numeric_limits<double>::infinity();
    }
    out[t] = std::move(r);
  });
  return out;
}

inline RiskEstimate summarize_risk(std::span<const RiskTrial> trials, double delta) {
  if (!(delta >= 0.0)) throw ConfigError("risk: delta must be >= 0");
  RiskEstimate est;
  est.trials = trials.size();
  est.delta = delta;
  std::size_t losses = 0;
  for (const auto& t : trials) {
    if (t.failed) ++est.attacker_failures;
    if (t.failed || t.distance > delta) ++losses;
  }
  est.risk = static_cast<double>(losses) / static_cast<double>(est.trials);
  est.std_error =
      std::sqrt(est.risk * (1.0 - est.risk) / static_cast<double>(est.trials));
  return est;
}

inline RiskEstimate estimate_risk(const Attacker& attacker,
                                  const defenses::DefenseMechanism& defense,
                                  const models::Network& net,
                                  const ExampleSampler& sampler, double delta,
                                  std::size_t trials, std::uint64_t seed,
                                  std::size_t jobs = 1) {
  const auto t = risk_trials(attacker, defense, net, sampler, trials, seed, jobs);
  return summarize_risk(t, delta);
}

// Risk at several radii over one shared set of trials.
inline std::vector<RiskEstimate> risk_curve(
    const Attacker& attacker, const defenses::DefenseMechanism& defense,
    const models::Network& net, const ExampleSampler& sampler,
    std::span<const double> deltas, std::size_t trials, std::uint64_t seed,
    std::size_t jobs = 1) {
  const auto t = risk_trials(attacker, defense, net, sampler, trials, seed, jobs);
  std::vector<RiskEstimate> out;
  for (double d : deltas) out.push_back(summarize_risk(t, d));
  return out;
}

inline Json to_json(const RiskEstimate& r) {
  Json j;
  j["delta"] = r.delta;
  j["risk"] = r.risk;
  j["stderr"] = r.std_error;
  j["trials"] = r.trials;
  j["attacker_failures"] = r.attacker_failures;
  return j;
}

// ---- attack problems and beta calibration ----

// One reconstruction target: a released gradient and the input behind it.
struct AttackProblem {
  const models::Network* net = nullptr;
  defenses::ReleasedGradient released;
  Tensor x;
  std::uint64_t seed = 0;  // attack seed
};

struct AttackOutcome {
  double psnr = 0.0;
  bool failed = false;
  std::string error;
};

// Runs one attack. A bayes conditional against an undefended gradient has
// no density, so it takes the closed-form first-layer inversion instead.
inline AttackOutcome run_problem(attacks::AttackConfig config,
                                 const AttackProblem& p) {
  AttackOutcome out;
  try {
    if (config.conditional == attacks::ConditionalKind::kBayes &&
        !config.assumed_defense &&
        p.released.defense.kind == defenses::DefenseKind::kNone) {
      const auto inv = analytic::invert_released(p.released);
      out.psnr = analytic::psnr(p.x, inv.x, config.psnr_max_val);
      return out;
    }
    config.seed = p.seed;
    out.psnr = *attacks::run_attack(config, p.released, *p.net, p.x).psnr;
  } catch (const std::exception& e) {
    out.failed = true;
    out.error = e.what();
  }
  return out;
}

// 13 decade points 1e-7 ... 1e5.
inline std::vector<double> beta_grid() {
  std::vector<double> g;
  for (int e = -7; e <= 5; ++e) g.push_back(std::pow(10.0, e));
  return g;
}

struct BetaCalibration {
  double beta_star = 0.0;
  double range_lo = 0.0;
  double range_hi = 0.0;
  std::vector<double> betas;
  std::vector<double> mean_psnr;  // -inf where every probe failed
};

// Sweeps beta over the decade grid with every other attack parameter fixed
// and keeps the beta with the highest mean PSNR (ties: smallest beta).
inline BetaCalibration calibrate_beta(const attacks::AttackConfig& tmpl,
                                      std::span<const AttackProblem> probes,
                                      std::size_t jobs = 1) {
  if (probes.empty()) throw ConfigError("calibrate_beta: probe set is empty");
  BetaCalibration cal;
  cal.betas = beta_grid();
  const std::size_t nb = cal.betas.size(), np = probes.size();
  std::vector<AttackOutcome> runs(nb * np);
  parallel_for(nb * np, jobs, [&](std::size_t i) {
    attacks::AttackConfig c = tmpl;
    c.beta = cal.betas[i / np];
    runs[i] = run_problem(c, probes[i % np]);
  });
  double best = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t b = 0; b < nb; ++b) {
    std::vector<double> ps;
    for (std::size_t p = 0; p < np; ++p) {
      if (!runs[b * np + p].failed) ps.push_back(runs[b * np + p].psnr);
    }
    const double m = ps.size() == np ? mean_of(ps)
                                     : -std::numeric_limits<double>::infinity();
    cal.mean_psnr.push_back(m);
    if (ps.size() == np && (!any || m > best)) {
      any = true;
      best = m;
      cal.beta_star = cal.betas[b];
    }
  }
  if (!any) throw Error("calibrate_beta: every beta value failed on the probe set");
  cal.range_lo = 0.5 * cal.beta_star;
  cal.range_hi = 2.0 * cal.beta_star;
  return cal;
}

// ---- experiment grid ----

struct ExperimentGrid {
  std::vector<double> lr{0.1};
  std::vector<double> lr_decay{0.99};
  // Grid betas are beta_star * factor; used when calibration is on.
  std::vector<double> beta_factors{0.5, 1.0, 2.0};
  std::vector<double> bayes_beta_factors{0.5, 1.0, 2.0};
  // Explicit betas, used when calibration is off.
  std::vector<double> beta{1e-2};
  bool calibrate = true;
  std::size_t probe_count = 5;
  // Layer weighting is searched for the l2, l1 and cosine attacks only.
  std::vector<bool> layer_weighting{false, true};
  double layer_weight_gamma = std::exp(1.0);

  void validate() const {
    if (lr.empty() || lr_decay.empty() || layer_weighting.empty()) {
      throw ConfigError("grid: every axis needs at least one value");
    }
    if (calibrate && (beta_factors.empty() || bayes_beta_factors.empty())) {
      throw ConfigError("grid: beta factor axes must be nonempty");
    }
    if (!calibrate && beta.empty()) throw ConfigError("grid: beta axis is empty");
    if (calibrate && probe_count < 1) throw ConfigError("grid: probe_count >= 1");
    for (double v : lr) {
      if (!(v > 0)) throw ConfigError("grid: lr values must be > 0");
    }
    for (double v : lr_decay) {
      if (!(v > 0 && v <= 1)) throw ConfigError("grid: lr_decay values in (0, 1]");
    }
  }

  std::size_t beta_count(bool bayes) const {
    if (!calibrate) return beta.size();
    return bayes ? bayes_beta_factors.size() : beta_factors.size();
  }

  std::size_t combinations(bool bayes) const {
    return lr.size() * lr_decay.size() * beta_count(bayes) *
           (bayes ? 1 : layer_weighting.size());
  }
};

namespace detail {

inline std::vector<double> geometric(double lo, double hi, std::size_t n) {
  if (n == 1) return {std::sqrt(lo * hi)};
  std::vector<double> v;
  for (std::size_t i = 0; i < n; ++i) {
    v.push_back(lo * std::pow(hi / lo, static_cast<double>(i) /
                                           static_cast<double>(n - 1)));
  }
  return v;
}

}  // namespace detail

// "table2-desk": a small grid for single-machine runs. "paper": 480 combinations
// for l2/l1/cosine and 540 for bayes.
inline ExperimentGrid grid_preset(const std::string& name) {
  ExperimentGrid g;
  if (name == "table2-desk") {
    g.lr = {0.03, 0.1};
    g.lr_decay = {0.99};
    g.beta_factors = {0.5, 1.0, 2.0};
    g.bayes_beta_factors = {0.5, 1.0, 2.0};
    g.layer_weighting = {false, true};
    g.probe_count = 3;
    return g;
  }
  if (name == "paper") {
    g.lr = {0.01, 0.03, 0.1, 0.3};
    g.lr_decay = {0.95, 0.97, 0.98, 0.99, 1.0};
    g.beta_factors = detail::geometric(0.5, 2.0, 12);
    g.bayes_beta_factors = detail::geometric(0.5, 2.0, 27);
    g.layer_weighting = {false, true};
    g.probe_count = 10;
    return g;
  }
  throw ConfigError("unknown grid preset \"" + name + "\"");
}

inline Json to_json(const ExperimentGrid& g) {
  Json j;
  j["lr"] = g.lr;
  j["lr_decay"] = g.lr_decay;
  j["beta_factors"] = g.beta_factors;
  j["bayes_beta_factors"] = g.bayes_beta_factors;
  j["beta"] = g.beta;
  j["calibrate"] = g.calibrate;
  j["probe_count"] = g.probe_count;
  j["layer_weighting"] = g.layer_weighting;
  j["layer_weight_gamma"] = g.layer_weight_gamma;
  return j;
}

inline ExperimentGrid grid_from_json(const Json& j) {
  require_known_keys(j,
                     {"preset", "lr", "lr_decay", "beta_factors",
                      "bayes_beta_factors", "beta", "calibrate", "probe_count",
                      "layer_weighting", "layer_weight_gamma"},
                     "grid");
  ExperimentGrid g;
  try {
    if (j.contains("preset")) g = grid_preset(j.at("preset").get<std::string>());
    if (j.contains("lr")) g.lr = j.at("lr").get<std::vector<double>>();
    if (j.contains("lr_decay")) g.lr_decay = j.at("lr_decay").get<std::vector<double>>();
    if (j.contains("beta_factors")) {
      g.beta_factors = j.at("beta_factors").get<std::vector<double>>();
    }
    if (j.contains("bayes_beta_factors")) {
      g.bayes_beta_factors = j.at("bayes_beta_factors").get<std::vector<double>>();
    }
    if (j.contains("beta")) g.beta = j.at("beta").get<std::vector<double>>();
    if (j.contains("calibrate")) g.calibrate = j.at("calibrate").get<bool>();
    if (j.contains("probe_count")) g.probe_count = j.at("probe_count").get<std::size_t>();
    if (j.contains("layer_weighting")) {
      g.layer_weighting = j.at("layer_weighting").get<std::vector<bool>>();
    }
    if (j.contains("layer_weight_gamma")) {
      g.layer_weight_gamma = j.at("layer_weight_gamma").get<double>();
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("grid: ") + e.what());
  }
  g.validate();
  return g;
}

// ---- attack x defense matrix ----

struct AttackEntry {
  std::string name;
  attacks::AttackConfig config;  // lr, lr_decay, beta and weighting come from the grid
};

struct DefenseEntry {
  std::string name;
  defenses::DefenseMechanism defense;
};

struct CheckpointEntry {
  std::size_t train_step = 0;
  models::Network net;
};

struct MatrixOptions {
  std::string dataset_name = "digits8x8";
  std::size_t n = 10;  // examples per cell: the first n of the dataset
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

struct ResultRow {
  std::string dataset, defense, attack;
  std::size_t train_step = 0;
  double mean_psnr = std::numeric_limits<double>::quiet_NaN();
  std::size_t n = 0;
  std::size_t failures = 0;
  std::string failure_reason;  // empty when the cell succeeded
  // Winning grid point.
  double lr = 0.0, lr_decay = 0.0, beta = 0.0;
  bool layer_weighting = false;
  std::optional<double> beta_star;
};

struct RunRecord {
  std::string phase;  // "calibration" or "grid"
  std::string dataset, defense, attack;
  std::size_t train_step = 0;
  std::size_t example = 0;
  double lr = 0.0, lr_decay = 0.0, beta = 0.0;
  bool layer_weighting = false;
  AttackOutcome outcome;
};

struct ResultTable {
  std::vector<ResultRow> rows;
  std::vector<RunRecord> records;
};

namespace detail {

struct GridPoint {
  double lr, lr_decay, beta;
  bool weighting;
};

// Lexicographic in (lr, lr_decay, beta, weighting), each ascending, so the
// first maximum is the smallest-parameter tie-break.
inline std::vector<GridPoint> expand_grid(const ExperimentGrid& g, bool bayes,
                                          std::optional<double> beta_star) {
  auto sorted = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  std::vector<double> betas;
  if (beta_star) {
    for (double f : sorted(bayes ? g.bayes_beta_factors : g.beta_factors)) {
      betas.push_back(*beta_star * f);
    }
  } else {
    betas = sorted(g.beta);
  }
  std::vector<bool> weightings{false};
  if (!bayes) {
    weightings.clear();
    if (std::find(g.layer_weighting.begin(), g.layer_weighting.end(), false) !=
        g.layer_weighting.end()) {
      weightings.push_back(false);
    }
    if (std::find(g.layer_weighting.begin(), g.layer_weighting.end(), true) !=
        g.layer_weighting.end()) {
      weightings.push_back(true);
    }
  }
  std::vector<GridPoint> out;
  for (double lr : sorted(g.lr)) {
    for (double d : sorted(g.lr_decay)) {
      for (double b : betas) {
        for (bool w : weightings) out.push_back({lr, d, b, w});
      }
    }
  }
  return out;
}

inline attacks::AttackConfig apply_point(attacks::AttackConfig c, const GridPoint& p,
                                         double gamma) {
  c.lr = p.lr;
  c.lr_decay = p.lr_decay;
  c.beta = p.beta;
  c.layer_weight_gamma =
      p.weighting ? std::optional<double>(gamma) : std::nullopt;
  return c;
}

}  // namespace detail

// Released gradient of example i under defense d at checkpoint c. Every attack
// sees the same gradients and the same initialization seed.
inline AttackProblem matrix_problem(const MatrixOptions& opt, std::size_t d,
                                    const DefenseEntry& defense, std::size_t c,
                                    const CheckpointEntry& ckpt,
                                    const data::ImageDataset& ds, std::size_t i) {
  const std::uint64_t s =
      derive_seed(derive_seed(derive_seed(opt.seed, d), c), i);
  const models::LabeledExample ex = ds.example(i);
  const auto lg = models::loss_and_param_grad(ckpt.net.spec, ckpt.net.state, ex);
  AttackProblem p;
  p.net = &ckpt.net;
  p.released = defenses::sample(defense.defense, lg.grad, ckpt.net.state.segments,
                                derive_seed(s, 0));
  p.x = ex.x;
  p.seed = derive_seed(s, 1);
  return p;
}

// For every (defense, attack, checkpoint) cell: calibrate beta on the first
// probe_count examples, run every grid point on the first n examples and
// keep the best mean PSNR. Rows come out in (defense, attack, checkpoint)
// input order.
inline ResultTable run_matrix(const ExperimentGrid& grid,
                              std::span<const AttackEntry> attack_list,
                              std::span<const DefenseEntry> defense_list,
                              std::span<const CheckpointEntry> checkpoints,
                              const data::ImageDataset& ds,
                              const MatrixOptions& opt) {
  grid.validate();
  ResultTable table;
  if (attack_list.empty() || defense_list.empty() || checkpoints.empty()) {
    return table;
  }
  if (opt.n < 1) throw ConfigError("matrix: n must be >= 1");
  if (opt.n > ds.size()) {
    throw ConfigError("matrix: n exceeds the dataset size");
  }
  for (const auto& a : attack_list) a.config.validate();
  for (const auto& d : defense_list) d.defense.validate();

  // Problems per (defense, checkpoint).
  const std::size_t nd = defense_list.size(), nc = checkpoints.size();
  std::vector<std::vector<AttackProblem>> problems(nd * nc);
  parallel_for(nd * nc, opt.jobs, [&](std::size_t k) {
    const std::size_t d = k / nc, c = k % nc;
    for (std::size_t i = 0; i < opt.n; ++i) {
      problems[k].push_back(matrix_problem(opt, d, defense_list[d], c,
                                           checkpoints[c], ds, i));
    }
  });

  struct Cell {
    std::size_t d, a, c;
    std::optional<double> beta_star;
    std::string calibration_error;
    std::vector<detail::GridPoint> points;
  };
  std::vector<Cell> cells;
  for (std::size_t d = 0; d < nd; ++d) {
    for (std::size_t a = 0; a < attack_list.size(); ++a) {
      for (std::size_t c = 0; c < nc; ++c) cells.push_back({d, a, c, {}, {}, {}});
    }
  }
  auto uses_prior = [](const attacks::AttackConfig& c) {
    return c.prior.kind != priors::PriorKind::kUniform;
  };
  auto is_analytic = [&](const Cell& cell) {
    const auto& c = attack_list[cell.a].config;
    return c.conditional == attacks::ConditionalKind::kBayes && !c.assumed_defense &&
           defense_list[cell.d].defense.kind == defenses::DefenseKind::kNone;
  };

  // Phase 1: beta calibration.
  struct CalRun {
    std::size_t cell, beta_index, example;
  };
  std::vector<CalRun> cal_runs;
  const auto betas = beta_grid();
  const std::size_t probes = std::min(grid.probe_count, opt.n);
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const auto& cfg = attack_list[cells[k].a].config;
    if (!grid.calibrate || is_analytic(cells[k])) continue;
    if (!uses_prior(cfg)) {
      cells[k].beta_star = betas.front();
      continue;
    }
    for (std::size_t b = 0; b < betas.size(); ++b) {
      for (std::size_t i = 0; i < probes; ++i) cal_runs.push_back({k, b, i});
    }
  }
  std::vector<AttackOutcome> cal_out(cal_runs.size());
  parallel_for(cal_runs.size(), opt.jobs, [&](std::size_t r) {
    const auto& run = cal_runs[r];
    const Cell& cell = cells[run.cell];
    attacks::AttackConfig c = attack_list[cell.a].config;
    c.beta = betas[run.beta_index];
    cal_out[r] = run_problem(c, problems[cell.d * nc + cell.c][run.example]);
  });
  for (std::size_t r = 0; r < cal_runs.size();) {
    const std::size_t k = cal_runs[r].cell;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b < betas.size(); ++b) {
      bool ok = true;
      std::vector<double> ps;
      for (std::size_t i = 0; i < probes; ++i, ++r) {
        const auto& o = cal_out[r];
        ok = ok && !o.failed;
        if (!o.failed) ps.push_back(o.psnr);
        if (o.failed && cells[k].calibration_error.empty()) {
          cells[k].calibration_error = o.error;
        }
      }
      if (ok && (!cells[k].beta_star || mean_of(ps) > best)) {
        best = mean_of(ps);
        cells[k].beta_star = betas[b];
      }
    }
  }

  // Phase 2: grid.
  struct GridRun {
    std::size_t cell, point, example;
  };
  std::vector<GridRun> grid_runs;
  for (std::size_t k = 0; k < cells.size(); ++k) {
    Cell& cell = cells[k];
    const auto& cfg = attack_list[cell.a].config;
    const bool bayes = cfg.conditional == attacks::ConditionalKind::kBayes;
    if (is_analytic(cell)) {
      cell.points = {{0.0, 0.0, 0.0, false}};
    } else if (grid.calibrate) {
      if (!cell.beta_star) continue;  // calibration failed
      cell.points = detail::expand_grid(grid, bayes, cell.beta_star);
    } else {
      cell.points = detail::expand_grid(grid, bayes, std::nullopt);
    }
    for (std::size_t p = 0; p < cell.points.size(); ++p) {
      for (std::size_t i = 0; i < opt.n; ++i) grid_runs.push_back({k, p, i});
    }
  }
  std::vector<AttackOutcome> grid_out(grid_runs.size());
  parallel_for(grid_runs.size(), opt.jobs, [&](std::size_t r) {
    const auto& run = grid_runs[r];
    const Cell& cell = cells[run.cell];
    const auto c = detail::apply_point(attack_list[cell.a].config,
                                       cell.points[run.point],
                                       grid.layer_weight_gamma);
    grid_out[r] = run_problem(c, problems[cell.d * nc + cell.c][run.example]);
  });

  // Aggregate in cell order.
  std::size_t r = 0;
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const Cell& cell = cells[k];
    ResultRow row;
    row.dataset = opt.dataset_name;
    row.defense = defense_list[cell.d].name;
    row.attack = attack_list[cell.a].name;
    row.train_step = checkpoints[cell.c].train_step;
    row.n = opt.n;
    row.beta_star = cell.beta_star;
    if (cell.points.empty()) {
      row.failures = opt.n;
      row.failure_reason = "beta calibration failed: " + cell.calibration_error;
    }
    bool found = false;
    std::size_t fewest = opt.n;
    std::string first_error;
    for (std::size_t p = 0; p < cell.points.size(); ++p) {
      std::vector<double> ps;
      std::size_t fails = 0;
      for (std::size_t i = 0; i < opt.n; ++i, ++r) {
        const auto& o = grid_out[r];
        if (o.failed) {
          ++fails;
          if (first_error.empty()) first_error = o.error;
        } else {
          ps.push_back(o.psnr);
        }
        const auto& pt = cell.points[p];
        table.records.push_back({"grid", row.dataset, row.defense, row.attack,
                                 row.train_step, i, pt.lr, pt.lr_decay, pt.beta,
                                 pt.weighting, o});
      }
      fewest = std::min(fewest, fails);
      if (fails > 0) continue;
      const double m = mean_of(ps);
      if (!found || m > row.mean_psnr) {
        found = true;
        row.mean_psnr = m;
        row.lr = cell.points[p].lr;
        row.lr_decay = cell.points[p].lr_decay;
        row.beta = cell.points[p].beta;
        row.layer_weighting = cell.points[p].weighting;
      }
    }
    if (!found && !cell.points.empty()) {
      row.failures = fewest;
      row.failure_reason = "every grid point had failed runs: " + first_error;
    }
    table.rows.push_back(std::move(row));
  }

  // Calibration records, appended after the grid records in run order.
  for (std::size_t i = 0; i < cal_runs.size(); ++i) {
    const auto& run = cal_runs[i];
    const Cell& cell = cells[run.cell];
    table.records.push_back({"calibration", opt.dataset_name,
                             defense_list[cell.d].name, attack_list[cell.a].name,
                             checkpoints[cell.c].train_step, run.example,
                             attack_list[cell.a].config.lr,
                             attack_list[cell.a].config.lr_decay,
                             betas[run.beta_index], false, cal_out[i]});
  }
  return table;
}

inline constexpr const char* kResultCsvHeader =
    "dataset,defense,attack,train_step,mean_psnr,n,failures";

inline std::string result_csv(const ResultTable& t) {
  std::string out = std::string(kResultCsvHeader) + "\n";
  for (const auto& r : t.rows) {
    out += r.dataset + "," + r.defense + "," + r.attack + "," +
           std::to_string(r.train_step) + "," + format_double(r.mean_psnr) + "," +
           std::to_string(r.n) + "," + std::to_string(r.failures) + "\n";
  }
  return out;
}

inline Json to_json(const ResultRow& r) {
  Json j;
  j["dataset"] = r.dataset;
  j["defense"] = r.defense;
  j["attack"] = r.attack;
  j["train_step"] = r.train_step;
  j["mean_psnr"] = json_number(r.mean_psnr);
  j["n"] = r.n;
  j["failures"] = r.failures;
  if (!r.failure_reason.empty()) j["failure_reason"] = r.failure_reason;
  j["best"] = {{"lr", r.lr},
               {"lr_decay", r.lr_decay},
               {"beta", r.beta},
               {"layer_weighting", r.layer_weighting}};
  if (r.beta_star) j["beta_star"] = *r.beta_star;
  return j;
}

inline Json result_json(const ResultTable& t) {
  Json rows = Json::array();
  for (const auto& r : t.rows) rows.push_back(to_json(r));
  return rows;
}

inline std::string records_jsonl(const ResultTable& t) {
  std::string out;
  for (const auto& r : t.records) {
    Json j;
    j["phase"] = r.phase;
    j["dataset"] = r.dataset;
    j["defense"] = r.defense;
    j["attack"] = r.attack;
    j["train_step"] = r.train_step;
    j["example"] = r.example;
    j["lr"] = r.lr;
    j["lr_decay"] = r.lr_decay;
    j["beta"] = r.beta;
    j["layer_weighting"] = r.layer_weighting;
    if (r.outcome.failed) {
      j["failed"] = true;
      j["error"] = r.outcome.error;
    } else {
      j["psnr"] = json_number(r.outcome.psnr);
    }
    out += dump_json(j, -1) + "\n";
  }
  return out;
}

// ---- synthetic prior/conditional ablation ----

struct SyntheticAblationConfig {
  std::uint64_t seed = 0;
  std::size_t steps = 200;
  std::size_t trials = 300;
  std::size_t dim = 20;
  std::size_t classes = 10;
  std::size_t hidden = 30;
  double noise_b = 0.1;  // Laplacian defense scale
  double lr = 0.05;
  double lr_decay = 0.99;
  double beta = 1.0;
  std::size_t jobs = 1;

  void validate() const {
    if (trials < 1) throw ConfigError("synth-ablation: trials must be >= 1");
    if (steps < 1) throw ConfigError("synth-ablation: steps must be >= 1");
    if (hidden < 1) throw ConfigError("synth-ablation: hidden must be >= 1");
    if (!(noise_b > 0)) throw ConfigError("synth-ablation: noise_b must be > 0");
  }
};

struct VariantTrace {
  std::string name;
  priors::PriorKind prior = priors::PriorKind::kGaussianUnit;
  defenses::DefenseKind conditional = defenses::DefenseKind::kLaplacian;
  std::vector<double> mean_distance;    // per step
  std::vector<double> stderr_distance;  // per step
  std::vector<double> final_distance;   // per trial
};

struct SyntheticAblationResult {
  std::vector<VariantTrace> variants;  // [0] is the matched variant
};

// The four {Gaussian, Laplacian} prior x conditional attacks against a
// Laplacian-defended 2-layer MLP on N(0, I) inputs. The Gaussian conditional
// has the variance of the true Laplacian noise (sigma = sqrt(2) b). Variants
// share the released gradient and the initialization in each trial.
inline SyntheticAblationResult synthetic_ablation(const SyntheticAblationConfig& cfg) {
  cfg.validate();
  const auto task = data::make_synthetic_task(derive_seed(cfg.seed, 0), cfg.dim,
                                              cfg.classes);
  const models::NetworkSpec spec{{cfg.dim, cfg.hidden, cfg.classes},
                                 derive_seed(cfg.seed, 1)};
  const models::Network net{spec, models::init_parameters(spec)};
  const auto defense = defenses::DefenseMechanism::laplacian(cfg.noise_b);

  struct Variant {
    const char* name;
    priors::PriorSpec prior;
    defenses::DefenseMechanism conditional;
  };
  const auto gauss = defenses::DefenseMechanism::gaussian(std::sqrt(2.0) * cfg.noise_b);
  const std::vector<Variant> variants{
      {"gaussian_prior-laplacian_cond", priors::PriorSpec::gaussian_unit(), defense},
      {"gaussian_prior-gaussian_cond", priors::PriorSpec::gaussian_unit(), gauss},
      {"laplacian_prior-laplacian_cond", priors::PriorSpec::laplacian_unit(), defense},
      {"laplacian_prior-gaussian_cond", priors::PriorSpec::laplacian_unit(), gauss},
  };
  const std::size_t nv = variants.size();
  std::vector<std::vector<double>> traces(cfg.trials * nv);
  parallel_for(cfg.trials, cfg.jobs, [&](std::size_t t) {
    const std::uint64_t s = derive_seed(derive_seed(cfg.seed, 2), t);
    Rng rng(derive_seed(s, 0));
    const auto ex = data::sample_synthetic(task, rng);
    const auto lg = models::loss_and_param_grad(spec, net.state, ex);
    const auto released =
        defenses::sample(defense, lg.grad, net.state.segments, derive_seed(s, 1));
    for (std::size_t v = 0; v < nv; ++v) {
      attacks::AttackConfig c;
      c.steps = cfg.steps;
      c.lr = cfg.lr;
      c.lr_decay = cfg.lr_decay;
      c.beta = cfg.beta;
      c.conditional = attacks::ConditionalKind::kBayes;
      c.assumed_defense = variants[v].conditional;
      c.prior = variants[v].prior;
      c.label = ex.y;
      c.seed = derive_seed(s, 2);
      traces[t * nv + v] = attacks::run_attack(c, released, net, ex.x).distance_trace;
    }
  });
  SyntheticAblationResult res;
  for (std::size_t v = 0; v < nv; ++v) {
    VariantTrace vt;
    vt.name = variants[v].name;
    vt.prior = variants[v].prior.kind;
    vt.conditional = variants[v].conditional.kind;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
      std::vector<double> col;
      for (std::size_t t = 0; t < cfg.trials; ++t) {
        col.push_back(traces[t * nv + v][step]);
      }
      vt.mean_distance.push_back(mean_of(col));
      vt.stderr_distance.push_back(standard_error(col));
    }
    for (std::size_t t = 0; t < cfg.trials; ++t) {
      vt.final_distance.push_back(traces[t * nv + v].back());
    }
    res.variants.push_back(std::move(vt));
  }
  return res;
}

inline std::string trace_csv(std::span<const double> mean,
                             std::span<const double> stderr_values,
                             const std::string& value_name) {
  std::string out = "step," + value_name + ",stderr\n";
  for (std::size_t i = 0; i < mean.size(); ++i) {
    out += std::to_string(i) + "," + format_double(mean[i]) + "," +
           format_double(stderr_values[i]) + "\n";
  }
  return out;
}

// ---- Monte Carlo sample-count ablation ----

struct McAblationConfig {
  std::uint64_t seed = 0;
  std::vector<std::size_t> k_values{1, 4, 16};
  std::size_t trials = 20;
  std::size_t steps = 200;
  double sigma = 0.1;
  double delta = 9.0;
  double lr = 0.1;
  double lr_decay = 0.99;
  double beta = 1.0;  // used as is when calibrate is off
  bool calibrate = true;
  std::size_t probe_count = 5;
  std::size_t hidden = 32;
  std::size_t jobs = 1;

  void validate() const {
    if (calibrate && probe_count < 1) {
      throw ConfigError("mc-ablation: probe_count must be >= 1");
    }
    if (k_values.empty()) throw ConfigError("mc-ablation: k_values is empty");
    if (!std::is_sorted(k_values.begin(), k_values.end())) {
      throw ConfigError("mc-ablation: k_values must be sorted ascending");
    }
    for (std::size_t k : k_values) {
      if (k < 1) throw ConfigError("mc-ablation: k must be >= 1");
    }
    if (trials < 1) throw ConfigError("mc-ablation: trials must be >= 1");
    if (steps < 1) throw ConfigError("mc-ablation: steps must be >= 1");
    if (!(sigma > 0)) throw ConfigError("mc-ablation: sigma must be > 0");
    if (!(delta >= 0)) throw ConfigError("mc-ablation: delta must be >= 0");
  }
};

struct McCurve {
  std::size_t k = 1;
  std::vector<double> mean_psnr;    // per step
  std::vector<double> stderr_psnr;  // per step
  std::vector<double> final_psnr;   // per trial
};

struct McAblationResult {
  double beta = 0.0;
  std::optional<BetaCalibration> calibration;
  std::vector<McCurve> curves;
};

// Bayes attack with a TV prior against Gaussian noise on the first `trials`
// images, once per k. All k values share the released gradient, the
// initialization and the attack seed of a trial. With calibration on, beta
// comes from a decade sweep at the smallest k on the next probe_count images.
inline McAblationResult mc_ablation(const McAblationConfig& cfg,
                                    const data::ImageDataset& ds) {
  cfg.validate();
  const std::size_t needed = cfg.trials + (cfg.calibrate ? cfg.probe_count : 0);
  if (ds.size() < needed) {
    throw ConfigError("mc-ablation: dataset has fewer images than trials + probes");
  }
  const std::size_t dim = ds.height * ds.width;
  const models::NetworkSpec spec{{dim, cfg.hidden, ds.num_classes},
                                 derive_seed(cfg.seed, 0)};
  const models::Network net{spec, models::init_parameters(spec)};
  const auto defense = defenses::DefenseMechanism::gaussian(cfg.sigma);
  const std::size_t nk = cfg.k_values.size();
  attacks::AttackConfig base;
  base.delta = cfg.delta;
  base.steps = cfg.steps;
  base.lr = cfg.lr;
  base.lr_decay = cfg.lr_decay;
  base.beta = cfg.beta;
  base.conditional = attacks::ConditionalKind::kBayes;
  base.prior = priors::PriorSpec::tv(ds.height, ds.width);
  base.psnr_max_val = ds.psnr_max_val();

  McAblationResult res;
  if (cfg.calibrate) {
    std::vector<AttackProblem> probes;
    for (std::size_t p = 0; p < cfg.probe_count; ++p) {
      const std::uint64_t s = derive_seed(derive_seed(cfg.seed, 2), p);
      const auto ex = ds.example(cfg.trials + p);
      const auto lg = models::loss_and_param_grad(spec, net.state, ex);
      probes.push_back({&net,
                        defenses::sample(defense, lg.grad, net.state.segments,
                                         derive_seed(s, 0)),
                        ex.x, derive_seed(s, 1)});
    }
    attacks::AttackConfig tmpl = base;
    tmpl.k = cfg.k_values.front();
    res.calibration = calibrate_beta(tmpl, probes, cfg.jobs);
    base.beta = res.calibration->beta_star;
  }
  res.beta = base.beta;
  std::vector<std::vector<double>> traces(cfg.trials * nk);
  parallel_for(cfg.trials * nk, cfg.jobs, [&](std::size_t item) {
    const std::size_t t = item / nk, kk = item % nk;
    const std::uint64_t s = derive_seed(derive_seed(cfg.seed, 1), t);
    const auto ex = ds.example(t);
    const auto lg = models::loss_and_param_grad(spec, net.state, ex);
    const auto released =
        defenses::sample(defense, lg.grad, net.state.segments, derive_seed(s, 0));
    attacks::AttackConfig c = base;
    c.k = cfg.k_values[kk];
    c.seed = derive_seed(s, 1);
    const auto r = attacks::run_attack(c, released, net, ex.x);
    std::vector<double> ps;
    for (double d : r.distance_trace) {
      ps.push_back(psnr_from_distance(d, dim, ds.psnr_max_val()));
    }
    traces[item] = std::move(ps);
  });
  std::vector<McCurve>& curves = res.curves;
  for (std::size_t kk = 0; kk < nk; ++kk) {
    McCurve curve;
    curve.k = cfg.k_values[kk];
    for (std::size_t step = 0; step < cfg.steps; ++step) {
      std::vector<double> col;
      for (std::size_t t = 0; t < cfg.trials; ++t) {
        col.push_back(traces[t * nk + kk][step]);
      }
      curve.mean_psnr.push_back(mean_of(col));
      curve.stderr_psnr.push_back(standard_error(col));
    }
    for (std::size_t t = 0; t < cfg.trials; ++t) {
      curve.final_psnr.push_back(traces[t * nk + kk].back());
    }
    curves.push_back(std::move(curve));
  }
  return res;
}

}  // namespace gradleak::eval
