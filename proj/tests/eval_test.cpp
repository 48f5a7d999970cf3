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

#include "gradleak/eval.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace gradleak::eval {
namespace {

using defenses::DefenseMechanism;

models::Network small_net(std::vector<std::size_t> sizes, std::uint64_t seed) {
  models::NetworkSpec spec{std::move(sizes), seed};
  return {spec, models::init_parameters(spec)};
}

data::ImageDataset digits(std::size_t n) {
  return data::load_idx(GRADLEAK_DATA_DIR "/digits8x8-images.idx3-ubyte",
                        GRADLEAK_DATA_DIR "/digits8x8-labels.idx1-ubyte", n);
}

TEST(ParallelFor, VisitsEveryIndexOnce) {
  std::vector<std::atomic<int>> hits(1000);
  parallel_for(1000, 4, [&](std::size_t i) { ++hits[i]; });
  for (auto& h : hits) EXPECT_EQ(h.load(), 1);
  parallel_for(0, 4, [&](std::size_t) { FAIL(); });
}

TEST(ParallelFor, RethrowsWorkerException) {
  EXPECT_THROW(parallel_for(100, 3,
                            [](std::size_t i) {
                              if (i == 37) throw std::runtime_error("boom");
                            }),
               std::runtime_error);
}

TEST(Stats, MeanAndStandardError) {
  const std::vector<double> v{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(mean_of(v), 2.5);
  EXPECT_DOUBLE_EQ(standard_error(v), std::sqrt(5.0 / 3.0 / 4.0));
  EXPECT_EQ(psnr_from_distance(0.0, 4), std::numeric_limits<double>::infinity());
  // distance 0.2 over 4 values: MSE 0.01
  EXPECT_NEAR(psnr_from_distance(0.2, 4), 20.0, 1e-12);
}

TEST(Risk, AnalyticAttackerWithoutDefenseNeverMisses) {
  const auto net = small_net({20, 16, 10}, 1);
  const auto task = data::make_synthetic_task(2);
  const std::vector<double> deltas{1e-9, 1e-3, 0.5, 10.0};
  for (const auto& r : risk_curve(analytic_attacker(), DefenseMechanism::none(), net,
                                  synthetic_sampler(task), deltas, 100, 3)) {
    EXPECT_EQ(r.risk, 0.0) << r.delta;
    EXPECT_EQ(r.std_error, 0.0);
  }
}

TEST(Risk, ConstantAttackerAlwaysMisses) {
  const auto net = small_net({20, 16, 10}, 1);
  const auto task = data::make_synthetic_task(2);
  const auto r = estimate_risk(constant_attacker(Tensor::filled({20}, 100.0)),
                               DefenseMechanism::gaussian(0.1), net,
                               synthetic_sampler(task), 0.1, 50, 4);
  EXPECT_EQ(r.risk, 1.0);
  EXPECT_EQ(r.trials, 50u);
}

TEST(Risk, MonotoneInRadius) {
  const auto net = small_net({20, 16, 10}, 5);
  const auto task = data::make_synthetic_task(6);
  attacks::AttackConfig c;
  c.steps = 30;
  c.conditional = attacks::ConditionalKind::kBayes;
  std::vector<double> deltas;
  for (int i = 0; i <= 20; ++i) deltas.push_back(0.5 * i);
  const auto curve = risk_curve(optimization_attacker(c), DefenseMechanism::gaussian(0.5),
                                net, synthetic_sampler(task), deltas, 30, 7, 2);
  for (std::size_t i = 1; i < curve.size(); ++i) {
    EXPECT_LE(curve[i].risk, curve[i - 1].risk);
  }
  EXPECT_GT(curve.front().risk, curve.back().risk);
}

TEST(Risk, EstimatorInvariants) {
  const auto net = small_net({20, 16, 10}, 5);
  const auto task = data::make_synthetic_task(6);
  const auto trials = risk_trials(analytic_attacker(), DefenseMechanism::gaussian(0.3),
                                  net, synthetic_sampler(task), 40, 8);
  const auto r = summarize_risk(trials, 1.0);
  std::size_t misses = 0;
  for (const auto& t : trials) misses += t.distance > 1.0;
  EXPECT_DOUBLE_EQ(r.risk, static_cast<double>(misses) / 40.0);
  EXPECT_DOUBLE_EQ(r.std_error, std::sqrt(r.risk * (1 - r.risk) / 40.0));
  EXPECT_GE(r.risk, 0.0);
  EXPECT_LE(r.risk, 1.0);
}

TEST(Risk, FailedAttackCountsAsLoss) {
  const auto net = small_net({20, 16, 10}, 1);
  const auto task = data::make_synthetic_task(2);
  int calls = 0;
  const Attacker flaky = [&](const defenses::ReleasedGradient& g, const models::Network&,
                             std::uint64_t) -> Tensor {
    if (++calls % 2 == 0) throw Error("attacker gave up");
    return analytic::invert_released(g).x;
  };
  const auto r = estimate_risk(flaky, DefenseMechanism::none(), net,
                               synthetic_sampler(task), 1.0, 10, 9);
  EXPECT_EQ(r.attacker_failures, 5u);
  EXPECT_DOUBLE_EQ(r.risk, 0.5);
}

TEST(Risk, IndependentOfThreadCount) {
  const auto net = small_net({20, 16, 10}, 3);
  const auto task = data::make_synthetic_task(4);
  attacks::AttackConfig c;
  c.steps = 10;
  const auto a = risk_trials(optimization_attacker(c), DefenseMechanism::laplacian(0.1),
                             net, synthetic_sampler(task), 12, 5, 1);
  const auto b = risk_trials(optimization_attacker(c), DefenseMechanism::laplacian(0.1),
                             net, synthetic_sampler(task), 12, 5, 3);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].distance, b[i].distance);
}

TEST(Risk, HeavyNoiseDefeatsBayesAttacker) {
  const auto net = small_net({20, 30, 10}, 2);
  const auto task = data::make_synthetic_task(1);
  attacks::AttackConfig c;
  c.conditional = attacks::ConditionalKind::kBayes;
  c.prior = priors::PriorSpec::gaussian_unit();
  c.beta = 1.0;
  c.steps = 200;
  c.lr = 0.05;
  c.lr_decay = 0.99;
  const auto r = estimate_risk(optimization_attacker(c), DefenseMechanism::gaussian(10.0),
                               net, synthetic_sampler(task), 0.5, 50, 11, 2);
  EXPECT_GE(r.risk, 0.9);
}

TEST(Risk, RejectsBadArguments) {
  const auto net = small_net({20, 16, 10}, 1);
  const auto sampler = synthetic_sampler(data::make_synthetic_task(2));
  EXPECT_THROW(estimate_risk(analytic_attacker(), DefenseMechanism::none(), net, sampler,
                             0.1, 0, 1),
               ConfigError);
  EXPECT_THROW(estimate_risk(analytic_attacker(), DefenseMechanism::none(), net, sampler,
                             -1.0, 5, 1),
               ConfigError);
}

std::vector<AttackProblem> probes(const models::Network& net, const data::ImageDataset& ds,
                                  const DefenseMechanism& d, std::size_t n) {
  std::vector<AttackProblem> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto ex = ds.example(i);
    const auto g = models::loss_and_param_grad(net.spec, net.state, ex).grad;
    out.push_back({&net, defenses::sample(d, g, net.state.segments, i), ex.x, 100 + i});
  }
  return out;
}

TEST(CalibrateBeta, GridHasThirteenDecades) {
  const auto g = beta_grid();
  ASSERT_EQ(g.size(), 13u);
  EXPECT_DOUBLE_EQ(g.front(), 1e-7);
  EXPECT_DOUBLE_EQ(g.back(), 1e5);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_NEAR(g[i] / g[i - 1], 10.0, 1e-12);
}

TEST(CalibrateBeta, UniformPriorPicksSmallestBeta) {
  const auto net = small_net({64, 16, 10}, 3);
  const auto ds = digits(3);
  const auto p = probes(net, ds, DefenseMechanism::gaussian(0.1), 2);
  attacks::AttackConfig c;
  c.steps = 10;
  const auto cal = calibrate_beta(c, p);
  EXPECT_EQ(cal.beta_star, 1e-7);
  EXPECT_EQ(cal.range_lo, 0.5e-7);
  EXPECT_EQ(cal.range_hi, 2e-7);
  for (double m : cal.mean_psnr) EXPECT_EQ(m, cal.mean_psnr.front());
}

TEST(CalibrateBeta, RangeBracketsOptimum) {
  const auto net = small_net({64, 16, 10}, 3);
  const auto ds = digits(3);
  const auto p = probes(net, ds, DefenseMechanism::gaussian(0.1), 2);
  attacks::AttackConfig c;
  c.steps = 20;
  c.prior = priors::PriorSpec::tv(8, 8);
  const auto cal = calibrate_beta(c, p, 2);
  const auto best = std::max_element(cal.mean_psnr.begin(), cal.mean_psnr.end());
  EXPECT_EQ(cal.beta_star, cal.betas[best - cal.mean_psnr.begin()]);
  EXPECT_DOUBLE_EQ(cal.range_lo, 0.5 * cal.beta_star);
  EXPECT_DOUBLE_EQ(cal.range_hi, 2.0 * cal.beta_star);
}

TEST(CalibrateBeta, Errors) {
  attacks::AttackConfig c;
  EXPECT_THROW(calibrate_beta(c, {}), ConfigError);
  const auto net = small_net({64, 16, 10}, 3);
  const auto p = probes(net, digits(1), DefenseMechanism::gaussian(0.1), 1);
  c.init = attacks::InitKind::kProvided;
  c.init_x = Tensor::vector({1.0});  // wrong size: every run fails
  EXPECT_THROW(calibrate_beta(c, p), Error);
}

TEST(Grid, Presets) {
  const auto paper = grid_preset("paper");
  EXPECT_EQ(paper.combinations(false), 480u);
  EXPECT_EQ(paper.combinations(true), 540u);
  const auto desk = grid_preset("table2-desk");
  EXPECT_NO_THROW(desk.validate());
  EXPECT_THROW(grid_preset("huge"), ConfigError);
  const auto back = grid_from_json(to_json(paper));
  EXPECT_EQ(to_json(back), to_json(paper));
  EXPECT_THROW(grid_from_json(Json::parse(R"({"lrs":[0.1]})")), ConfigError);
  EXPECT_THROW(grid_from_json(Json::parse(R"({"lr":[]})")), ConfigError);
}

struct MatrixFixture {
  data::ImageDataset ds = digits(4);
  std::vector<CheckpointEntry> checkpoints;
  std::vector<AttackEntry> attacks;
  std::vector<DefenseEntry> defenses;
  ExperimentGrid grid;

  MatrixFixture() {
    const auto net = small_net({64, 16, 10}, 3);
    checkpoints.push_back({0, net});
    attacks::AttackConfig base;
    base.steps = 15;
    base.prior = priors::PriorSpec::tv(8, 8);
    auto bayes = base;
    bayes.conditional = attacks::ConditionalKind::kBayes;
    attacks.push_back({"bayes", bayes});
    attacks.push_back({"l2", base});
    defenses.push_back({"none", DefenseMechanism::none()});
    defenses.push_back({"prune_gaussian", DefenseMechanism::prune_gaussian(0.5, 0.1)});
    grid.lr = {0.1};
    grid.lr_decay = {0.99};
    grid.beta_factors = {1.0};
    grid.bayes_beta_factors = {1.0};
    grid.layer_weighting = {false};
    grid.probe_count = 1;
  }

  MatrixOptions options(std::size_t jobs) const {
    MatrixOptions o;
    o.n = 3;
    o.seed = 12;
    o.jobs = jobs;
    return o;
  }
};

TEST(Matrix, EmptyAttackListGivesEmptyTable) {
  MatrixFixture f;
  const auto t = run_matrix(f.grid, {}, f.defenses, f.checkpoints, f.ds, f.options(1));
  EXPECT_TRUE(t.rows.empty());
  EXPECT_EQ(result_csv(t), std::string(kResultCsvHeader) + "\n");
}

TEST(Matrix, FillsEveryCellReproducibly) {
  MatrixFixture f;
  const auto a = run_matrix(f.grid, f.attacks, f.defenses, f.checkpoints, f.ds, f.options(1));
  const auto b = run_matrix(f.grid, f.attacks, f.defenses, f.checkpoints, f.ds, f.options(3));
  ASSERT_EQ(a.rows.size(), 4u);
  EXPECT_EQ(result_csv(a), result_csv(b));
  EXPECT_EQ(dump_json(result_json(a)), dump_json(result_json(b)));
  EXPECT_EQ(records_jsonl(a), records_jsonl(b));
  EXPECT_EQ(result_csv(a).substr(0, result_csv(a).find('\n')),
            "dataset,defense,attack,train_step,mean_psnr,n,failures");
  // bayes against an undefended MLP goes through the exact inversion
  EXPECT_EQ(a.rows[0].defense, "none");
  EXPECT_EQ(a.rows[0].attack, "bayes");
  EXPECT_EQ(a.rows[0].mean_psnr, std::numeric_limits<double>::infinity());
  for (const auto& r : a.rows) {
    EXPECT_EQ(r.failures, 0u);
    EXPECT_EQ(r.n, 3u);
  }
}

TEST(Matrix, FailedCellIsMarkedAndTableStillEmitted) {
  MatrixFixture f;
  attacks::AttackConfig broken = f.attacks[1].config;
  broken.init = attacks::InitKind::kProvided;
  broken.init_x = Tensor::vector({0.0, 0.0});
  f.attacks.push_back({"broken", broken});
  f.grid.calibrate = false;
  const auto t = run_matrix(f.grid, f.attacks, f.defenses, f.checkpoints, f.ds, f.options(1));
  ASSERT_EQ(t.rows.size(), 6u);
  const auto& row = t.rows[2];
  EXPECT_EQ(row.attack, "broken");
  EXPECT_EQ(row.failures, 3u);
  EXPECT_TRUE(std::isnan(row.mean_psnr));
  EXPECT_NE(row.failure_reason.find("init_x"), std::string::npos) << row.failure_reason;
  EXPECT_EQ(t.rows[1].failures, 0u);
}

TEST(Matrix, RejectsOversizedN) {
  MatrixFixture f;
  MatrixOptions o = f.options(1);
  o.n = 5;
  EXPECT_THROW(run_matrix(f.grid, f.attacks, f.defenses, f.checkpoints, f.ds, o),
               ConfigError);
}

TEST(SyntheticAblation, TracesShareStartAndLength) {
  SyntheticAblationConfig c;
  c.steps = 12;
  c.trials = 3;
  c.jobs = 2;
  const auto r = synthetic_ablation(c);
  ASSERT_EQ(r.variants.size(), 4u);
  EXPECT_EQ(r.variants[0].name, "gaussian_prior-laplacian_cond");
  for (const auto& v : r.variants) {
    EXPECT_EQ(v.mean_distance.size(), 12u);
    EXPECT_EQ(v.stderr_distance.size(), 12u);
    EXPECT_EQ(v.final_distance.size(), 3u);
    EXPECT_EQ(v.mean_distance.front(), r.variants[0].mean_distance.front());
  }
  c.trials = 0;
  EXPECT_THROW(synthetic_ablation(c), ConfigError);
}

TEST(SyntheticAblation, ThreadCountDoesNotMatter) {
  SyntheticAblationConfig c;
  c.steps = 8;
  c.trials = 4;
  c.jobs = 1;
  const auto a = synthetic_ablation(c);
  c.jobs = 3;
  const auto b = synthetic_ablation(c);
  for (std::size_t v = 0; v < 4; ++v) {
    EXPECT_EQ(a.variants[v].mean_distance, b.variants[v].mean_distance);
  }
}

TEST(McAblation, SingleSampleCurveMatchesDirectRuns) {
  const auto ds = data::standardized(digits(2));
  McAblationConfig c;
  c.k_values = {1, 4};
  c.trials = 2;
  c.steps = 6;
  c.seed = 3;
  c.calibrate = false;
  const auto res = mc_ablation(c, ds);
  EXPECT_FALSE(res.calibration.has_value());
  EXPECT_EQ(res.beta, c.beta);
  const auto& curves = res.curves;
  ASSERT_EQ(curves.size(), 2u);
  EXPECT_EQ(curves[0].k, 1u);
  EXPECT_EQ(curves[0].mean_psnr.size(), 6u);

  // the k = 1 curve rebuilt from independent run_attack calls
  const models::NetworkSpec spec{{64, c.hidden, 10}, derive_seed(c.seed, 0)};
  const models::Network net{spec, models::init_parameters(spec)};
  std::vector<std::vector<double>> psnrs;
  for (std::size_t t = 0; t < 2; ++t) {
    const std::uint64_t s = derive_seed(derive_seed(c.seed, 1), t);
    const auto ex = ds.example(t);
    const auto g = models::loss_and_param_grad(spec, net.state, ex).grad;
    const auto released = defenses::sample(DefenseMechanism::gaussian(c.sigma), g,
                                           net.state.segments, derive_seed(s, 0));
    attacks::AttackConfig a;
    a.k = 1;
    a.delta = c.delta;
    a.steps = c.steps;
    a.lr = c.lr;
    a.lr_decay = c.lr_decay;
    a.beta = c.beta;
    a.conditional = attacks::ConditionalKind::kBayes;
    a.prior = priors::PriorSpec::tv(8, 8);
    a.psnr_max_val = ds.psnr_max_val();
    a.seed = derive_seed(s, 1);
    const auto res = attacks::run_attack(a, released, net, ex.x);
    std::vector<double> p;
    for (double d : res.distance_trace) p.push_back(psnr_from_distance(d, 64, a.psnr_max_val));
    EXPECT_DOUBLE_EQ(p.back(), *res.psnr);
    psnrs.push_back(p);
  }
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_DOUBLE_EQ(curves[0].mean_psnr[i], (psnrs[0][i] + psnrs[1][i]) / 2);
  }
}

TEST(McAblation, CalibratesBetaOnHeldOutImages) {
  const auto ds = data::standardized(digits(4));
  McAblationConfig c;
  c.k_values = {1, 2};
  c.trials = 2;
  c.steps = 4;
  c.probe_count = 2;
  const auto res = mc_ablation(c, ds);
  ASSERT_TRUE(res.calibration.has_value());
  EXPECT_EQ(res.beta, res.calibration->beta_star);
  const auto grid = beta_grid();
  EXPECT_NE(std::find(grid.begin(), grid.end(), res.beta), grid.end());
  c.probe_count = 3;  // 2 trials + 3 probes > 4 images
  EXPECT_THROW(mc_ablation(c, ds), ConfigError);
}

TEST(McAblation, RejectsUnsortedK) {
  McAblationConfig c;
  c.k_values = {4, 1};
  EXPECT_THROW(mc_ablation(c, digits(1)), ConfigError);
  c.k_values = {1};
  c.trials = 5;
  c.calibrate = false;
  EXPECT_THROW(mc_ablation(c, digits(2)), ConfigError);
}

}  // namespace
}  // namespace gradleak::eval
