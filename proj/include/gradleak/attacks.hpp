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

// Optimization-based gradient inversion.
//
// The attack ascends the Monte Carlo estimate
//
//   (1/k) sum_i [ C(g, grad_theta l(x_i, y)) + beta * log p(x_i) ],
//   x_i uniform in the l2 ball B(x, delta),
//
// where the gradient term C is either log p(g | x) of a known defense
// (`kBayes`) or one of the gradient-matching heuristics (l2, l1, cosine).
// With k = 1, delta = 0, an l2 term and a uniform prior this is plain
// gradient matching.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gradleak/analytic.hpp"
#include "gradleak/autodiff.hpp"
#include "gradleak/defenses.hpp"
#include "gradleak/error.hpp"
#include "gradleak/json_io.hpp"
#include "gradleak/models.hpp"
#include "gradleak/priors.hpp"
#include "gradleak/rng.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak::attacks {

enum class ConditionalKind { kBayes, kL2, kL1, kCosine };
enum class InitKind { kGaussianNoise, kZeros, kProvided };
enum class OptimizerKind { kAdam, kAscent };

inline std::string conditional_name(ConditionalKind k) {
  switch (k) {
    case ConditionalKind::kBayes: return "bayes";
    case ConditionalKind::kL2: return "l2";
    case ConditionalKind::kL1: return "l1";
    case ConditionalKind::kCosine: return "cosine";
  }
  return "?";
}

inline ConditionalKind conditional_from_name(const std::string& s) {
  for (auto k : {ConditionalKind::kBayes, ConditionalKind::kL2,
                 ConditionalKind::kL1, ConditionalKind::kCosine}) {
    if (conditional_name(k) == s) return k;
  }
  throw ConfigError("unknown conditional \"" + s + "\"");
}

inline std::string init_name(InitKind k) {
  switch (k) {
    case InitKind::kGaussianNoise: return "gaussian_noise";
    case InitKind::kZeros: return "zeros";
    case InitKind::kProvided: return "provided";
  }
  return "?";
}

inline InitKind init_from_name(const std::string& s) {
  for (auto k : {InitKind::kGaussianNoise, InitKind::kZeros, InitKind::kProvided}) {
    if (init_name(k) == s) return k;
  }
  throw ConfigError("unknown init \"" + s + "\"");
}

// Adam moment decays and epsilon are fixed; only lr and its decay are tuned.
inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

struct AttackConfig {
  std::size_t k = 1;       // Monte Carlo samples per step
  double delta = 0.0;      // ball radius; 0 means evaluate at the iterate
  std::size_t steps = 200; // number of iterates (steps - 1 updates)
  double lr = 0.1;
  double lr_decay = 1.0;   // lr * lr_decay^i at update i
  double beta = 0.0;       // prior weight
  InitKind init = InitKind::kGaussianNoise;
  std::optional<Tensor> init_x;
  ConditionalKind conditional = ConditionalKind::kL2;
  // Density used by the bayes term; defaults to the released defense.
  std::optional<defenses::DefenseMechanism> assumed_defense;
  priors::PriorSpec prior;
  std::vector<std::size_t> layer_mask;  // layers left out of the gradient term
  // Exponential layer weighting w_m = gamma^(L-1-m) for layer m.
  std::optional<double> layer_weight_gamma;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  std::optional<std::size_t> label;  // recovered from the gradient if absent
  double psnr_max_val = 1.0;
  std::uint64_t seed = 0;

  // k collapses to 1 when the ball degenerates to its centre.
  std::size_t effective_k() const { return delta == 0.0 ? 1 : k; }

  void validate() const {
    if (k < 1) throw ConfigError("attack: k must be >= 1");
    if (!(delta >= 0.0)) throw ConfigError("attack: delta must be >= 0");
    if (steps < 1) throw ConfigError("attack: steps must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("attack: lr must be > 0");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) {
      throw ConfigError("attack: lr_decay must be in (0, 1]");
    }
    if (!(beta >= 0.0)) throw ConfigError("attack: beta must be >= 0");
    if (init == InitKind::kProvided && !init_x) {
      throw ConfigError("attack: init \"provided\" needs init_x");
    }
    if (layer_weight_gamma && !(*layer_weight_gamma > 0.0)) {
      throw ConfigError("attack: layer_weight_gamma must be > 0");
    }
    if (assumed_defense) assumed_defense->validate();
    prior.validate();
  }
};

struct ReconstructionResult {
  Tensor x_hat;
  std::vector<double> objective_trace;
  std::vector<double> distance_trace;  // empty unless x_orig was supplied
  std::optional<double> psnr;
  std::size_t steps_run = 0;
  std::size_t label = 0;
};

// ---- Monte Carlo ball sampling ----

// Offsets u with x + u uniform in B(x, delta): direction is a normalized
// Gaussian, radius delta * U^(1/d).
inline std::vector<Tensor> sample_ball_offsets(std::size_t dim, double delta,
                                               std::size_t k, Rng& rng) {
  std::vector<Tensor> out;
  out.reserve(k);
  if (delta == 0.0) {
    for (std::size_t i = 0; i < k; ++i) out.push_back(Tensor::zeros({dim}));
    return out;
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<double> u(dim);
    double n = 0.0;
    do {
      for (double& v : u) v = normal(rng);
      n = l2_norm(u);
    } while (n == 0.0);
    const double r =
        delta * std::pow(unif(rng), 1.0 / static_cast<double>(dim));
    for (double& v : u) v *= r / n;
    out.push_back(Tensor::vector(std::move(u)));
  }
  return out;
}

inline std::vector<Tensor> sample_ball(const Tensor& center, double delta,
                                       std::size_t k, Rng& rng) {
  if (!(delta >= 0.0)) throw ConfigError("sample_ball: delta must be >= 0");
  std::vector<Tensor> points;
  for (const Tensor& u : sample_ball_offsets(center.size(), delta, k, rng)) {
    std::vector<double> p(center.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = center[i] + u[i];
    points.emplace_back(center.shape(), std::move(p));
  }
  return points;
}

// ---- label recovery ----

struct LabelRecovery {
  std::size_t label = 0;
  std::size_t negative_count = 0;
  bool ambiguous = false;  // not exactly one negative coordinate
};

// Under softmax cross-entropy with one example the last-layer bias gradient
// is softmax(z) - onehot(y): only the true class is negative.
inline LabelRecovery recover_label(const defenses::ReleasedGradient& released,
                                   const models::Network& net) {
  const std::size_t last = net.spec.num_layers() - 1;
  const models::Segment* bias = nullptr;
  for (const auto& s : released.segments) {
    if (s.layer == last && s.kind == models::ParamKind::kBias) bias = &s;
  }
  if (!bias) throw ConfigError("released gradient has no last-layer bias");
  LabelRecovery r;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < bias->length; ++i) {
    const double v = released.g[bias->offset + i];
    if (v < 0.0) ++r.negative_count;
    if (v < best) {
      best = v;
      r.label = i;
    }
  }
  r.ambiguous = r.negative_count != 1;
  return r;
}

// ---- objective ----

using LossFn = std::function<ad::Var(const ad::Var& logits)>;

namespace detail {

struct ActiveSegment {
  const models::Segment* segment;
  double weight;
};

inline std::vector<ActiveSegment> active_segments(
    const AttackConfig& config, const defenses::ReleasedGradient& released,
    const defenses::DefenseMechanism* density, std::size_t num_layers) {
  std::vector<ActiveSegment> out;
  for (const auto& s : released.segments) {
    if (std::find(config.layer_mask.begin(), config.layer_mask.end(),
                  s.layer) != config.layer_mask.end()) {
      continue;
    }
    if (density && density->kind == defenses::DefenseKind::kLayerPerturb &&
        s.layer == *density->defended_layer) {
      continue;
    }
    double w = 1.0;
    if (config.layer_weight_gamma) {
      w = std::pow(*config.layer_weight_gamma,
                   static_cast<double>(num_layers - 1 - s.layer));
    }
    out.push_back({&s, w});
  }
  if (out.empty()) {
    throw ConfigError("attack: the layer mask leaves no gradient segments");
  }
  return out;
}

inline Tensor observed_slice(const Tensor& g, const models::Segment& s) {
  return Tensor({s.length}, std::vector<double>(g.data().begin() + s.offset,
                                                g.data().begin() + s.offset +
                                                    s.length));
}

inline void check_layers(const AttackConfig& config, const models::Network& net) {
  const std::size_t layers = net.spec.num_layers();
  std::vector<std::size_t> masked;
  for (std::size_t l : config.layer_mask) {
    if (l >= layers) {
      throw ConfigError("attack: layer " + std::to_string(l) +
                        " has no parameters (network has " +
                        std::to_string(layers) + " layers)");
    }
    if (std::find(masked.begin(), masked.end(), l) == masked.end()) {
      masked.push_back(l);
    }
  }
  if (masked.size() >= layers) {
    throw ConfigError("attack: the layer mask covers every layer");
  }
}

}  // namespace detail

// Gradient term at a single point x, traced in x. `loss_fn` maps logits to
// the training loss whose parameter gradient was released.
inline ad::Var gradient_term(const AttackConfig& config,
                             const defenses::ReleasedGradient& released,
                             const models::Network& net, const ad::Var& x,
                             const LossFn& loss_fn) {
  ad::Tape& tape = *x.tape();
  const models::TracedParams params = models::bind_parameters(tape, net.state);
  const ad::Var logits = models::traced_forward(net.spec, params, x);
  const ad::Var loss = loss_fn(logits);
  const std::vector<ad::Var> grads =
      tape.grad(loss, params.segments, /*create_graph=*/true);
  const ad::Var flat = models::flatten_segments(grads);
  if (flat.size() != released.g.size()) {
    throw ShapeError("released gradient length does not match the network");
  }

  const defenses::DefenseMechanism* density = nullptr;
  if (config.conditional == ConditionalKind::kBayes) {
    density = config.assumed_defense ? &*config.assumed_defense
                                     : &released.defense;
    if (density->kind == defenses::DefenseKind::kNone) {
      throw DegenerateConditional(
          "bayes conditional for defense \"none\" is a Dirac delta; use the "
          "analytic inversion");
    }
  }
  const auto active = detail::active_segments(config, released, density,
                                              net.spec.num_layers());
  const bool whole = active.size() == released.segments.size() &&
                     std::all_of(active.begin(), active.end(),
                                 [](const auto& a) { return a.weight == 1.0; });

  switch (config.conditional) {
    case ConditionalKind::kL2:
    case ConditionalKind::kL1: {
      const bool l2 = config.conditional == ConditionalKind::kL2;
      const auto distance = [&](const ad::Var& d) {
        return l2 ? ad::squared_norm(d) : ad::sum(ad::abs(d));
      };
      if (whole) {
        return -distance(flat - tape.constant(released.g.flattened()));
      }
      std::optional<ad::Var> total;
      for (const auto& a : active) {
        const auto& s = *a.segment;
        const ad::Var d = ad::slice(flat, s.offset, s.length) -
                          tape.constant(detail::observed_slice(released.g, s));
        const ad::Var term = distance(d) * a.weight;
        total = total ? *total + term : term;
      }
      return -*total;
    }
    case ConditionalKind::kCosine: {
      std::optional<ad::Var> inner, grad_sq;
      double g_sq = 0.0;
      for (const auto& a : active) {
        const auto& s = *a.segment;
        const Tensor obs = detail::observed_slice(released.g, s);
        const ad::Var part = ad::slice(flat, s.offset, s.length);
        const ad::Var ip = ad::dot(part, tape.constant(obs)) * a.weight;
        const ad::Var nn = ad::squared_norm(part) * a.weight;
        inner = inner ? *inner + ip : ip;
        grad_sq = grad_sq ? *grad_sq + nn : nn;
        for (double v : obs.data()) g_sq += a.weight * v * v;
      }
      if (g_sq == 0.0) throw Error("cosine conditional: released gradient is zero");
      return *inner * ad::recip(ad::sqrt(*grad_sq)) * (1.0 / std::sqrt(g_sq));
    }
    case ConditionalKind::kBayes: {
      const ad::Var mean = defenses::released_mean(*density, flat);
      if (whole) {
        return defenses::coordinate_log_density(*density, released.g, mean);
      }
      std::optional<ad::Var> total;
      for (const auto& a : active) {
        const auto& s = *a.segment;
        const ad::Var term =
            defenses::coordinate_log_density(
                *density, detail::observed_slice(released.g, s),
                ad::slice(mean, s.offset, s.length)) *
            a.weight;
        total = total ? *total + term : term;
      }
      return *total;
    }
  }
  throw Error("unknown conditional");
}

// Monte Carlo objective at x. Each offset u_i gives one sample x + u_i; an
// empty offset list evaluates at x itself.
inline ad::Var objective(const AttackConfig& config, const ad::Var& x,
                         const defenses::ReleasedGradient& released,
                         const models::Network& net, const LossFn& loss_fn,
                         std::span<const Tensor> offsets = {}) {
  ad::Tape& tape = *x.tape();
  const bool use_prior =
      config.beta != 0.0 && config.prior.kind != priors::PriorKind::kUniform;
  const auto at = [&](const ad::Var& xs) {
    ad::Var v = gradient_term(config, released, net, xs, loss_fn);
    if (use_prior) v = v + priors::log_prior(config.prior, xs) * config.beta;
    return v;
  };
  if (offsets.empty()) return at(x);
  std::optional<ad::Var> total;
  for (const Tensor& u : offsets) {
    const ad::Var xs = x + tape.constant(u.reshaped(x.shape()));
    const ad::Var v = at(xs);
    total = total ? *total + v : v;
  }
  return *total * (1.0 / static_cast<double>(offsets.size()));
}

inline LossFn hard_label_loss(std::size_t label) {
  return [label](const ad::Var& logits) {
    return models::cross_entropy(logits, label);
  };
}

struct ObjectiveValue {
  double value = 0.0;
  Tensor grad;
};

// Value and input gradient of the objective at a concrete point.
inline ObjectiveValue evaluate_objective(
    const AttackConfig& config, const Tensor& x,
    const defenses::ReleasedGradient& released, const models::Network& net,
    std::size_t label, std::span<const Tensor> offsets = {}) {
  ad::Tape tape;
  const ad::Var xv = tape.leaf(x);
  const ad::Var obj =
      objective(config, xv, released, net, hard_label_loss(label), offsets);
  const ad::Var g = tape.grad(obj, {xv})[0];
  return {obj.item(), g.value()};
}

// ---- optimizer ----

class AdamAscent {
 public:
  explicit AdamAscent(std::size_t n) : m_(n, 0.0), v_(n, 0.0) {}

  void step(std::vector<double>& x, std::span<const double> g, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < x.size(); ++i) {
      m_[i] = kAdamBeta1 * m_[i] + (1.0 - kAdamBeta1) * g[i];
      v_[i] = kAdamBeta2 * v_[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
      const double mhat = m_[i] / c1;
      const double vhat = v_[i] / c2;
      x[i] += lr * mhat / (std::sqrt(vhat) + kAdamEps);
    }
  }

 private:
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

namespace detail {

inline std::vector<double> initial_point(const AttackConfig& config,
                                         std::size_t dim, Rng& rng) {
  switch (config.init) {
    case InitKind::kZeros:
      return std::vector<double>(dim, 0.0);
    case InitKind::kProvided:
      if (config.init_x->size() != dim) {
        throw ShapeError("attack: init_x has the wrong size");
      }
      return config.init_x->values();
    case InitKind::kGaussianNoise: {
      std::normal_distribution<double> normal(0.0, 1.0);
      std::vector<double> x(dim);
      for (double& v : x) v = normal(rng);
      return x;
    }
  }
  throw Error("unknown init");
}

}  // namespace detail

// Runs `steps` iterates of Adam (or plain) ascent. Trace entry i describes
// iterate i; the last iterate is returned without a further update.
inline ReconstructionResult run_attack(
    const AttackConfig& config, const defenses::ReleasedGradient& released,
    const models::Network& net, const std::optional<Tensor>& x_orig = {}) {
  config.validate();
  detail::check_layers(config, net);
  const std::size_t dim = net.spec.input_size();
  if (x_orig && x_orig->size() != dim) {
    throw ShapeError("attack: x_orig has the wrong size");
  }
  ReconstructionResult result;
  result.label = config.label ? *config.label : recover_label(released, net).label;
  const LossFn loss_fn = hard_label_loss(result.label);

  Rng rng(config.seed);
  std::vector<double> x = detail::initial_point(config, dim, rng);
  AdamAscent adam(dim);
  const std::size_t k = config.effective_k();
  ad::Tape tape;
  for (std::size_t i = 0; i < config.steps; ++i) {
    tape.clear();
    const ad::Var xv = tape.leaf(Tensor::vector(x));
    std::vector<Tensor> offsets;
    if (config.delta > 0.0) {
      offsets = sample_ball_offsets(dim, config.delta, k, rng);
    }
    double value = 0.0;
    Tensor grad;
    try {
      const ad::Var obj =
          objective(config, xv, released, net, loss_fn, offsets);
      value = obj.item();
      grad = tape.grad(obj, {xv})[0].value();
    } catch (const NonFiniteError& e) {
      throw Error("attack: non-finite objective at step " + std::to_string(i) +
                  ": " + e.what());
    }
    if (!std::isfinite(value)) {
      throw Error("attack: non-finite objective at step " + std::to_string(i));
    }
    result.objective_trace.push_back(value);
    if (x_orig) {
      result.distance_trace.push_back(l2_distance(Tensor::vector(x), *x_orig));
    }
    if (i + 1 == config.steps) break;
    const double lr = config.lr * std::pow(config.lr_decay, static_cast<double>(i));
    if (config.optimizer == OptimizerKind::kAdam) {
      adam.step(x, grad.data(), lr);
    } else {
      for (std::size_t j = 0; j < dim; ++j) x[j] += lr * grad[j];
    }
  }
  result.steps_run = result.objective_trace.size();
  result.x_hat = Tensor::vector(std::move(x));
  if (x_orig) {
    result.psnr = analytic::psnr(*x_orig, result.x_hat, config.psnr_max_val);
  }
  return result;
}

// Joint optimization over the input and a relaxed label (softmax over label
// logits). Meant as a fallback when recover_label is ambiguous.
struct JointResult {
  ReconstructionResult reconstruction;
  Tensor label_probs;
};

inline JointResult run_joint_attack(const AttackConfig& config,
                                    const defenses::ReleasedGradient& released,
                                    const models::Network& net,
                                    const std::optional<Tensor>& x_orig = {}) {
  config.validate();
  detail::check_layers(config, net);
  const std::size_t dim = net.spec.input_size();
  const std::size_t classes = net.spec.num_classes();
  Rng rng(config.seed);
  std::vector<double> x = detail::initial_point(config, dim, rng);
  std::vector<double> label_logits(classes, 0.0);
  AdamAscent adam_x(dim), adam_y(classes);
  JointResult out;
  ReconstructionResult& result = out.reconstruction;
  ad::Tape tape;
  for (std::size_t i = 0; i < config.steps; ++i) {
    tape.clear();
    const ad::Var xv = tape.leaf(Tensor::vector(x));
    const ad::Var yv = tape.leaf(Tensor::vector(label_logits));
    const ad::Var probs = models::softmax(yv);
    const LossFn loss_fn = [&](const ad::Var& logits) {
      return models::soft_cross_entropy(logits, probs);
    };
    std::vector<Tensor> offsets;
    if (config.delta > 0.0) {
      offsets = sample_ball_offsets(dim, config.delta, config.effective_k(), rng);
    }
    const ad::Var obj = objective(config, xv, released, net, loss_fn, offsets);
    if (!std::isfinite(obj.item())) {
      throw Error("joint attack: non-finite objective at step " +
                  std::to_string(i));
    }
    const auto grads = tape.grad(obj, {xv, yv});
    result.objective_trace.push_back(obj.item());
    if (x_orig) {
      result.distance_trace.push_back(l2_distance(Tensor::vector(x), *x_orig));
    }
    if (i + 1 == config.steps) break;
    const double lr = config.lr * std::pow(config.lr_decay, static_cast<double>(i));
    adam_x.step(x, grads[0].value().data(), lr);
    adam_y.step(label_logits, grads[1].value().data(), lr);
  }
  result.steps_run = result.objective_trace.size();
  result.x_hat = Tensor::vector(std::move(x));
  {
    ad::Tape t;
    out.label_probs =
        models::softmax(t.constant(Tensor::vector(label_logits))).value();
  }
  const auto p = out.label_probs.data();
  result.label = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) -
                                          p.begin());
  if (x_orig) result.psnr = analytic::psnr(*x_orig, result.x_hat, config.psnr_max_val);
  return out;
}

// ---- layer-drop attack ----

struct LayerDropResult {
  ReconstructionResult best;
  std::size_t layer = 0;  // dropped layer of `best`
  std::vector<ReconstructionResult> per_layer;  // sweep mode only
};

// Gradient matching with one layer's segments removed from the gradient term.
// Without a known defended layer every layer is tried and the run with the
// highest final objective wins (ties go to the lower layer index).
inline LayerDropResult layer_drop_attack(
    const AttackConfig& config, const defenses::ReleasedGradient& released,
    const models::Network& net, std::optional<std::size_t> defended_layer,
    const std::optional<Tensor>& x_orig = {}) {
  const std::size_t layers = net.spec.num_layers();
  if (layers < 2) {
    throw ConfigError("layer-drop attack needs at least two layers");
  }
  auto run_masked = [&](std::size_t l) {
    if (l >= layers) {
      throw ConfigError("layer-drop attack: layer " + std::to_string(l) +
                        " has no parameters");
    }
    AttackConfig c = config;
    c.layer_mask.push_back(l);
    return run_attack(c, released, net, x_orig);
  };
  LayerDropResult out;
  if (defended_layer) {
    out.layer = *defended_layer;
    out.best = run_masked(*defended_layer);
    return out;
  }
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < layers; ++l) {
    out.per_layer.push_back(run_masked(l));
    const double v = out.per_layer.back().objective_trace.back();
    if (v > best) {
      best = v;
      out.layer = l;
    }
  }
  out.best = out.per_layer[out.layer];
  return out;
}

// ---- JSON ----

inline Json to_json(const AttackConfig& c) {
  Json j;
  j["k"] = c.k;
  j["delta"] = c.delta;
  j["steps"] = c.steps;
  j["lr"] = c.lr;
  j["lr_decay"] = c.lr_decay;
  j["beta"] = c.beta;
  j["init"] = init_name(c.init);
  if (c.init_x) j["init_x"] = c.init_x->values();
  j["conditional"] = conditional_name(c.conditional);
  if (c.assumed_defense) j["assumed_defense"] = defenses::to_json(*c.assumed_defense);
  j["prior"] = priors::to_json(c.prior);
  j["layer_mask"] = c.layer_mask;
  if (c.layer_weight_gamma) j["layer_weight_gamma"] = *c.layer_weight_gamma;
  j["optimizer"] = c.optimizer == OptimizerKind::kAdam ? "adam" : "ascent";
  if (c.label) j["label"] = *c.label;
  j["psnr_max_val"] = c.psnr_max_val;
  j["seed"] = c.seed;
  return j;
}

// Non-finite numbers (an exact reconstruction has PSNR inf) are written as
// strings.
inline Json to_json(const ReconstructionResult& r) {
  Json j;
  j["label"] = r.label;
  j["steps_run"] = r.steps_run;
  j["psnr"] = r.psnr ? json_number(*r.psnr) : Json(nullptr);
  Json x = Json::array(), obj = Json::array(), dist = Json::array();
  for (double v : r.x_hat.data()) x.push_back(json_number(v));
  for (double v : r.objective_trace) obj.push_back(json_number(v));
  for (double v : r.distance_trace) dist.push_back(json_number(v));
  j["x_hat"] = std::move(x);
  j["objective_trace"] = std::move(obj);
  j["distance_trace"] = std::move(dist);
  return j;
}

inline AttackConfig attack_config_from_json(const Json& j) {
  require_known_keys(j,
                     {"k", "delta", "steps", "lr", "lr_decay", "beta", "init",
                      "init_x", "conditional", "assumed_defense", "prior",
                      "layer_mask", "layer_weight_gamma", "optimizer", "label",
                      "psnr_max_val", "seed"},
                     "attack");
  AttackConfig c;
  try {
    if (j.contains("k")) c.k = j.at("k").get<std::size_t>();
    if (j.contains("delta")) c.delta = j.at("delta").get<double>();
    if (j.contains("steps")) c.steps = j.at("steps").get<std::size_t>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("lr_decay")) c.lr_decay = j.at("lr_decay").get<double>();
    if (j.contains("beta")) c.beta = j.at("beta").get<double>();
    if (j.contains("init")) c.init = init_from_name(j.at("init").get<std::string>());
    if (j.contains("init_x")) {
      c.init_x = Tensor::vector(j.at("init_x").get<std::vector<double>>());
    }
    if (j.contains("conditional")) {
      c.conditional = conditional_from_name(j.at("conditional").get<std::string>());
    }
    if (j.contains("assumed_defense")) {
      c.assumed_defense = defenses::defense_from_json(j.at("assumed_defense"));
    }
    if (j.contains("prior")) c.prior = priors::prior_from_json(j.at("prior"));
    if (j.contains("layer_mask")) {
      c.layer_mask = j.at("layer_mask").get<std::vector<std::size_t>>();
    }
    if (j.contains("layer_weight_gamma")) {
      c.layer_weight_gamma = j.at("layer_weight_gamma").get<double>();
    }
    if (j.contains("optimizer")) {
      const auto o = j.at("optimizer").get<std::string>();
      if (o == "adam") {
        c.optimizer = OptimizerKind::kAdam;
      } else if (o == "ascent") {
        c.optimizer = OptimizerKind::kAscent;
      } else {
        throw ConfigError("attack: unknown optimizer \"" + o + "\"");
      }
    }
    if (j.contains("label")) c.label = j.at("label").get<std::size_t>();
    if (j.contains("psnr_max_val")) c.psnr_max_val = j.at("psnr_max_val").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("attack: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace gradleak::attacks
