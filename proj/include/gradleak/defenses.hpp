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

// Gradient defenses described as conditional distributions p(g | x).
//
// Each mechanism can sample a released gradient from the true gradient and
// evaluate log p(g | x) up to an additive constant, differentiably in the
// true gradient. Constants that do not depend on the true gradient are
// dropped throughout.
//
// Prune mechanisms zero each coordinate with probability p and then add
// noise to every coordinate. The attacker does not see the mask, so the
// per-coordinate density is the two-component mixture
//   p * noise(g_i; 0) + (1 - p) * noise(g_i; grad_i).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gradleak/autodiff.hpp"
#include "gradleak/error.hpp"
#include "gradleak/json_io.hpp"
#include "gradleak/models.hpp"
#include "gradleak/rng.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak::defenses {

enum class DefenseKind {
  kNone,
  kGaussian,
  kLaplacian,
  kPruneGaussian,
  kPruneLaplacian,
  kClipGaussian,
  kLayerPerturb,
};

inline constexpr int kDefenseSchemaVersion = 1;

inline std::string kind_name(DefenseKind k) {
  switch (k) {
    case DefenseKind::kNone: return "none";
    case DefenseKind::kGaussian: return "gaussian";
    case DefenseKind::kLaplacian: return "laplacian";
    case DefenseKind::kPruneGaussian: return "prune_gaussian";
    case DefenseKind::kPruneLaplacian: return "prune_laplacian";
    case DefenseKind::kClipGaussian: return "clip_gaussian";
    case DefenseKind::kLayerPerturb: return "layer_perturb";
  }
  return "?";
}

inline DefenseKind kind_from_name(const std::string& s) {
  for (DefenseKind k :
       {DefenseKind::kNone, DefenseKind::kGaussian, DefenseKind::kLaplacian,
        DefenseKind::kPruneGaussian, DefenseKind::kPruneLaplacian,
        DefenseKind::kClipGaussian, DefenseKind::kLayerPerturb}) {
    if (kind_name(k) == s) return k;
  }
  throw ConfigError("unknown defense kind \"" + s + "\"");
}

struct DefenseMechanism {
  DefenseKind kind = DefenseKind::kNone;
  std::optional<double> sigma;
  std::optional<double> b;
  std::optional<double> prune_rate;
  std::optional<double> clip_bound;
  std::optional<std::size_t> defended_layer;
  std::optional<double> perturb_mask_rate;

  static DefenseMechanism none() { return {}; }
  static DefenseMechanism gaussian(double sigma) {
    DefenseMechanism d;
    d.kind = DefenseKind::kGaussian;
    d.sigma = sigma;
    return d;
  }
  static DefenseMechanism laplacian(double b) {
    DefenseMechanism d;
    d.kind = DefenseKind::kLaplacian;
    d.b = b;
    return d;
  }
  static DefenseMechanism prune_gaussian(double rate, double sigma) {
    DefenseMechanism d;
    d.kind = DefenseKind::kPruneGaussian;
    d.prune_rate = rate;
    d.sigma = sigma;
    return d;
  }
  static DefenseMechanism prune_laplacian(double rate, double b) {
    DefenseMechanism d;
    d.kind = DefenseKind::kPruneLaplacian;
    d.prune_rate = rate;
    d.b = b;
    return d;
  }
  static DefenseMechanism clip_gaussian(double bound, double sigma) {
    DefenseMechanism d;
    d.kind = DefenseKind::kClipGaussian;
    d.clip_bound = bound;
    d.sigma = sigma;
    return d;
  }
  static DefenseMechanism layer_perturb(std::size_t layer, double mask_rate) {
    DefenseMechanism d;
    d.kind = DefenseKind::kLayerPerturb;
    d.defended_layer = layer;
    d.perturb_mask_rate = mask_rate;
    return d;
  }

  bool gaussian_family() const {
    return kind == DefenseKind::kGaussian ||
           kind == DefenseKind::kPruneGaussian ||
           kind == DefenseKind::kClipGaussian;
  }
  bool laplacian_family() const {
    return kind == DefenseKind::kLaplacian ||
           kind == DefenseKind::kPruneLaplacian;
  }
  bool pruned() const {
    return kind == DefenseKind::kPruneGaussian ||
           kind == DefenseKind::kPruneLaplacian;
  }

  void validate() const {
    const auto expect = [&](bool present, bool required, const char* name) {
      if (present != required) {
        throw ConfigError("defense " + kind_name(kind) + ": parameter \"" +
                          name + "\" must be " +
                          (required ? "present" : "absent"));
      }
    };
    expect(sigma.has_value(), gaussian_family(), "sigma");
    expect(b.has_value(), laplacian_family(), "b");
    expect(prune_rate.has_value(), pruned(), "prune_rate");
    expect(clip_bound.has_value(), kind == DefenseKind::kClipGaussian,
           "clip_bound");
    expect(defended_layer.has_value(), kind == DefenseKind::kLayerPerturb,
           "defended_layer");
    expect(perturb_mask_rate.has_value(), kind == DefenseKind::kLayerPerturb,
           "perturb_mask_rate");
    if (sigma && !(*sigma > 0)) throw ConfigError("defense: sigma must be > 0");
    if (b && !(*b > 0)) throw ConfigError("defense: b must be > 0");
    if (prune_rate && !(*prune_rate >= 0 && *prune_rate < 1)) {
      throw ConfigError("defense: prune_rate must be in [0, 1)");
    }
    if (clip_bound && !(*clip_bound > 0)) {
      throw ConfigError("defense: clip_bound must be > 0");
    }
    if (perturb_mask_rate &&
        !(*perturb_mask_rate >= 0 && *perturb_mask_rate <= 1)) {
      throw ConfigError("defense: perturb_mask_rate must be in [0, 1]");
    }
  }

  friend bool operator==(const DefenseMechanism&,
                         const DefenseMechanism&) = default;
};

struct ReleasedGradient {
  Tensor g;  // flat
  DefenseMechanism defense;
  std::uint64_t rng_seed = 0;
  models::Layout segments;
};

namespace detail {

inline std::vector<std::size_t> layer_coordinates(const models::Layout& layout,
                                                  std::size_t layer) {
  std::vector<std::size_t> idx;
  for (const auto& s : layout) {
    if (s.layer != layer) continue;
    for (std::size_t i = 0; i < s.length; ++i) idx.push_back(s.offset + i);
  }
  return idx;
}

inline double laplace_sample(Rng& rng, double b) {
  std::exponential_distribution<double> e(1.0 / b);
  std::bernoulli_distribution sign(0.5);
  const double v = e(rng);
  return sign(rng) ? v : -v;
}

}  // namespace detail

// Draws a released gradient g ~ p(g | x) given the true gradient.
inline ReleasedGradient sample(const DefenseMechanism& defense,
                               const Tensor& true_grad,
                               const models::Layout& segments,
                               std::uint64_t seed) {
  defense.validate();
  true_grad.check_finite();
  if (!segments.empty() && models::parameter_count(segments) != true_grad.size()) {
    throw ShapeError("released gradient: segmentation does not match length");
  }
  Rng rng(seed);
  std::vector<double> g = true_grad.values();

  if (defense.kind == DefenseKind::kClipGaussian) {
    const double norm = l2_norm(g);
    if (norm > *defense.clip_bound) {
      const double s = *defense.clip_bound / norm;
      for (double& v : g) v *= s;
    }
  }
  if (defense.pruned()) {
    std::bernoulli_distribution drop(*defense.prune_rate);
    for (double& v : g) {
      if (drop(rng)) v = 0.0;
    }
  }
  if (defense.gaussian_family()) {
    std::normal_distribution<double> noise(0.0, *defense.sigma);
    for (double& v : g) v += noise(rng);
  } else if (defense.laplacian_family()) {
    for (double& v : g) v += detail::laplace_sample(rng, *defense.b);
  }
  if (defense.kind == DefenseKind::kLayerPerturb) {
    if (segments.empty()) {
      throw ConfigError("layer_perturb defense needs the gradient segmentation");
    }
    std::vector<std::size_t> idx =
        detail::layer_coordinates(segments, *defense.defended_layer);
    if (idx.empty()) {
      throw ConfigError("layer_perturb: layer " +
                        std::to_string(*defense.defended_layer) +
                        " has no parameters");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto count = static_cast<std::size_t>(std::llround(
        *defense.perturb_mask_rate * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < count; ++i) g[idx[i]] = 0.0;
  }
  return {Tensor::vector(std::move(g)), defense, seed, segments};
}

// The value around which noise is centred: the true gradient, or its clipped
// version for clip_gaussian.
inline ad::Var released_mean(const DefenseMechanism& defense,
                             const ad::Var& true_grad) {
  if (defense.kind != DefenseKind::kClipGaussian) return true_grad;
  const double bound = *defense.clip_bound;
  const ad::Var norm = ad::norm(true_grad);
  if (norm.item() <= bound) return true_grad;
  return true_grad * ad::expand_as(ad::recip(norm) * bound, true_grad);
}

// Sum over coordinates of log p(g_i | mean_i), constants dropped.
// `observed` and `mean` cover the same coordinates.
inline ad::Var coordinate_log_density(const DefenseMechanism& defense,
                                      const Tensor& observed,
                                      const ad::Var& mean) {
  if (observed.size() != mean.size()) {
    throw ShapeError("log_density: observed and mean lengths differ");
  }
  ad::Tape& tape = *mean.tape();
  const ad::Var g = tape.constant(observed.reshaped(mean.shape()));
  switch (defense.kind) {
    case DefenseKind::kNone:
      throw DegenerateConditional(
          "defense \"none\" has a Dirac conditional; use the analytic "
          "inversion instead");
    case DefenseKind::kGaussian:
    case DefenseKind::kClipGaussian: {
      const double s = *defense.sigma;
      return ad::squared_norm(g - mean) * (-1.0 / (2.0 * s * s));
    }
    case DefenseKind::kLaplacian:
      return ad::sum(ad::abs(g - mean)) * (-1.0 / *defense.b);
    case DefenseKind::kLayerPerturb:
      // Layerwise Gaussian surrogate; its scale is absorbed into the
      // objective weight.
      return ad::squared_norm(g - mean) * -0.5;
    case DefenseKind::kPruneGaussian:
    case DefenseKind::kPruneLaplacian: {
      const double p = *defense.prune_rate;
      const bool gauss = defense.kind == DefenseKind::kPruneGaussian;
      const double scale = gauss ? *defense.sigma : *defense.b;
      if (p == 0.0) {
        DefenseMechanism pure = gauss ? DefenseMechanism::gaussian(scale)
                                      : DefenseMechanism::laplacian(scale);
        return coordinate_log_density(pure, observed, mean);
      }
      // Per coordinate: log(exp(a_i) + exp(b_i)) with
      //   a_i = log p     + log noise(g_i; 0)       (constant)
      //   b_i = log (1-p) + log noise(g_i; mean_i)  (traced)
      // evaluated as c_i + log(exp(a_i - c_i) + exp(b_i - c_i)), where the
      // shift c_i = max(a_i, b_i) is held constant.
      const ad::Var diff = g - mean;
      const ad::Var b_term =
          (gauss ? ad::square(diff) * (-1.0 / (2.0 * scale * scale))
                 : ad::abs(diff) * (-1.0 / scale)) +
          std::log1p(-p);
      const std::size_t n = observed.size();
      std::vector<double> a(n), shift(n), exp_a(n);
      const auto bv = b_term.value().data();
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = observed[i];
        a[i] = std::log(p) + (gauss ? -gi * gi / (2.0 * scale * scale)
                                    : -std::abs(gi) / scale);
        shift[i] = std::max(a[i], bv[i]);
        exp_a[i] = std::exp(a[i] - shift[i]);
      }
      const Shape shape = mean.shape();
      const ad::Var shift_v = tape.constant(Tensor(shape, shift));
      const ad::Var mixed =
          ad::log(tape.constant(Tensor(shape, exp_a)) +
                  ad::exp(b_term - shift_v)) +
          shift_v;
      return ad::sum(mixed);
    }
  }
  throw Error("unknown defense kind");
}

// log p(g | true_grad) up to a constant, traced in true_grad.
inline ad::Var log_density(const DefenseMechanism& defense,
                           const Tensor& observed, const ad::Var& true_grad,
                           const models::Layout& segments = {}) {
  defense.validate();
  if (observed.size() != true_grad.size()) {
    throw ShapeError("log_density: observed and true gradient lengths differ");
  }
  const ad::Var mean = released_mean(defense, true_grad);
  if (defense.kind != DefenseKind::kLayerPerturb) {
    return coordinate_log_density(defense, observed, mean);
  }
  if (segments.empty()) {
    throw ConfigError("layer_perturb density needs the gradient segmentation");
  }
  const ad::Var flat = ad::flatten(mean);
  std::optional<ad::Var> total;
  for (const auto& s : segments) {
    if (s.layer == *defense.defended_layer) continue;
    const Tensor obs({s.length},
                     std::vector<double>(observed.data().begin() + s.offset,
                                         observed.data().begin() + s.offset +
                                             s.length));
    const ad::Var term =
        coordinate_log_density(defense, obs, ad::slice(flat, s.offset, s.length));
    total = total ? *total + term : term;
  }
  if (!total) throw ConfigError("layer_perturb: no undefended layers remain");
  return *total;
}

// Untraced convenience wrapper.
inline double log_density_value(const DefenseMechanism& defense,
                                const Tensor& observed, const Tensor& true_grad,
                                const models::Layout& segments = {}) {
  ad::Tape tape;
  return log_density(defense, observed, tape.constant(true_grad), segments)
      .item();
}

// Normalized per-coordinate density p(g_i | mean_i). Defined for the
// coordinate-separable kinds.
inline double coordinate_density(const DefenseMechanism& defense, double g,
                                 double mean) {
  defense.validate();
  const auto gauss = [](double v, double mu, double s) {
    const double z = (v - mu) / s;
    return std::exp(-0.5 * z * z) / (s * std::sqrt(2.0 * std::numbers::pi));
  };
  const auto lap = [](double v, double mu, double b) {
    return std::exp(-std::abs(v - mu) / b) / (2.0 * b);
  };
  switch (defense.kind) {
    case DefenseKind::kGaussian:
    case DefenseKind::kClipGaussian:
      return gauss(g, mean, *defense.sigma);
    case DefenseKind::kLaplacian:
      return lap(g, mean, *defense.b);
    case DefenseKind::kPruneGaussian: {
      const double p = *defense.prune_rate;
      return p * gauss(g, 0.0, *defense.sigma) +
             (1 - p) * gauss(g, mean, *defense.sigma);
    }
    case DefenseKind::kPruneLaplacian: {
      const double p = *defense.prune_rate;
      return p * lap(g, 0.0, *defense.b) + (1 - p) * lap(g, mean, *defense.b);
    }
    default:
      throw DegenerateConditional("no per-coordinate density for defense " +
                                  kind_name(defense.kind));
  }
}

// ---- JSON ----

inline Json to_json(const DefenseMechanism& d) {
  Json j;
  j["kind"] = kind_name(d.kind);
  if (d.sigma) j["sigma"] = *d.sigma;
  if (d.b) j["b"] = *d.b;
  if (d.prune_rate) j["prune_rate"] = *d.prune_rate;
  if (d.clip_bound) j["clip_bound"] = *d.clip_bound;
  if (d.defended_layer) j["defended_layer"] = *d.defended_layer;
  if (d.perturb_mask_rate) j["perturb_mask_rate"] = *d.perturb_mask_rate;
  j["version"] = kDefenseSchemaVersion;
  return j;
}

inline DefenseMechanism defense_from_json(const Json& j) {
  require_known_keys(j,
                     {"kind", "sigma", "b", "prune_rate", "clip_bound",
                      "defended_layer", "perturb_mask_rate", "version"},
                     "defense");
  if (j.contains("version") && j.at("version") != kDefenseSchemaVersion) {
    throw ConfigError("defense: unsupported schema version");
  }
  DefenseMechanism d;
  try {
    d.kind = kind_from_name(require_key(j, "kind", "defense").get<std::string>());
    if (j.contains("sigma")) d.sigma = j.at("sigma").get<double>();
    if (j.contains("b")) d.b = j.at("b").get<double>();
    if (j.contains("prune_rate")) d.prune_rate = j.at("prune_rate").get<double>();
    if (j.contains("clip_bound")) d.clip_bound = j.at("clip_bound").get<double>();
    if (j.contains("defended_layer")) {
      d.defended_layer = j.at("defended_layer").get<std::size_t>();
    }
    if (j.contains("perturb_mask_rate")) {
      d.perturb_mask_rate = j.at("perturb_mask_rate").get<double>();
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("defense: ") + e.what());
  }
  d.validate();
  return d;
}

}  // namespace gradleak::defenses
