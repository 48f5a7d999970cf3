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

// Input priors log p(x), up to additive constants. Every prior is <= 0 and
// larger means more probable; penalty-style terms enter negated.

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gradleak/autodiff.hpp"
#include "gradleak/error.hpp"
#include "gradleak/json_io.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak::priors {

enum class PriorKind {
  kUniform,
  kGaussianUnit,
  kLaplacianUnit,
  kTvAniso,
  kPixelRange,
  kTvPlusRange,
};

inline std::string kind_name(PriorKind k) {
  switch (k) {
    case PriorKind::kUniform: return "uniform";
    case PriorKind::kGaussianUnit: return "gaussian_unit";
    case PriorKind::kLaplacianUnit: return "laplacian_unit";
    case PriorKind::kTvAniso: return "tv_aniso";
    case PriorKind::kPixelRange: return "pixel_range";
    case PriorKind::kTvPlusRange: return "tv_plus_range";
  }
  return "?";
}

inline PriorKind kind_from_name(const std::string& s) {
  for (PriorKind k : {PriorKind::kUniform, PriorKind::kGaussianUnit,
                      PriorKind::kLaplacianUnit, PriorKind::kTvAniso,
                      PriorKind::kPixelRange, PriorKind::kTvPlusRange}) {
    if (kind_name(k) == s) return k;
  }
  throw ConfigError("unknown prior kind \"" + s + "\"");
}

struct ImageShape {
  std::size_t height = 0;
  std::size_t width = 0;
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

struct PriorSpec {
  PriorKind kind = PriorKind::kUniform;
  std::optional<double> phi;
  std::optional<ImageShape> image_shape;

  static PriorSpec uniform() { return {}; }
  static PriorSpec gaussian_unit() { return {PriorKind::kGaussianUnit, {}, {}}; }
  static PriorSpec laplacian_unit() {
    return {PriorKind::kLaplacianUnit, {}, {}};
  }
  static PriorSpec tv(std::size_t h, std::size_t w) {
    return {PriorKind::kTvAniso, {}, ImageShape{h, w}};
  }
  static PriorSpec pixel_range(std::size_t h, std::size_t w) {
    return {PriorKind::kPixelRange, {}, ImageShape{h, w}};
  }
  static PriorSpec tv_plus_range(double phi, std::size_t h, std::size_t w) {
    return {PriorKind::kTvPlusRange, phi, ImageShape{h, w}};
  }

  bool is_image_prior() const {
    return kind == PriorKind::kTvAniso || kind == PriorKind::kPixelRange ||
           kind == PriorKind::kTvPlusRange;
  }

  void validate() const {
    if (is_image_prior() != image_shape.has_value()) {
      throw ConfigError("prior " + kind_name(kind) + ": image_shape must be " +
                        (is_image_prior() ? "present" : "absent"));
    }
    if (image_shape && (image_shape->height == 0 || image_shape->width == 0)) {
      throw ConfigError("prior: image dimensions must be positive");
    }
    const bool needs_phi = kind == PriorKind::kTvPlusRange;
    if (phi.has_value() != needs_phi) {
      throw ConfigError(std::string("prior: phi must be ") +
                        (needs_phi ? "present" : "absent"));
    }
    if (phi && !(*phi >= 0.0 && *phi <= 1.0)) {
      throw ConfigError("prior: phi must be in [0, 1]");
    }
  }

  friend bool operator==(const PriorSpec&, const PriorSpec&) = default;
};

namespace detail {

// Forward-difference operator as a dense (n-1, n) matrix.
inline Tensor difference_matrix(std::size_t n) {
  std::vector<double> d((n - 1) * n, 0.0);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    d[i * n + i] = -1.0;
    d[i * n + i + 1] = 1.0;
  }
  return Tensor({n - 1, n}, std::move(d));
}

}  // namespace detail

// Anisotropic total variation sum |x[i+1,j]-x[i,j]| + |x[i,j+1]-x[i,j]|,
// forward differences, no wraparound.
inline ad::Var total_variation(const ad::Var& x, ImageShape shape) {
  ad::Tape& tape = *x.tape();
  const ad::Var img = ad::reshape(x, {shape.height, shape.width});
  std::optional<ad::Var> tv;
  if (shape.height > 1) {
    const ad::Var dv = tape.constant(detail::difference_matrix(shape.height));
    tv = ad::sum(ad::abs(ad::matmul(dv, img)));
  }
  if (shape.width > 1) {
    const ad::Var dh =
        ad::transpose(tape.constant(detail::difference_matrix(shape.width)));
    const ad::Var h = ad::sum(ad::abs(ad::matmul(img, dh)));
    tv = tv ? *tv + h : h;
  }
  if (!tv) return tape.constant(Tensor::scalar(0.0));
  return *tv;
}

// ||x - clip(x, 0, 1)||_2
inline ad::Var pixel_range_error(const ad::Var& x) {
  return ad::norm(x - ad::clip(x, 0.0, 1.0));
}

inline ad::Var log_prior(const PriorSpec& prior, const ad::Var& x) {
  prior.validate();
  if (prior.image_shape &&
      x.size() != prior.image_shape->height * prior.image_shape->width) {
    throw ShapeError("prior: input has " + std::to_string(x.size()) +
                     " values, image shape needs " +
                     std::to_string(prior.image_shape->height *
                                    prior.image_shape->width));
  }
  switch (prior.kind) {
    case PriorKind::kUniform:
      return x.tape()->constant(Tensor::scalar(0.0));
    case PriorKind::kGaussianUnit:
      return ad::squared_norm(x) * -0.5;
    case PriorKind::kLaplacianUnit:
      return -ad::sum(ad::abs(x));
    case PriorKind::kTvAniso:
      return -total_variation(x, *prior.image_shape);
    case PriorKind::kPixelRange:
      return -pixel_range_error(x);
    case PriorKind::kTvPlusRange: {
      const double phi = *prior.phi;
      return -(total_variation(x, *prior.image_shape) * phi +
               pixel_range_error(x) * (1.0 - phi));
    }
  }
  throw Error("unknown prior kind");
}

inline double log_prior_value(const PriorSpec& prior, const Tensor& x) {
  ad::Tape tape;
  return log_prior(prior, tape.constant(x)).item();
}

inline Json to_json(const PriorSpec& p) {
  Json j;
  j["kind"] = kind_name(p.kind);
  if (p.phi) j["phi"] = *p.phi;
  if (p.image_shape) {
    j["image_shape"] = {p.image_shape->height, p.image_shape->width};
  }
  return j;
}

inline PriorSpec prior_from_json(const Json& j) {
  require_known_keys(j, {"kind", "phi", "image_shape"}, "prior");
  PriorSpec p;
  try {
    p.kind = kind_from_name(require_key(j, "kind", "prior").get<std::string>());
    if (j.contains("phi")) p.phi = j.at("phi").get<double>();
    if (j.contains("image_shape")) {
      const auto dims = j.at("image_shape").get<std::vector<std::size_t>>();
      if (dims.size() != 2) throw ConfigError("prior.image_shape: need [H, W]");
      p.image_shape = ImageShape{dims[0], dims[1]};
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("prior: ") + e.what());
  }
  p.validate();
  return p;
}

}  // namespace gradleak::priors
