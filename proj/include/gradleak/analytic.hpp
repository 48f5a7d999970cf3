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

// Closed-form input recovery from an unperturbed fully connected first layer.
//
// For z = A x + b, dl/dA[i,:] = dl/dz_i * x^T and dl/db_i = dl/dz_i, so any
// unit with a non-zero bias gradient gives x^T = dl/dA[i,:] / dl/db_i.

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "gradleak/defenses.hpp"
#include "gradleak/error.hpp"
#include "gradleak/models.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak::analytic {

inline constexpr double kBiasGradTolerance = 1e-12;

class NoUsableNeuron : public Error {
 public:
  using Error::Error;
};

struct Inversion {
  Tensor x;
  std::size_t primary_row = 0;  // argmax |gb_i|
  std::size_t rows_used = 0;
  // Largest deviation of any single usable row's estimate from x.
  double consistency_residual = 0.0;
};

// gA: (n1, n0) weight gradient of layer 0; gb: its n1 bias gradients.
// x is read off the row with the largest |gb_i|; the other usable rows
// (|gb_i| > tolerance) only feed the consistency residual.
inline Inversion invert_first_layer(const Tensor& gA, const Tensor& gb) {
  if (gA.rank() != 2) throw ShapeError("invert_first_layer: gA must be a matrix");
  const std::size_t rows = gA.shape()[0], cols = gA.shape()[1];
  if (gb.size() != rows) {
    throw ShapeError("invert_first_layer: gA rows and gb length differ");
  }
  Inversion inv;
  double best = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    const double bi = gb[i];
    if (!(std::abs(bi) > kBiasGradTolerance)) continue;
    ++inv.rows_used;
    if (std::abs(bi) > best) {
      best = std::abs(bi);
      inv.primary_row = i;
    }
  }
  if (inv.rows_used == 0) {
    throw NoUsableNeuron(
        "no usable neuron: every first-layer bias gradient is zero");
  }
  std::vector<double> acc(cols);
  const double gp = gb[inv.primary_row];
  for (std::size_t j = 0; j < cols; ++j) {
    const double q = gA[inv.primary_row * cols + j] / gp;
    acc[j] = q;
    // The quotient can sit a few ulps from the true input; take the nearby
    // double whose products reproduce the most observed entries.
    std::size_t best_hits = 0;
    double lo = q, hi = q;
    for (int step = 0; step <= 2; ++step) {
      for (const double c : {lo, hi}) {
        if (!std::isfinite(c)) continue;
        std::size_t hits = 0;
        for (std::size_t i = 0; i < rows; ++i) {
          if (std::abs(gb[i]) > kBiasGradTolerance && gb[i] * c == gA[i * cols + j]) {
            ++hits;
          }
        }
        if (hits > best_hits) {
          best_hits = hits;
          acc[j] = c;
        }
      }
      lo = std::nextafter(lo, -std::numeric_limits<double>::infinity());
      hi = std::nextafter(hi, std::numeric_limits<double>::infinity());
    }
  }
  for (std::size_t i = 0; i < rows; ++i) {
    const double bi = gb[i];
    if (!(std::abs(bi) > kBiasGradTolerance)) continue;
    for (std::size_t j = 0; j < cols; ++j) {
      inv.consistency_residual = std::max(
          inv.consistency_residual, std::abs(gA[i * cols + j] / bi - acc[j]));
    }
  }
  inv.x = Tensor::vector(std::move(acc));
  return inv;
}

// Applies the inversion to the layer-0 segments of a released gradient.
inline Inversion invert_released(const defenses::ReleasedGradient& released) {
  const models::Segment* w = nullptr;
  const models::Segment* b = nullptr;
  for (const auto& s : released.segments) {
    if (s.layer != 0) continue;
    (s.kind == models::ParamKind::kWeight ? w : b) = &s;
  }
  if (!w || !b) throw ConfigError("released gradient has no first-layer segments");
  const auto g = released.g.data();
  Tensor gA({w->rows, w->cols}, std::vector<double>(g.begin() + w->offset,
                                                    g.begin() + w->offset + w->length));
  Tensor gb({b->rows}, std::vector<double>(g.begin() + b->offset,
                                           g.begin() + b->offset + b->length));
  return invert_first_layer(gA, gb);
}

// 10 log10(max_val^2 / MSE); +inf when the images are identical.
inline double psnr(const Tensor& x, const Tensor& x_hat, double max_val = 1.0) {
  if (x.size() != x_hat.size()) throw ShapeError("psnr: size mismatch");
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - x_hat[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(x.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / mse);
}

}  // namespace gradleak::analytic
