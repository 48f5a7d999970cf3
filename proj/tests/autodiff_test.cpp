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

#include "gradleak/autodiff.hpp"

#include <gtest/gtest.h>

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gradleak/models.hpp"
#include "test_util.hpp"

namespace gradleak {
namespace {

using ad::Tape;
using ad::Var;
using testing::central_difference;
using testing::relative_error;

TEST(Autodiff, SquareSum) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1.0, 2.0}));
  auto g = t.grad(ad::sum(x * x), {x});
  EXPECT_EQ(g[0].value().values(), (std::vector<double>{2.0, 4.0}));
}

TEST(Autodiff, ReluSubgradient) {
  Tape t;
  Var x = t.leaf(Tensor::vector({-1.0, 3.0, 0.0}));
  auto g = t.grad(ad::sum(ad::relu(x)), {x});
  EXPECT_EQ(g[0].value().values(), (std::vector<double>{0.0, 1.0, 0.0}));
}

TEST(Autodiff, AbsAtZeroIsZero) {
  Tape t;
  Var x = t.leaf(Tensor::vector({-2.0, 0.0, 5.0}));
  auto g = t.grad(ad::sum(ad::abs(x)), {x});
  EXPECT_EQ(g[0].value().values(), (std::vector<double>{-1.0, 0.0, 1.0}));
}

TEST(Autodiff, NonScalarFunctionRejected) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(t.grad(x * x, {x}), ShapeError);
}

TEST(Autodiff, ForeignLeafRejected) {
  Tape t, other;
  Var x = t.leaf(Tensor::vector({1.0}));
  Var y = other.leaf(Tensor::vector({1.0}));
  EXPECT_THROW(t.grad(ad::sum(x), {y}), Error);
}

TEST(Autodiff, ZeroDimensionalInputRejected) {
  EXPECT_THROW(Tensor({0}, {}), ShapeError);
  EXPECT_THROW(Tensor({3, 0}, {}), ShapeError);
}

TEST(Autodiff, NonFiniteValuesRejected) {
  Tape t;
  Var x = t.leaf(Tensor::vector({-1.0}));
  EXPECT_THROW(ad::log(x), NonFiniteError);
  EXPECT_THROW(Tensor::vector({std::nan("")}), NonFiniteError);
}

TEST(Autodiff, UnusedLeafGetsZeros) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1.0, 2.0}));
  Var y = t.leaf(Tensor::vector({3.0}));
  auto g = t.grad(ad::sum(x), {x, y});
  EXPECT_EQ(g[1].value().values(), (std::vector<double>{0.0}));
}

struct Primitive {
  std::string name;
  std::function<Var(const Var&)> f;  // input vector of length 6
  double lo, hi;                     // sampling range (away from kinks)
};

std::vector<Primitive> primitives() {
  auto mat = [](const Var& x) { return ad::reshape(x, {2, 3}); };
  return {
      {"add", [](const Var& x) { return x + x * 0.5; }, -2, 2},
      {"sub", [](const Var& x) { return x - ad::exp(x); }, -2, 2},
      {"mul", [](const Var& x) { return x * ad::sqrt(x); }, 0.5, 2},
      {"neg", [](const Var& x) { return -x * x; }, -2, 2},
      {"scale_shift", [](const Var& x) { return (x * 3.0 + 1.0) * x; }, -2, 2},
      {"matmul",
       [mat](const Var& x) {
         return ad::flatten(ad::matmul(mat(x), ad::transpose(mat(x))));
       },
       -2, 2},
      {"relu", [](const Var& x) { return ad::relu(x) * x; }, 0.2, 2},
      {"relu_neg", [](const Var& x) { return ad::relu(x) + x * x; }, -2, -0.2},
      {"abs", [](const Var& x) { return ad::abs(x) * x; }, 0.2, 2},
      {"abs_neg", [](const Var& x) { return ad::abs(x) * x; }, -2, -0.2},
      {"log", [](const Var& x) { return ad::log(x) * x; }, 0.5, 2},
      {"exp", [](const Var& x) { return ad::exp(x * x); }, -1, 1},
      {"sqrt", [](const Var& x) { return ad::sqrt(x * x + 1.0); }, -2, 2},
      {"recip", [](const Var& x) { return ad::recip(x) * ad::exp(x); }, 0.5, 2},
      {"pinv", [](const Var& x) { return ad::pinv(x + 3.0); }, -1, 1},
      {"sum_expand",
       [](const Var& x) { return ad::expand_as(ad::sum(x * x), x) * x; }, -2,
       2},
      {"clip_inside", [](const Var& x) { return ad::clip(x, -3.0, 3.0) * x; },
       -2, 2},
      {"clip_outside", [](const Var& x) { return ad::clip(x, -0.1, 0.1) * x; },
       0.5, 2},
      {"slice_concat",
       [](const Var& x) {
         std::vector<Var> parts{ad::slice(x, 3, 3) * ad::slice(x, 0, 3),
                                ad::exp(ad::slice(x, 1, 2))};
         return ad::concat(parts);
       },
       -2, 2},
      {"embed", [](const Var& x) { return ad::embed(x * x, 2, 9); }, -2, 2},
      {"div", [](const Var& x) { return x / (x * x + 1.0); }, -2, 2},
  };
}

// d/dx of w . f(x) for every primitive, compared to central differences.
TEST(Autodiff, PrimitivesMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (const auto& p : primitives()) {
    std::uniform_real_distribution<double> u(p.lo, p.hi);
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<double> x0(6);
      for (double& v : x0) v = u(rng);
      std::vector<double> w;
      {
        Tape t;
        w = testing::normal_vector(p.f(t.constant(Tensor::vector(x0))).size(),
                                   rng);
      }
      auto value = [&](const std::vector<double>& x) {
        Tape t;
        Var y = p.f(t.constant(Tensor::vector(x)));
        return ad::dot(ad::flatten(y), t.constant(Tensor::vector(w))).item();
      };
      Tape t;
      Var x = t.leaf(Tensor::vector(x0));
      Var f = ad::dot(ad::flatten(p.f(x)), t.constant(Tensor::vector(w)));
      const auto g = t.grad(f, {x})[0].value();
      const auto fd = central_difference(value, x0);
      EXPECT_LT(relative_error(g.data(), fd), 1e-6) << p.name;
    }
  }
}

// Second derivatives through create_graph, compared to differences of the
// first derivative.
TEST(Autodiff, SecondOrderPrimitivesMatchFiniteDifferences) {
  std::mt19937_64 rng(12);
  for (const auto& p : primitives()) {
    std::uniform_real_distribution<double> u(p.lo, p.hi);
    std::vector<double> x0(6);
    for (double& v : x0) v = u(rng);
    std::vector<double> w, r = testing::normal_vector(6, rng);
    {
      Tape t;
      w = testing::normal_vector(p.f(t.constant(Tensor::vector(x0))).size(), rng);
    }
    // h(x) = r . grad_x (w . f(x))
    auto inner = [&](Tape& t, const Var& x) {
      Var f = ad::dot(ad::flatten(p.f(x)), t.constant(Tensor::vector(w)));
      Var g = t.grad(f, {x}, true)[0];
      return ad::dot(g, t.constant(Tensor::vector(r)));
    };
    auto value = [&](const std::vector<double>& x) {
      Tape t;
      return inner(t, t.leaf(Tensor::vector(x))).item();
    };
    Tape t;
    Var x = t.leaf(Tensor::vector(x0));
    const auto g = t.grad(inner(t, x), {x})[0].value();
    const auto fd = central_difference(value, x0);
    EXPECT_LT(relative_error(g.data(), fd, 1e-6), 1e-5) << p.name;
  }
}

TEST(Autodiff, Linearity) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x0 = testing::normal_vector(5, rng);
    std::normal_distribution<double> n(0.0, 1.0);
    const double a = n(rng), b = n(rng);
    Tape t;
    Var x = t.leaf(Tensor::vector(x0));
    Var f = ad::sum(ad::exp(x) * x);
    Var g = ad::squared_norm(ad::matmul(ad::reshape(x, {5, 1}),
                                        ad::reshape(x, {1, 5})));
    const auto gf = t.grad(f, {x})[0].value();
    const auto gg = t.grad(g, {x})[0].value();
    const auto gl = t.grad(f * a + g * b, {x})[0].value();
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_NEAR(gl[i], a * gf[i] + b * gg[i],
                  1e-12 * (1.0 + std::abs(gl[i])));
    }
  }
}

TEST(Autodiff, ReplayAndGradientsAreBitIdentical) {
  std::mt19937_64 rng(7);
  const auto x0 = testing::normal_vector(4, rng);
  auto run = [&] {
    Tape t;
    Var x = t.leaf(Tensor::vector(x0));
    Var f = ad::sum(ad::relu(ad::matmul(ad::reshape(x, {2, 2}),
                                        ad::reshape(x, {2, 2}))));
    Var g = t.grad(f * f, {x}, true)[0];
    Var h = ad::squared_norm(g);
    Tensor recorded = h.value();
    t.replay();
    EXPECT_EQ(h.value(), recorded);
    return t.grad(h, {x})[0].value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Autodiff, ReplayWithNewLeafValues) {
  Tape t;
  Var x = t.leaf(Tensor::vector({1.0, 2.0}));
  Var f = ad::sum(x * x);
  const std::pair<Var, Tensor> swap{x, Tensor::vector({3.0, 4.0})};
  t.replay(std::span(&swap, 1));
  EXPECT_EQ(f.item(), 25.0);
}

// Two-layer linear net z = A W x with the linear loss l = u . z, so that
// grad_A l = u (W x)^T and grad_W l = A^T u x^T. Gradient matching against
// (GA, GW) has the closed-form input gradient
//   2 W^T (|u|^2 W x - GA^T u) + 2 (|a|^2 x - GW^T a),  a = A^T u.
TEST(Autodiff, LinearNetGradientMatchingClosedForm) {
  const std::size_t n = 4, h = 3, c = 2;
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto Wv = testing::normal_vector(h * n, rng);
    const auto Av = testing::normal_vector(c * h, rng);
    const auto uv = testing::normal_vector(c, rng);
    const auto GA = testing::normal_vector(c * h, rng);
    const auto GW = testing::normal_vector(h * n, rng);
    const auto x0 = testing::normal_vector(n, rng);

    Tape t;
    Var x = t.leaf(Tensor({n, 1}, x0));
    Var W = t.leaf(Tensor({h, n}, Wv));
    Var A = t.leaf(Tensor({c, h}, Av));
    Var u = t.constant(Tensor({c, 1}, uv));
    Var loss = ad::sum(u * ad::matmul(A, ad::matmul(W, x)));
    auto g = t.grad(loss, {A, W}, true);
    Var obj = ad::squared_norm(g[0] - t.constant(Tensor({c, h}, GA))) +
              ad::squared_norm(g[1] - t.constant(Tensor({h, n}, GW)));
    const auto dx = t.grad(obj, {x})[0].value();

    // Independent evaluation of the closed form.
    std::vector<double> Wx(h, 0.0), a(h, 0.0), expected(n, 0.0);
    double uu = 0.0, aa = 0.0;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < n; ++j) Wx[i] += Wv[i * n + j] * x0[j];
    for (std::size_t k = 0; k < c; ++k) uu += uv[k] * uv[k];
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t k = 0; k < c; ++k) a[i] += Av[k * h + i] * uv[k];
    for (double v : a) aa += v * v;
    std::vector<double> inner(h);
    for (std::size_t i = 0; i < h; ++i) {
      double gau = 0.0;
      for (std::size_t k = 0; k < c; ++k) gau += GA[k * h + i] * uv[k];
      inner[i] = uu * Wx[i] - gau;
    }
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0, gwa = 0.0;
      for (std::size_t i = 0; i < h; ++i) {
        s += Wv[i * n + j] * inner[i];
        gwa += GW[i * n + j] * a[i];
      }
      expected[j] = 2.0 * s + 2.0 * (aa * x0[j] - gwa);
    }
    EXPECT_LT(relative_error(dx.data(), expected), 1e-12);
  }
}

// Gradient matching through a two-layer ReLU MLP with cross-entropy.
TEST(Autodiff, MlpGradientMatchingMatchesFiniteDifferences) {
  models::NetworkSpec spec{{6, 5, 3}, 21};
  const auto state = models::init_parameters(spec);
  std::mt19937_64 rng(8);
  const auto target = testing::normal_vector(state.theta.size(), rng, 0.1);
  auto objective = [&](Tape& t, const Var& x) {
    const auto params = models::bind_parameters(t, state);
    Var loss = models::cross_entropy(models::traced_forward(spec, params, x), 1);
    auto g = t.grad(loss, params.segments, true);
    Var flat = models::flatten_segments(g);
    return ad::squared_norm(flat - t.constant(Tensor::vector(target)));
  };
  int checked = 0;
  while (checked < 10) {
    const auto x0 = testing::normal_vector(6, rng);
    // Resample near ReLU kinks.
    const auto params = models::unpack(state);
    bool near_kink = false;
    for (std::size_t i = 0; i < 5; ++i) {
      double z = 0.0;
      for (std::size_t j = 0; j < 6; ++j) z += params[0][i * 6 + j] * x0[j];
      near_kink = near_kink || std::abs(z) < 1e-3;
    }
    if (near_kink) continue;
    Tape t;
    Var x = t.leaf(Tensor::vector(x0));
    const auto g = t.grad(objective(t, x), {x})[0].value();
    const auto fd = central_difference(
        [&](const std::vector<double>& v) {
          Tape s;
          return objective(s, s.constant(Tensor::vector(v))).item();
        },
        x0);
    EXPECT_LT(relative_error(g.data(), fd), 1e-4);
    ++checked;
  }
}

}  // namespace
}  // namespace gradleak
