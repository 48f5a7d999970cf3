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

// Reconstructs one 8x8 digit from a pruned, noised gradient with the
// defense-aware attack and with plain l2 matching, and prints all three.
//
//   reconstruct_digit [index] [steps]

#include <cstdio>
#include <cstdlib>
#include <string>

#include "gradleak/attacks.hpp"
#include "gradleak/data.hpp"
#include "gradleak/defenses.hpp"
#include "gradleak/models.hpp"

namespace gl = gradleak;

namespace {

void draw(const char* title, const gl::Tensor& x, std::size_t row) {
  static const char kRamp[] = " .:-=+*#%@";
  if (row == 0) {
    std::printf("%-20s", title);
    return;
  }
  for (std::size_t j = 0; j < 8; ++j) {
    double v = x[(row - 1) * 8 + j];
    v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    const char c = kRamp[static_cast<int>(v * 9.0 + 0.5)];
    std::printf("%c%c", c, c);
  }
  std::printf("    ");
}

}  // namespace

int main(int argc, char** argv) {
  const std::size_t index = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 0;
  const std::size_t steps = argc > 2 ? std::strtoul(argv[2], nullptr, 10) : 300;
  const std::string dir = GRADLEAK_DATA_DIR;
  const auto ds = gl::data::load_idx(dir + "/digits8x8-images.idx3-ubyte",
                                     dir + "/digits8x8-labels.idx1-ubyte", index + 1);
  const auto ex = ds.example(index);

  const gl::models::NetworkSpec spec{{64, 32, 10}, 3};
  const gl::models::Network net{spec, gl::models::init_parameters(spec)};
  const auto grad = gl::models::loss_and_param_grad(spec, net.state, ex).grad;
  const auto defense = gl::defenses::DefenseMechanism::prune_gaussian(0.5, 0.1);
  const auto released = gl::defenses::sample(defense, grad, net.state.segments, 1);

  gl::attacks::AttackConfig c;
  c.steps = steps;
  c.prior = gl::priors::PriorSpec::tv(8, 8);
  c.beta = 0.1;
  c.seed = 2;
  c.conditional = gl::attacks::ConditionalKind::kBayes;
  const auto bayes = gl::attacks::run_attack(c, released, net, ex.x);
  c.conditional = gl::attacks::ConditionalKind::kL2;
  const auto l2 = gl::attacks::run_attack(c, released, net, ex.x);

  std::printf("digit %zu (label %zu), defense prune 0.5 + gaussian 0.1\n\n", index, ex.y);
  for (std::size_t r = 0; r <= 8; ++r) {
    draw("original", ex.x, r);
    draw("bayes", bayes.x_hat, r);
    draw("l2", l2.x_hat, r);
    std::printf("\n");
  }
  std::printf("\nPSNR  bayes %.2f dB   l2 %.2f dB   (recovered label %zu)\n",
              *bayes.psnr, *l2.psnr, bayes.label);
}
