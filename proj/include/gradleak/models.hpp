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

// Fully connected ReLU classifiers with softmax cross-entropy.
//
// Parameters live in one flat vector `theta`, ordered W0, b0, W1, b1, ...
// Layer l maps n_l inputs to n_{l+1} outputs: z = W_l h + b_l with W_l of
// shape (n_{l+1}, n_l). Row i of W_0 together with b_0[i] is hidden unit i.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gradleak/autodiff.hpp"
#include "gradleak/error.hpp"
#include "gradleak/json_io.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak::models {

enum class ParamKind { kWeight, kBias };

struct Segment {
  std::size_t layer = 0;
  ParamKind kind = ParamKind::kWeight;
  std::size_t offset = 0;
  std::size_t length = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;  // 1 for biases

  friend bool operator==(const Segment&, const Segment&) = default;
};

using Layout = std::vector<Segment>;

struct NetworkSpec {
  std::vector<std::size_t> layer_sizes;  // n_0 ... n_L
  std::uint64_t seed = 0;

  std::size_t num_layers() const {
    return layer_sizes.empty() ? 0 : layer_sizes.size() - 1;
  }
  std::size_t input_size() const { return layer_sizes.front(); }
  std::size_t num_classes() const { return layer_sizes.back(); }

  void validate() const {
    if (layer_sizes.size() < 2) {
      throw ConfigError("network needs at least one layer (two sizes)");
    }
    for (std::size_t n : layer_sizes) {
      if (n == 0) throw ConfigError("layer sizes must be positive");
    }
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

struct NetworkState {
  Tensor theta;
  Layout segments;
};

struct Network {
  NetworkSpec spec;
  NetworkState state;
};

struct LabeledExample {
  Tensor x;
  std::size_t y = 0;
};

inline Layout make_layout(const NetworkSpec& spec) {
  spec.validate();
  Layout layout;
  std::size_t offset = 0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t in = spec.layer_sizes[l], out = spec.layer_sizes[l + 1];
    layout.push_back({l, ParamKind::kWeight, offset, in * out, out, in});
    offset += in * out;
    layout.push_back({l, ParamKind::kBias, offset, out, out, 1});
    offset += out;
  }
  return layout;
}

inline std::size_t parameter_count(const Layout& layout) {
  return layout.empty() ? 0 : layout.back().offset + layout.back().length;
}

inline void validate_state(const NetworkSpec& spec, const NetworkState& state) {
  if (state.segments != make_layout(spec)) {
    throw ShapeError("network state segmentation does not match its spec");
  }
  if (state.theta.size() != parameter_count(state.segments)) {
    throw ShapeError("theta length does not match segmentation");
  }
}

// He-style fan-in scaling: W ~ U(-a, a) with a = sqrt(6 / fan_in), so that
// Var[W] = 2 / fan_in. Biases start at zero.
inline NetworkState init_parameters(const NetworkSpec& spec) {
  NetworkState state;
  state.segments = make_layout(spec);
  std::vector<double> theta(parameter_count(state.segments), 0.0);
  std::mt19937_64 rng(spec.seed);
  for (const Segment& s : state.segments) {
    if (s.kind != ParamKind::kWeight) continue;
    const double a = std::sqrt(6.0 / static_cast<double>(s.cols));
    std::uniform_real_distribution<double> dist(-a, a);
    for (std::size_t i = 0; i < s.length; ++i) theta[s.offset + i] = dist(rng);
  }
  state.theta = Tensor::vector(std::move(theta));
  return state;
}

// Per-segment tensors, weights shaped (rows, cols) and biases (rows, 1).
inline std::vector<Tensor> unpack(const NetworkState& state) {
  std::vector<Tensor> out;
  const auto theta = state.theta.data();
  for (const Segment& s : state.segments) {
    out.emplace_back(Shape{s.rows, s.cols},
                     std::vector<double>(theta.begin() + s.offset,
                                         theta.begin() + s.offset + s.length));
  }
  return out;
}

inline Tensor pack(std::span<const Tensor> parts) {
  std::vector<double> theta;
  for (const Tensor& t : parts) {
    theta.insert(theta.end(), t.data().begin(), t.data().end());
  }
  return Tensor::vector(std::move(theta));
}

// Parameters bound to a tape as differentiable leaves, one per segment.
struct TracedParams {
  std::vector<ad::Var> segments;  // same order as the layout
};

inline TracedParams bind_parameters(ad::Tape& tape, const NetworkState& state) {
  TracedParams p;
  for (Tensor& t : unpack(state)) p.segments.push_back(tape.leaf(std::move(t)));
  return p;
}

// Logits of shape (n_L). `x` may have any shape with n_0 elements.
inline ad::Var traced_forward(const NetworkSpec& spec, const TracedParams& params,
                              const ad::Var& x) {
  if (x.size() != spec.input_size()) {
    throw ShapeError("input has " + std::to_string(x.size()) +
                     " values, network expects " +
                     std::to_string(spec.input_size()));
  }
  ad::Var h = ad::reshape(x, {x.size(), 1});
  const std::size_t layers = spec.num_layers();
  for (std::size_t l = 0; l < layers; ++l) {
    h = ad::matmul(params.segments[2 * l], h) + params.segments[2 * l + 1];
    if (l + 1 < layers) h = ad::relu(h);
  }
  return ad::flatten(h);
}

// log(sum(exp(z))) with the max subtracted; the shift is a constant so the
// derivative is exact.
inline ad::Var log_sum_exp(const ad::Var& z) {
  const auto v = z.value().data();
  const double m = *std::max_element(v.begin(), v.end());
  return ad::log(ad::sum(ad::exp(z - m))) + m;
}

inline ad::Var cross_entropy(const ad::Var& logits, std::size_t label) {
  if (label >= logits.size()) {
    throw ShapeError("label " + std::to_string(label) + " out of range");
  }
  return log_sum_exp(logits) - ad::sum(ad::slice(logits, label, 1));
}

// Cross-entropy against a probability vector (soft label).
inline ad::Var soft_cross_entropy(const ad::Var& logits, const ad::Var& probs) {
  return log_sum_exp(logits) - ad::dot(probs, logits);
}

inline ad::Var softmax(const ad::Var& z) {
  const ad::Var lse = log_sum_exp(z);
  return ad::exp(z - ad::expand_as(lse, z));
}

// Flat gradient in layout order from per-segment gradients.
inline ad::Var flatten_segments(std::span<const ad::Var> parts) {
  std::vector<ad::Var> flat;
  flat.reserve(parts.size());
  for (const ad::Var& p : parts) flat.push_back(ad::flatten(p));
  return ad::concat(flat);
}

inline Tensor forward(const NetworkSpec& spec, const NetworkState& state,
                      const Tensor& x) {
  validate_state(spec, state);
  ad::Tape tape;
  const TracedParams params = bind_parameters(tape, state);
  return traced_forward(spec, params, tape.constant(x)).value();
}

struct LossAndGrad {
  double loss = 0.0;
  Tensor grad;  // flat, same segmentation as theta
};

inline LossAndGrad loss_and_param_grad(const NetworkSpec& spec,
                                       const NetworkState& state,
                                       const LabeledExample& example) {
  validate_state(spec, state);
  if (example.y >= spec.num_classes()) {
    throw ShapeError("example label out of range");
  }
  ad::Tape tape;
  const TracedParams params = bind_parameters(tape, state);
  const ad::Var logits =
      traced_forward(spec, params, tape.constant(example.x));
  const ad::Var loss = cross_entropy(logits, example.y);
  const std::vector<ad::Var> grads = tape.grad(loss, params.segments);
  return {loss.item(), flatten_segments(grads).value()};
}

// Plain SGD over the dataset stream (example i % n at step i).
inline NetworkState train_steps(const NetworkSpec& spec, NetworkState state,
                                std::span<const LabeledExample> dataset,
                                std::size_t steps, double lr) {
  if (steps == 0) return state;
  if (dataset.empty()) throw ConfigError("train_steps: empty dataset");
  for (std::size_t step = 0; step < steps; ++step) {
    const LabeledExample& ex = dataset[step % dataset.size()];
    LossAndGrad lg;
    try {
      lg = loss_and_param_grad(spec, state, ex);
    } catch (const NonFiniteError& e) {
      throw Error("training diverged at step " + std::to_string(step) + ": " +
                  e.what());
    }
    if (!std::isfinite(lg.loss)) {
      throw Error("training diverged at step " + std::to_string(step) +
                  ": loss is not finite");
    }
    std::vector<double> theta = state.theta.values();
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * lg.grad[i];
    state.theta = Tensor::vector(std::move(theta));
  }
  return state;
}

inline std::size_t predict(const NetworkSpec& spec, const NetworkState& state,
                           const Tensor& x) {
  const Tensor logits = forward(spec, state, x);
  const auto v = logits.data();
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) -
                                  v.begin());
}

// ---- serialization ----

inline Json to_json(const NetworkSpec& spec) {
  Json j;
  j["layer_sizes"] = spec.layer_sizes;
  j["activation"] = "relu";
  j["seed"] = spec.seed;
  return j;
}

inline NetworkSpec network_spec_from_json(const Json& j) {
  require_known_keys(j, {"layer_sizes", "activation", "seed"}, "network");
  NetworkSpec spec;
  const Json& sizes = require_key(j, "layer_sizes", "network");
  if (!sizes.is_array()) throw ConfigError("network.layer_sizes: expected array");
  for (const Json& s : sizes) {
    if (!s.is_number_unsigned()) {
      throw ConfigError("network.layer_sizes: expected positive integers");
    }
    spec.layer_sizes.push_back(s.get<std::size_t>());
  }
  if (j.contains("activation") && j.at("activation") != "relu") {
    throw ConfigError("network.activation: only \"relu\" is supported");
  }
  if (j.contains("seed")) spec.seed = j.at("seed").get<std::uint64_t>();
  spec.validate();
  return spec;
}

struct Checkpoint {
  NetworkSpec spec;
  NetworkState state;
  std::uint64_t step = 0;
};

namespace detail {
inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}
inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}
}  // namespace detail

// Layout: u64 little-endian header length, UTF-8 JSON header, then theta as
// little-endian IEEE-754 doubles.
inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  validate_state(ckpt.spec, ckpt.state);
  Json header;
  header["format"] = "gradleak-checkpoint";
  header["version"] = 1;
  header["spec"] = to_json(ckpt.spec);
  header["step"] = ckpt.step;
  header["num_params"] = ckpt.state.theta.size();
  const std::string text = dump_json(header, -1);
  std::string out;
  detail::put_u64_le(out, text.size());
  out += text;
  for (double v : ckpt.state.theta.data()) {
    detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 8) throw FormatError("checkpoint: truncated header");
  const std::uint64_t hlen = detail::get_u64_le(p);
  if (hlen > bytes.size() - 8) throw FormatError("checkpoint: truncated header");
  Json header;
  try {
    header = Json::parse(bytes.substr(8, hlen));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }
  if (header.value("format", "") != "gradleak-checkpoint") {
    throw FormatError("checkpoint: not a gradleak checkpoint");
  }
  Checkpoint ckpt;
  ckpt.spec = network_spec_from_json(header.at("spec"));
  ckpt.step = header.at("step").get<std::uint64_t>();
  ckpt.state.segments = make_layout(ckpt.spec);
  const std::size_t n = parameter_count(ckpt.state.segments);
  if (header.at("num_params").get<std::size_t>() != n) {
    throw FormatError("checkpoint: parameter count disagrees with spec");
  }
  if (bytes.size() != 8 + hlen + 8 * n) {
    throw FormatError("checkpoint: payload size mismatch");
  }
  std::vector<double> theta(n);
  for (std::size_t i = 0; i < n; ++i) {
    theta[i] = std::bit_cast<double>(detail::get_u64_le(p + 8 + hlen + 8 * i));
  }
  ckpt.state.theta = Tensor::vector(std::move(theta));
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  write_text_file(path, encode_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_text_file(path));
}

}  // namespace gradleak::models
