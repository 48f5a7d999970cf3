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

// Datasets: the synthetic Gaussian classification task, IDX image files and
// CSV tensors.

#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gradleak/error.hpp"
#include "gradleak/json_io.hpp"
#include "gradleak/models.hpp"
#include "gradleak/rng.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak::data {

// ---- synthetic task ----

// x ~ N(0, I_dim), y = argmax(W x) for a fixed random W. Rows are i.i.d.
// N(0, 1) vectors rescaled to unit norm, so every row direction is uniform
// and no class wins by row length alone.
struct SyntheticTask {
  std::size_t dim = 20;
  std::size_t classes = 10;
  std::uint64_t seed = 0;
  Tensor W;  // (classes, dim)
};

inline SyntheticTask make_synthetic_task(std::uint64_t seed, std::size_t dim = 20,
                                         std::size_t classes = 10) {
  if (dim == 0 || classes < 2) {
    throw ConfigError("synthetic task: need dim >= 1 and classes >= 2");
  }
  Rng rng(derive_seed(seed, 0));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> w(classes * dim);
  for (double& v : w) v = normal(rng);
  for (std::size_t c = 0; c < classes; ++c) {
    const double n = l2_norm(std::span<const double>(w).subspan(c * dim, dim));
    for (std::size_t j = 0; j < dim; ++j) w[c * dim + j] /= n;
  }
  return {dim, classes, seed, Tensor({classes, dim}, std::move(w))};
}

inline std::size_t synthetic_label(const SyntheticTask& task, const Tensor& x) {
  std::size_t best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < task.classes; ++c) {
    double z = 0.0;
    for (std::size_t j = 0; j < task.dim; ++j) z += task.W[c * task.dim + j] * x[j];
    if (z > best_v) {
      best_v = z;
      best = c;
    }
  }
  return best;
}

inline models::LabeledExample sample_synthetic(const SyntheticTask& task, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> x(task.dim);
  for (double& v : x) v = normal(rng);
  Tensor t = Tensor::vector(std::move(x));
  const std::size_t y = synthetic_label(task, t);
  return {std::move(t), y};
}

// Draw number `index` of the task's own example stream.
inline models::LabeledExample synthetic_example(const SyntheticTask& task,
                                                std::uint64_t index) {
  Rng rng(derive_seed(task.seed, index + 1));
  return sample_synthetic(task, rng);
}

inline Json to_json(const SyntheticTask& task) {
  Json j;
  j["dim"] = task.dim;
  j["classes"] = task.classes;
  j["seed"] = task.seed;
  return j;
}

inline SyntheticTask synthetic_task_from_json(const Json& j) {
  require_known_keys(j, {"dim", "classes", "seed"}, "synthetic task");
  try {
    return make_synthetic_task(j.value("seed", std::uint64_t{0}),
                               j.value("dim", std::size_t{20}),
                               j.value("classes", std::size_t{10}));
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("synthetic task: ") + e.what());
  }
}

// ---- image datasets ----

struct ImageDataset {
  std::vector<Tensor> images;  // (height, width), values in [0, 1]
  std::vector<std::size_t> labels;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_classes = 10;
  double pixel_scale = 255.0;  // stored byte value = pixel * pixel_scale
  // Model inputs are (pixel - mean) / stddev; identity by default.
  double mean = 0.0;
  double stddev = 1.0;

  std::size_t size() const { return images.size(); }

  // Normalized, flattened input and label of example i.
  models::LabeledExample example(std::size_t i) const {
    const Tensor& img = images.at(i);
    if (mean == 0.0 && stddev == 1.0) return {img.flattened(), labels.at(i)};
    std::vector<double> v = img.values();
    for (double& p : v) p = (p - mean) / stddev;
    return {Tensor::vector(std::move(v)), labels.at(i)};
  }

  // Peak value of the [0, 1] pixel range expressed in model input units.
  double psnr_max_val() const { return 1.0 / stddev; }
};

// Sets mean/stddev to the dataset's own pixel statistics.
inline ImageDataset standardized(ImageDataset ds) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const Tensor& img : ds.images) {
    for (double v : img.data()) {
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  if (n == 0) throw ConfigError("cannot standardize an empty dataset");
  ds.mean = sum / static_cast<double>(n);
  const double var = sq / static_cast<double>(n) - ds.mean * ds.mean;
  if (!(var > 0.0)) throw ConfigError("cannot standardize a constant dataset");
  ds.stddev = std::sqrt(var);
  return ds;
}

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::string read_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t be32(const std::string& s, std::size_t at) {
  const auto b = [&](std::size_t i) {
    return static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + i]));
  };
  return (b(0) << 24) | (b(1) << 16) | (b(2) << 8) | b(3);
}

inline void put_be32(std::string& s, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) {
    s.push_back(static_cast<char>((v >> shift) & 0xff));
  }
}

}  // namespace detail

struct IdxHeader {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

inline IdxHeader read_idx_header(const std::string& images_path) {
  const std::string img = detail::read_binary(images_path);
  if (img.size() < 16) throw FormatError(images_path + ": truncated header");
  if (detail::be32(img, 0) != kIdxImagesMagic) {
    throw FormatError(images_path + ": bad magic number");
  }
  return {detail::be32(img, 4), detail::be32(img, 8), detail::be32(img, 12)};
}

// Reads the first `limit` examples of an IDX image/label file pair.
inline ImageDataset load_idx(const std::string& images_path,
                             const std::string& labels_path, std::size_t limit,
                             std::size_t num_classes = 10) {
  const std::string img = detail::read_binary(images_path);
  const std::string lab = detail::read_binary(labels_path);
  if (img.size() < 16) throw FormatError(images_path + ": truncated header");
  if (lab.size() < 8) throw FormatError(labels_path + ": truncated header");
  if (detail::be32(img, 0) != kIdxImagesMagic) {
    throw FormatError(images_path + ": bad magic number");
  }
  if (detail::be32(lab, 0) != kIdxLabelsMagic) {
    throw FormatError(labels_path + ": bad magic number");
  }
  const std::size_t count = detail::be32(img, 4);
  const std::size_t rows = detail::be32(img, 8);
  const std::size_t cols = detail::be32(img, 12);
  const std::size_t label_count = detail::be32(lab, 4);
  if (count != label_count) {
    throw FormatError("image count " + std::to_string(count) +
                      " does not match label count " +
                      std::to_string(label_count));
  }
  if (rows == 0 || cols == 0) throw FormatError(images_path + ": empty images");
  if (img.size() < 16 + count * rows * cols) {
    throw FormatError(images_path + ": truncated pixel data");
  }
  if (lab.size() < 8 + count) throw FormatError(labels_path + ": truncated labels");
  if (limit > count) {
    throw FormatError("requested " + std::to_string(limit) +
                      " examples, file holds " + std::to_string(count));
  }
  ImageDataset ds;
  ds.height = rows;
  ds.width = cols;
  ds.num_classes = num_classes;
  const std::size_t px = rows * cols;
  for (std::size_t i = 0; i < limit; ++i) {
    std::vector<double> v(px);
    for (std::size_t p = 0; p < px; ++p) {
      v[p] = static_cast<unsigned char>(img[16 + i * px + p]) / ds.pixel_scale;
    }
    ds.images.emplace_back(Shape{rows, cols}, std::move(v));
    const std::size_t y = static_cast<unsigned char>(lab[8 + i]);
    if (y >= num_classes) {
      throw FormatError("label " + std::to_string(y) + " of example " +
                        std::to_string(i) + " exceeds class count");
    }
    ds.labels.push_back(y);
  }
  return ds;
}

// Writes a dataset as IDX. Pixels are rounded to the nearest byte.
inline void save_idx(const ImageDataset& ds, const std::string& images_path,
                     const std::string& labels_path) {
  if (ds.images.size() != ds.labels.size()) {
    throw ShapeError("save_idx: image and label counts differ");
  }
  std::string img, lab;
  detail::put_be32(img, kIdxImagesMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(ds.size()));
  detail::put_be32(img, static_cast<std::uint32_t>(ds.height));
  detail::put_be32(img, static_cast<std::uint32_t>(ds.width));
  detail::put_be32(lab, kIdxLabelsMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.images[i].size() != ds.height * ds.width) {
      throw ShapeError("save_idx: image " + std::to_string(i) + " has wrong size");
    }
    for (double v : ds.images[i].data()) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw FormatError("save_idx: pixel outside [0, 1]");
      }
      img.push_back(static_cast<char>(std::lround(v * ds.pixel_scale)));
    }
    lab.push_back(static_cast<char>(ds.labels[i]));
  }
  write_text_file(images_path, img);
  write_text_file(labels_path, lab);
}

// ---- CSV tensors ----

// Parses comma-separated rows and fills `shape` in row-major order. All rows
// must have the same number of columns.
inline Tensor parse_csv_tensor(std::string_view text, const Shape& shape,
                               const std::string& where = "csv") {
  std::vector<double> values;
  std::size_t columns = 0, line_no = 0, rows = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    std::size_t cols = 0;
    std::size_t at = 0;
    while (true) {
      std::size_t comma = line.find(',', at);
      std::string_view field =
          line.substr(at, comma == std::string_view::npos ? line.size() - at
                                                          : comma - at);
      while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
      while (!field.empty() && field.back() == ' ') field.remove_suffix(1);
      double v = 0.0;
      const auto [ptr, ec] =
          std::from_chars(field.data(), field.data() + field.size(), v);
      if (field.empty() || ec != std::errc() ||
          ptr != field.data() + field.size()) {
        throw FormatError(where + ":" + std::to_string(line_no) +
                          ": cannot parse \"" + std::string(field) + "\"");
      }
      values.push_back(v);
      ++cols;
      if (comma == std::string_view::npos) break;
      at = comma + 1;
    }
    if (rows > 0 && cols != columns) {
      throw FormatError(where + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(columns) + " columns, got " +
                        std::to_string(cols));
    }
    columns = cols;
    ++rows;
  }
  if (values.empty()) throw FormatError(where + ": no data");
  if (values.size() != shape_size(shape)) {
    throw FormatError(where + ": " + std::to_string(rows) + "x" +
                      std::to_string(columns) + " values do not fill shape " +
                      shape_string(shape));
  }
  return Tensor(shape, std::move(values));
}

inline Tensor load_csv_tensor(const std::string& path, const Shape& shape) {
  return parse_csv_tensor(read_text_file(path), shape, path);
}

// Rank-2 tensors are written one matrix row per line; anything else as a
// single line. Values use 17 significant digits.
inline std::string format_csv_tensor(const Tensor& t) {
  const std::size_t cols = t.rank() == 2 ? t.shape()[1] : t.size();
  std::string out;
  for (std::size_t i = 0; i < t.size(); ++i) {
    out += format_double(t[i]);
    out += (i + 1) % cols == 0 ? "\n" : ",";
  }
  return out;
}

inline void save_csv_tensor(const std::string& path, const Tensor& t) {
  write_text_file(path, format_csv_tensor(t));
}

}  // namespace gradleak::data
