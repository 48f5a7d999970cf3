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

// Tape-based reverse-mode differentiation over dense tensors.
//
// Every backward rule is expressed with the same primitives the forward pass
// uses, and the nodes it creates are appended to the same tape. Gradients
// taken with `create_graph = true` are therefore ordinary traced values and
// can be differentiated again. This is what lets an attack objective that is
// a function of parameter gradients be differentiated with respect to the
// input.
//
// Derivative conventions at non-smooth points:
//   relu'(0) = 0, abs'(0) = 0, clip'(x) = 1 on the closed interval [lo, hi],
//   and the backward of sqrt uses pinv(y) = (y == 0 ? 0 : 1 / y), so that
//   d sqrt(s) / ds at s = 0 is taken as 0.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gradleak/error.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak::ad {

enum class Op : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kNeg,
  kScale,
  kAddScalar,
  kMatMul,
  kTranspose,
  kReshape,
  kRelu,
  kStepMul,  // g * [x > 0]; no derivative through x
  kAbs,
  kSignMul,  // g * sign(x); no derivative through x
  kLog,
  kExp,
  kSqrt,
  kRecip,
  kPInv,
  kSum,
  kExpand,  // size-1 tensor broadcast to a shape
  kClip,
  kClipMaskMul,  // g * [lo <= x <= hi]; no derivative through x
  kSlice,        // flat range [offset, offset + length)
  kEmbed,        // 1-D input placed at offset inside zeros of `length`
  kConcat,       // flat concatenation
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives and
// has not been cleared.
class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
  inline bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct Node {
  Op op = Op::kConstant;
  std::vector<std::size_t> parents;
  Tensor value;
  double a = 0.0;  // scale factor, scalar addend, clip lower bound
  double b = 0.0;  // clip upper bound
  std::size_t offset = 0;
  std::size_t length = 0;
  Shape target;  // reshape/expand target shape
  bool requires_grad = false;
};

// Append-only record of primitive operations. Parents always precede
// children, so index order is a topological order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value) {
    Node n;
    n.op = Op::kLeaf;
    n.value = std::move(value);
    n.requires_grad = true;
    return append(std::move(n));
  }

  Var constant(Tensor value) {
    Node n;
    n.op = Op::kConstant;
    n.value = std::move(value);
    return append(std::move(n));
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  void clear() { nodes_.clear(); }

  // Creates a node, evaluating it from its parents. Used by the op functions.
  Var record(Node n) {
    bool any = false;
    for (std::size_t p : n.parents) any = any || nodes_[p].requires_grad;
    n.requires_grad = recording_ && any;
    n.value = evaluate(n);
    return append(std::move(n));
  }

  // Derivatives of the scalar `f` with respect to each var in `wrt`.
  // With create_graph the results are differentiable traced values.
  inline std::vector<Var> grad(Var f, std::span<const Var> wrt,
                               bool create_graph = false);

  std::vector<Var> grad(Var f, std::initializer_list<Var> wrt,
                        bool create_graph = false) {
    std::vector<Var> v(wrt);
    return grad(f, std::span<const Var>(v), create_graph);
  }

  // Re-executes every non-leaf node in order, after optionally replacing the
  // values of some leaves. Reproduces recorded values bit-for-bit when the
  // leaves are unchanged.
  void replay(std::span<const std::pair<Var, Tensor>> leaf_values = {}) {
    for (const auto& [var, value] : leaf_values) {
      check_owned(var);
      Node& n = nodes_[var.id()];
      if (n.op != Op::kLeaf && n.op != Op::kConstant) {
        throw Error("replay: only leaves and constants can be replaced");
      }
      if (value.shape() != n.value.shape()) {
        throw ShapeError("replay: leaf shape mismatch");
      }
      n.value = value;
    }
    for (Node& n : nodes_) {
      if (n.op == Op::kLeaf || n.op == Op::kConstant) continue;
      n.value = evaluate(n);
    }
  }

  void check_owned(const Var& v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw Error("variable does not belong to this trace");
    }
  }

 private:
  Var append(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  inline Tensor evaluate(const Node& n) const;
  inline void backward_node(std::size_t id, Var g, std::vector<Var>& adj,
                            const std::vector<char>& live);

  std::vector<Node> nodes_;
  bool recording_ = true;
};

inline const Tensor& Var::value() const { return tape_->node(id_).value; }
inline bool Var::requires_grad() const {
  return tape_->node(id_).requires_grad;
}

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (!a.valid() || a.tape() != b.tape()) {
    throw Error("operands live on different traces");
  }
  return *a.tape();
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

inline Var unary(Op op, const Var& x) {
  Node n;
  n.op = op;
  n.parents = {x.id()};
  return x.tape()->record(std::move(n));
}

inline Var binary(Op op, const Var& x, const Var& y) {
  Tape& t = same_tape(x, y);
  Node n;
  n.op = op;
  n.parents = {x.id(), y.id()};
  return t.record(std::move(n));
}

template <typename F>
Tensor map(const Tensor& x, F f) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return Tensor(x.shape(), std::move(out));
}

template <typename F>
Tensor zip(const Tensor& x, const Tensor& y, F f) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i]);
  return Tensor(x.shape(), std::move(out));
}

inline Tensor matmul_values(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  return Tensor({m, n}, std::move(out));
}

}  // namespace detail

// ---- primitive operations ----

inline Var add(const Var& x, const Var& y) {
  detail::require_same_shape(x, y, "add");
  return detail::binary(Op::kAdd, x, y);
}
inline Var sub(const Var& x, const Var& y) {
  detail::require_same_shape(x, y, "sub");
  return detail::binary(Op::kSub, x, y);
}
inline Var mul(const Var& x, const Var& y) {
  detail::require_same_shape(x, y, "mul");
  return detail::binary(Op::kMul, x, y);
}
inline Var neg(const Var& x) { return detail::unary(Op::kNeg, x); }

inline Var scale(const Var& x, double c) {
  Node n;
  n.op = Op::kScale;
  n.parents = {x.id()};
  n.a = c;
  return x.tape()->record(std::move(n));
}

inline Var add_scalar(const Var& x, double c) {
  Node n;
  n.op = Op::kAddScalar;
  n.parents = {x.id()};
  n.a = c;
  return x.tape()->record(std::move(n));
}

inline Var matmul(const Var& x, const Var& y) {
  if (x.value().rank() != 2 || y.value().rank() != 2 ||
      x.shape()[1] != y.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(x.shape()) +
                     " and " + shape_string(y.shape()));
  }
  return detail::binary(Op::kMatMul, x, y);
}

inline Var transpose(const Var& x) {
  if (x.value().rank() != 2) throw ShapeError("transpose: rank must be 2");
  return detail::unary(Op::kTranspose, x);
}

inline Var reshape(const Var& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: size mismatch " + shape_string(x.shape()) +
                     " -> " + shape_string(shape));
  }
  Node n;
  n.op = Op::kReshape;
  n.parents = {x.id()};
  n.target = std::move(shape);
  return x.tape()->record(std::move(n));
}

inline Var flatten(const Var& x) { return reshape(x, {x.size()}); }

inline Var relu(const Var& x) { return detail::unary(Op::kRelu, x); }

inline Var step_mul(const Var& g, const Var& x) {
  detail::require_same_shape(g, x, "step_mul");
  return detail::binary(Op::kStepMul, g, x);
}

inline Var abs(const Var& x) { return detail::unary(Op::kAbs, x); }

inline Var sign_mul(const Var& g, const Var& x) {
  detail::require_same_shape(g, x, "sign_mul");
  return detail::binary(Op::kSignMul, g, x);
}

inline Var log(const Var& x) { return detail::unary(Op::kLog, x); }
inline Var exp(const Var& x) { return detail::unary(Op::kExp, x); }
inline Var sqrt(const Var& x) { return detail::unary(Op::kSqrt, x); }
inline Var recip(const Var& x) { return detail::unary(Op::kRecip, x); }
inline Var pinv(const Var& x) { return detail::unary(Op::kPInv, x); }
inline Var sum(const Var& x) { return detail::unary(Op::kSum, x); }

inline Var expand(const Var& x, Shape shape) {
  if (x.size() != 1) throw ShapeError("expand: operand must have one element");
  Node n;
  n.op = Op::kExpand;
  n.parents = {x.id()};
  n.target = std::move(shape);
  return x.tape()->record(std::move(n));
}

inline Var clip(const Var& x, double lo, double hi) {
  Node n;
  n.op = Op::kClip;
  n.parents = {x.id()};
  n.a = lo;
  n.b = hi;
  return x.tape()->record(std::move(n));
}

inline Var clip_mask_mul(const Var& g, const Var& x, double lo, double hi) {
  detail::require_same_shape(g, x, "clip_mask_mul");
  Tape& t = detail::same_tape(g, x);
  Node n;
  n.op = Op::kClipMaskMul;
  n.parents = {g.id(), x.id()};
  n.a = lo;
  n.b = hi;
  return t.record(std::move(n));
}

inline Var slice(const Var& x, std::size_t offset, std::size_t length) {
  if (length == 0 || offset + length > x.size()) {
    throw ShapeError("slice: range out of bounds");
  }
  Node n;
  n.op = Op::kSlice;
  n.parents = {x.id()};
  n.offset = offset;
  n.length = length;
  return x.tape()->record(std::move(n));
}

inline Var embed(const Var& x, std::size_t offset, std::size_t length) {
  if (x.value().rank() != 1 || offset + x.size() > length) {
    throw ShapeError("embed: range out of bounds");
  }
  Node n;
  n.op = Op::kEmbed;
  n.parents = {x.id()};
  n.offset = offset;
  n.length = length;
  return x.tape()->record(std::move(n));
}

inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  Node n;
  n.op = Op::kConcat;
  for (const Var& p : parts) {
    detail::same_tape(parts.front(), p);
    n.parents.push_back(p.id());
  }
  return parts.front().tape()->record(std::move(n));
}

// ---- composites ----

inline Var div(const Var& x, const Var& y) { return mul(x, recip(y)); }
inline Var square(const Var& x) { return mul(x, x); }
inline Var dot(const Var& x, const Var& y) { return sum(mul(x, y)); }
inline Var squared_norm(const Var& x) { return sum(square(x)); }
inline Var norm(const Var& x) { return sqrt(squared_norm(x)); }

// Broadcasts a size-1 value to the shape of `like`.
inline Var expand_as(const Var& s, const Var& like) {
  return expand(s, like.shape());
}

inline Var operator+(const Var& x, const Var& y) { return add(x, y); }
inline Var operator-(const Var& x, const Var& y) { return sub(x, y); }
inline Var operator*(const Var& x, const Var& y) { return mul(x, y); }
inline Var operator/(const Var& x, const Var& y) { return div(x, y); }
inline Var operator-(const Var& x) { return neg(x); }
inline Var operator*(const Var& x, double c) { return scale(x, c); }
inline Var operator*(double c, const Var& x) { return scale(x, c); }
inline Var operator/(const Var& x, double c) { return scale(x, 1.0 / c); }
inline Var operator+(const Var& x, double c) { return add_scalar(x, c); }
inline Var operator-(const Var& x, double c) { return add_scalar(x, -c); }

// ---- evaluation ----

inline Tensor Tape::evaluate(const Node& n) const {
  auto in = [&](std::size_t i) -> const Tensor& {
    return nodes_[n.parents[i]].value;
  };
  switch (n.op) {
    case Op::kLeaf:
    case Op::kConstant:
      return n.value;
    case Op::kAdd:
      return detail::zip(in(0), in(1), [](double a, double b) { return a + b; });
    case Op::kSub:
      return detail::zip(in(0), in(1), [](double a, double b) { return a - b; });
    case Op::kMul:
      return detail::zip(in(0), in(1), [](double a, double b) { return a * b; });
    case Op::kNeg:
      return detail::map(in(0), [](double a) { return -a; });
    case Op::kScale: {
      const double c = n.a;
      return detail::map(in(0), [c](double a) { return a * c; });
    }
    case Op::kAddScalar: {
      const double c = n.a;
      return detail::map(in(0), [c](double a) { return a + c; });
    }
    case Op::kMatMul:
      return detail::matmul_values(in(0), in(1));
    case Op::kTranspose: {
      const Tensor& x = in(0);
      const std::size_t r = x.shape()[0], c = x.shape()[1];
      std::vector<double> out(r * c);
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
      }
      return Tensor({c, r}, std::move(out));
    }
    case Op::kReshape:
      return in(0).reshaped(n.target);
    case Op::kRelu:
      return detail::map(in(0), [](double a) { return a > 0.0 ? a : 0.0; });
    case Op::kStepMul:
      return detail::zip(in(0), in(1),
                         [](double g, double x) { return x > 0.0 ? g : 0.0; });
    case Op::kAbs:
      return detail::map(in(0), [](double a) { return std::abs(a); });
    case Op::kSignMul:
      return detail::zip(in(0), in(1), [](double g, double x) {
        return x > 0.0 ? g : (x < 0.0 ? -g : 0.0);
      });
    case Op::kLog:
      return detail::map(in(0), [](double a) { return std::log(a); });
    case Op::kExp:
      return detail::map(in(0), [](double a) { return std::exp(a); });
    case Op::kSqrt:
      return detail::map(in(0), [](double a) { return std::sqrt(a); });
    case Op::kRecip:
      return detail::map(in(0), [](double a) { return 1.0 / a; });
    case Op::kPInv:
      return detail::map(in(0),
                         [](double a) { return a == 0.0 ? 0.0 : 1.0 / a; });
    case Op::kSum: {
      double s = 0.0;
      for (double v : in(0).data()) s += v;
      return Tensor::scalar(s);
    }
    case Op::kExpand:
      return Tensor::filled(n.target, in(0)[0]);
    case Op::kClip: {
      const double lo = n.a, hi = n.b;
      return detail::map(in(0),
                         [lo, hi](double a) { return std::clamp(a, lo, hi); });
    }
    case Op::kClipMaskMul: {
      const double lo = n.a, hi = n.b;
      return detail::zip(in(0), in(1), [lo, hi](double g, double x) {
        return (x >= lo && x <= hi) ? g : 0.0;
      });
    }
    case Op::kSlice: {
      const auto d = in(0).data();
      return Tensor({n.length},
                    std::vector<double>(d.begin() + n.offset,
                                        d.begin() + n.offset + n.length));
    }
    case Op::kEmbed: {
      std::vector<double> out(n.length, 0.0);
      const auto d = in(0).data();
      std::copy(d.begin(), d.end(), out.begin() + n.offset);
      return Tensor({n.length}, std::move(out));
    }
    case Op::kConcat: {
      std::vector<double> out;
      for (std::size_t p : n.parents) {
        const auto d = nodes_[p].value.data();
        out.insert(out.end(), d.begin(), d.end());
      }
      const std::size_t len = out.size();
      return Tensor({len}, std::move(out));
    }
  }
  throw Error("unknown op");
}

// ---- differentiation ----

inline void Tape::backward_node(std::size_t id, Var g, std::vector<Var>& adj,
                                const std::vector<char>& live) {
  // Copy what we need: creating nodes may reallocate nodes_.
  const Op op = nodes_[id].op;
  const std::vector<std::size_t> parents = nodes_[id].parents;
  const double na = nodes_[id].a, nb = nodes_[id].b;
  const std::size_t offset = nodes_[id].offset;

  auto wants = [&](std::size_t k) {
    const std::size_t p = parents[k];
    return live[p] && nodes_[p].requires_grad;
  };
  auto accumulate = [&](std::size_t k, Var contribution) {
    const std::size_t p = parents[k];
    if (!adj[p].valid()) {
      adj[p] = contribution;
    } else {
      adj[p] = add(adj[p], contribution);
    }
  };
  auto parent = [&](std::size_t k) { return Var(this, parents[k]); };
  const Var self(this, id);

  switch (op) {
    case Op::kLeaf:
    case Op::kConstant:
      break;
    case Op::kAdd:
      if (wants(0)) accumulate(0, g);
      if (wants(1)) accumulate(1, g);
      break;
    case Op::kSub:
      if (wants(0)) accumulate(0, g);
      if (wants(1)) accumulate(1, neg(g));
      break;
    case Op::kMul:
      if (wants(0)) accumulate(0, mul(g, parent(1)));
      if (wants(1)) accumulate(1, mul(g, parent(0)));
      break;
    case Op::kNeg:
      if (wants(0)) accumulate(0, neg(g));
      break;
    case Op::kScale:
      if (wants(0)) accumulate(0, scale(g, na));
      break;
    case Op::kAddScalar:
      if (wants(0)) accumulate(0, g);
      break;
    case Op::kMatMul:
      if (wants(0)) accumulate(0, matmul(g, transpose(parent(1))));
      if (wants(1)) accumulate(1, matmul(transpose(parent(0)), g));
      break;
    case Op::kTranspose:
      if (wants(0)) accumulate(0, transpose(g));
      break;
    case Op::kReshape:
      if (wants(0)) accumulate(0, reshape(g, parent(0).shape()));
      break;
    case Op::kRelu:
      if (wants(0)) accumulate(0, step_mul(g, parent(0)));
      break;
    case Op::kStepMul:
      if (wants(0)) accumulate(0, step_mul(g, parent(1)));
      break;
    case Op::kAbs:
      if (wants(0)) accumulate(0, sign_mul(g, parent(0)));
      break;
    case Op::kSignMul:
      if (wants(0)) accumulate(0, sign_mul(g, parent(1)));
      break;
    case Op::kLog:
      if (wants(0)) accumulate(0, mul(g, recip(parent(0))));
      break;
    case Op::kExp:
      if (wants(0)) accumulate(0, mul(g, self));
      break;
    case Op::kSqrt:
      if (wants(0)) accumulate(0, scale(mul(g, pinv(self)), 0.5));
      break;
    case Op::kRecip:
    case Op::kPInv:
      if (wants(0)) accumulate(0, neg(mul(g, mul(self, self))));
      break;
    case Op::kSum:
      if (wants(0)) accumulate(0, expand(g, parent(0).shape()));
      break;
    case Op::kExpand:
      if (wants(0)) {
        accumulate(0, reshape(sum(g), parent(0).shape()));
      }
      break;
    case Op::kClip:
      if (wants(0)) accumulate(0, clip_mask_mul(g, parent(0), na, nb));
      break;
    case Op::kClipMaskMul:
      if (wants(0)) accumulate(0, clip_mask_mul(g, parent(1), na, nb));
      break;
    case Op::kSlice:
      if (wants(0)) {
        const Var p = parent(0);
        accumulate(0, reshape(embed(g, offset, p.size()), p.shape()));
      }
      break;
    case Op::kEmbed:
      if (wants(0)) {
        const Var p = parent(0);
        accumulate(0, slice(g, offset, p.size()));
      }
      break;
    case Op::kConcat: {
      std::size_t at = 0;
      for (std::size_t k = 0; k < parents.size(); ++k) {
        const Var p = parent(k);
        const std::size_t len = p.size();
        if (wants(k)) accumulate(k, reshape(slice(g, at, len), p.shape()));
        at += len;
      }
      break;
    }
  }
}

inline std::vector<Var> Tape::grad(Var f, std::span<const Var> wrt,
                                   bool create_graph) {
  check_owned(f);
  if (f.size() != 1) {
    throw ShapeError("grad: function value must be a scalar, got shape " +
                     shape_string(f.shape()));
  }
  for (const Var& w : wrt) check_owned(w);

  const std::size_t top = f.id();
  // live[i]: node i depends on at least one of the requested variables.
  std::vector<char> live(top + 1, 0);
  for (const Var& w : wrt) {
    if (w.id() <= top) live[w.id()] = 1;
  }
  for (std::size_t i = 0; i <= top; ++i) {
    if (live[i]) continue;
    for (std::size_t p : nodes_[i].parents) {
      if (live[p]) {
        live[i] = 1;
        break;
      }
    }
  }

  std::vector<Var> adj(top + 1);
  const bool saved = recording_;
  recording_ = create_graph;
  try {
    adj[top] = constant(Tensor::filled(f.shape(), 1.0));
    for (std::size_t i = top + 1; i-- > 0;) {
      if (!adj[i].valid() || !live[i]) continue;
      if (!nodes_[i].requires_grad) continue;
      backward_node(i, adj[i], adj, live);
    }
  } catch (...) {
    recording_ = saved;
    throw;
  }
  recording_ = saved;

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.id() <= top && adj[w.id()].valid()) {
      out.push_back(adj[w.id()]);
    } else {
      out.push_back(constant(Tensor::zeros(w.shape())));
    }
  }
  return out;
}

}  // namespace gradleak::ad
