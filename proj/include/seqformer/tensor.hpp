/* Copyright 2026 The seqformer authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "seqformer/error.hpp"
#include "seqformer/rng.hpp"

namespace seqformer {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

template <class Real>
class Tape;

namespace detail {

template <class Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until the reverse sweep touches it
  bool requires_grad = false;
  Tape<Real>* tape = nullptr;  // tape that produced this node, if any

  std::vector<Real>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), Real(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor. A Tensor is a cheap shared handle: copies alias
/// the same storage. Values are immutable through the op API; only the
/// optimizer (or a test wiggling inputs) goes through values_mut().
template <class Real>
class Tensor {
 public:
  using Node = detail::TensorNode<Real>;

  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<Real> data) {
    return make(std::move(shape), std::move(data), false);
  }

  /// Leaf tensor that participates in gradient computation.
  static Tensor parameter(Shape shape, std::vector<Real> data) {
    return make(std::move(shape), std::move(data), true);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = checked_numel(shape);
    return make(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad);
  }

  static Tensor full(Shape shape, Real v, bool requires_grad = false) {
    std::size_t n = checked_numel(shape);
    return make(std::move(shape), std::vector<Real>(n, v), requires_grad);
  }

  static Tensor scalar(Real v) { return constant({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }

  const std::vector<Real>& values() const { return node_->value; }

  /// Mutable view of the raw values. Bypasses the tape; callers own the
  /// consistency of any graph built on top.
  std::vector<Real>& values_mut() { return node_->value; }

  Real at(std::size_t flat) const { return node_->value.at(flat); }
  Real at(std::size_t i, std::size_t j) const {
    return node_->value.at(i * node_->shape.at(1) + j);
  }

  bool requires_grad() const { return node_->requires_grad; }

  bool has_grad() const { return !node_->grad.empty(); }

  const std::vector<Real>& grad() const {
    if (node_->grad.empty())
      throw TapeError("grad(): no gradient has been accumulated on this tensor");
    return node_->grad;
  }

  void zero_grad() {
    if (!node_->grad.empty())
      std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
  }

  Tape<Real>* tape() const { return node_->tape; }

  bool all_finite() const {
    for (Real v : node_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<Node> node() const { return node_; }

  static Tensor from_node(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }

 private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static std::size_t checked_numel(const Shape& shape) {
    if (shape.empty()) throw ValueError("tensor shape must have at least one axis");
    for (std::size_t e : shape)
      if (e == 0) throw ValueError("tensor extents must be positive, got shape " + shape_str(shape));
    return shape_numel(shape);
  }

  static Tensor make(Shape shape, std::vector<Real> data, bool requires_grad) {
    std::size_t n = checked_numel(shape);
    if (n != data.size()) {
      std::ostringstream os;
      os << "tensor data length " << data.size() << " does not match shape "
         << shape_str(shape) << " (" << n << " elements)";
      throw ShapeError(os.str());
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  std::shared_ptr<Node> node_;
};

/// Ordered record of the differentiable ops executed while the tape was
/// active on the current thread. Recording order is the topological order
/// of the forward pass; backward() replays it in reverse exactly once.
template <class Real>
class Tape {
 public:
  Tape() {
    prev_ = active_slot();
    active_slot() = this;
  }
  ~Tape() { active_slot() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_slot(); }

  void record(std::function<void()> pull) {
    records_.push_back(std::move(pull));
    ++fresh_ops_;
  }

  std::size_t size() const { return records_.size(); }

  /// Reverse sweep from `loss`. Consumes the recorded ops; calling again
  /// without recording a new forward pass is an error.
  void backward(const Tensor<Real>& loss) {
    if (!loss.defined()) throw TapeError("backward: loss tensor is empty");
    if (loss.numel() != 1)
      throw TapeError("backward: loss must be a scalar, got shape " +
                      shape_str(loss.shape()));
    if (loss.tape() != this)
      throw TapeError(
          "backward: loss was not recorded on this tape (construct the loss "
          "while the tape is active)");
    if (fresh_ops_ == 0)
      throw TapeError(
          "backward: stale tape; backward already ran for this forward pass");
    auto ln = loss.node();
    ln->grad_buffer()[0] += Real(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    records_.clear();
    fresh_ops_ = 0;
  }

  void reset() {
    records_.clear();
    fresh_ops_ = 0;
  }

 private:
  static Tape*& active_slot() {
    static thread_local Tape* slot = nullptr;
    return slot;
  }

  std::vector<std::function<void()>> records_;
  std::size_t fresh_ops_ = 0;
  Tape* prev_ = nullptr;
};

template <class Real>
inline void backward(const Tensor<Real>& loss) {
  Tape<Real>* t = Tape<Real>::active();
  if (!t) throw TapeError("backward: no active tape on this thread");
  t->backward(loss);
}

/// Throws NonFiniteError if `x` holds a NaN or Inf. Use at loss values and
/// other places where silent propagation must stop.
template <class Real>
inline const Tensor<Real>& check_finite(const Tensor<Real>& x,
                                        const std::string& context) {
  const auto& v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(static_cast<double>(v[i]))) {
      std::ostringstream os;
      os << context << ": non-finite value at flat index " << i;
      throw NonFiniteError(os.str());
    }
  }
  return x;
}

namespace detail {

template <class Real>
inline bool tracking(std::initializer_list<const Tensor<Real>*> ins) {
  if (!Tape<Real>::active()) return false;
  for (const Tensor<Real>* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

/// Marks `out` as produced by a recorded op on the active tape.
template <class Real>
inline void mark_tracked(Tensor<Real>& out) {
  auto n = out.node();
  n->requires_grad = true;
  n->tape = Tape<Real>::active();
}

template <class Real>
inline void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b,
                               const char* op) {
  if (a.shape() != b.shape()) {
    std::ostringstream os;
    os << op << ": shapes disagree: " << shape_str(a.shape()) << " vs "
       << shape_str(b.shape());
    throw ShapeError(os.str());
  }
}

template <class Real>
inline void require_rank(const Tensor<Real>& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    std::ostringstream os;
    os << op << ": expected rank-" << r << " tensor, got shape "
       << shape_str(t.shape());
    throw ShapeError(os.str());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<Real> out(a.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  Tensor<Real> r = Tensor<Real>::constant(a.shape(), std::move(out));
  if (detail::tracking<Real>({&a, &b})) {
    detail::mark_tracked(r);
    auto an = a.node(), bn = b.node(), on = r.node();
    Tape<Real>::active()->record([an, bn, on] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return r;
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<Real> out(a.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  Tensor<Real> r = Tensor<Real>::constant(a.shape(), std::move(out));
  if (detail::tracking<Real>({&a, &b})) {
    detail::mark_tracked(r);
    auto an = a.node(), bn = b.node(), on = r.node();
    Tape<Real>::active()->record([an, bn, on] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return r;
}

/// Hadamard (elementwise) product.
template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<Real> out(a.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Tensor<Real> r = Tensor<Real>::constant(a.shape(), std::move(out));
  if (detail::tracking<Real>({&a, &b})) {
    detail::mark_tracked(r);
    auto an = a.node(), bn = b.node(), on = r.node();
    Tape<Real>::active()->record([an, bn, on] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->value[i];
      }
    });
  }
  return r;
}

template <class Real>
Tensor<Real> mul_scalar(const Tensor<Real>& a, Real c) {
  std::vector<Real> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  Tensor<Real> r = Tensor<Real>::constant(a.shape(), std::move(out));
  if (detail::tracking<Real>({&a})) {
    detail::mark_tracked(r);
    auto an = a.node(), on = r.node();
    Tape<Real>::active()->record([an, on, c] {
      if (on->grad.empty() || !an->requires_grad) return;
      const auto& g = on->grad;
      auto& ga = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return r;
}

template <class Real>
Tensor<Real> add_scalar(const Tensor<Real>& a, Real c) {
  std::vector<Real> out(a.numel());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  Tensor<Real> r = Tensor<Real>::constant(a.shape(), std::move(out));
  if (detail::tracking<Real>({&a})) {
    detail::mark_tracked(r);
    auto an = a.node(), on = r.node();
    Tape<Real>::active()->record([an, on] {
      if (on->grad.empty() || !an->requires_grad) return;
      const auto& g = on->grad;
      auto& ga = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return r;
}

/// Broadcasts `row` ([D]) over every row of `x` ([T x D]).
template <class Real>
Tensor<Real> add_row(const Tensor<Real>& x, const Tensor<Real>& row) {
  detail::require_rank(x, 2, "add_row");
  detail::require_rank(row, 1, "add_row");
  const std::size_t t = x.extent(0), d = x.extent(1);
  if (row.extent(0) != d) {
    std::ostringstream os;
    os << "add_row: row length " << row.extent(0) << " does not match "
       << shape_str(x.shape());
    throw ShapeError(os.str());
  }
  std::vector<Real> out(x.numel());
  const auto& xv = x.values();
  const auto& rv = row.values();
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] + rv[j];
  Tensor<Real> r = Tensor<Real>::constant(x.shape(), std::move(out));
  if (detail::tracking<Real>({&x, &row})) {
    detail::mark_tracked(r);
    auto xn = x.node(), rn = row.node(), on = r.node();
    Tape<Real>::active()->record([xn, rn, on, t, d] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      if (xn->requires_grad) {
        auto& gx = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (rn->requires_grad) {
        auto& gr = rn->grad_buffer();
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < d; ++j) gr[j] += g[i * d + j];
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.extent(0), k = a.extent(1);
  const std::size_t k2 = b.extent(0), n = b.extent(1);
  if (k != k2) {
    std::ostringstream os;
    os << "matmul: inner dimensions disagree: " << shape_str(a.shape())
       << " vs " << shape_str(b.shape());
    throw ShapeError(os.str());
  }
  std::vector<Real> out(m * n, Real(0));
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t t = 0; t < k; ++t) {
      const Real aval = av[i * k + t];
      if (aval == Real(0)) continue;
      const Real* brow = bv.data() + t * n;
      Real* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aval * brow[j];
    }
  }
  Tensor<Real> r = Tensor<Real>::constant({m, n}, std::move(out));
  if (detail::tracking<Real>({&a, &b})) {
    detail::mark_tracked(r);
    auto an = a.node(), bn = b.node(), on = r.node();
    Tape<Real>::active()->record([an, bn, on, m, k, n] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        // dA = G * B^T
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t t = 0; t < k; ++t) {
            Real acc = 0;
            const Real* grow = g.data() + i * n;
            const Real* brow = bn->value.data() + t * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + t] += acc;
          }
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        // dB = A^T * G
        for (std::size_t t = 0; t < k; ++t)
          for (std::size_t i = 0; i < m; ++i) {
            const Real aval = an->value[i * k + t];
            if (aval == Real(0)) continue;
            const Real* grow = g.data() + i * n;
            Real* brow = gb.data() + t * n;
            for (std::size_t j = 0; j < n; ++j) brow[j] += aval * grow[j];
          }
      }
    });
  }
  return r;
}

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& x) {
  detail::require_rank(x, 2, "transpose");
  const std::size_t m = x.extent(0), n = x.extent(1);
  std::vector<Real> out(m * n);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  Tensor<Real> r = Tensor<Real>::constant({n, m}, std::move(out));
  if (detail::tracking<Real>({&x})) {
    detail::mark_tracked(r);
    auto xn = x.node(), on = r.node();
    Tape<Real>::active()->record([xn, on, m, n] {
      if (on->grad.empty() || !xn->requires_grad) return;
      const auto& g = on->grad;
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    std::ostringstream os;
    os << "reshape: cannot view " << shape_str(x.shape()) << " as "
       << shape_str(new_shape);
    throw ShapeError(os.str());
  }
  Tensor<Real> r = Tensor<Real>::constant(std::move(new_shape), x.values());
  if (detail::tracking<Real>({&x})) {
    detail::mark_tracked(r);
    auto xn = x.node(), on = r.node();
    Tape<Real>::active()->record([xn, on] {
      if (on->grad.empty() || !xn->requires_grad) return;
      const auto& g = on->grad;
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return r;
}

template <class Real>
Tensor<Real> slice_cols(const Tensor<Real>& x, std::size_t c0, std::size_t c1) {
  detail::require_rank(x, 2, "slice_cols");
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  if (!(c0 < c1 && c1 <= cols)) {
    std::ostringstream os;
    os << "slice_cols: range [" << c0 << ", " << c1 << ") invalid for "
       << shape_str(x.shape());
    throw ShapeError(os.str());
  }
  const std::size_t w = c1 - c0;
  std::vector<Real> out(rows * w);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = xv[i * cols + c0 + j];
  Tensor<Real> r = Tensor<Real>::constant({rows, w}, std::move(out));
  if (detail::tracking<Real>({&x})) {
    detail::mark_tracked(r);
    auto xn = x.node(), on = r.node();
    Tape<Real>::active()->record([xn, on, rows, cols, c0, w] {
      if (on->grad.empty() || !xn->requires_grad) return;
      const auto& g = on->grad;
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < w; ++j)
          gx[i * cols + c0 + j] += g[i * w + j];
    });
  }
  return r;
}

template <class Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw ValueError("concat_cols: no tensors given");
  const std::size_t rows = parts[0].extent(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.extent(0) != rows)
      throw ShapeError("concat_cols: row counts disagree: " +
                       shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    total += p.extent(1);
  }
  std::vector<Real> out(rows * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.extent(1);
    const auto& pv = p.values();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = pv[i * w + j];
    off += w;
  }
  Tensor<Real> r = Tensor<Real>::constant({rows, total}, std::move(out));
  bool track = false;
  for (const auto& p : parts)
    if (detail::tracking<Real>({&p})) track = true;
  if (track) {
    detail::mark_tracked(r);
    std::vector<std::shared_ptr<detail::TensorNode<Real>>> ins;
    ins.reserve(parts.size());
    for (const auto& p : parts) ins.push_back(p.node());
    auto on = r.node();
    Tape<Real>::active()->record([ins, on, rows, total] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      std::size_t off = 0;
      for (const auto& in : ins) {
        const std::size_t w = in->shape[1];
        if (in->requires_grad) {
          auto& gi = in->grad_buffer();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < w; ++j)
              gi[i * w + j] += g[i * total + off + j];
        }
        off += w;
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Softmax along `axis`, computed with max-subtraction. Each slice along
/// the axis is nonnegative and sums to 1.
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    std::ostringstream os;
    os << "softmax: axis " << axis << " out of range for shape "
       << shape_str(x.shape());
    throw ShapeError(os.str());
  }
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  std::vector<Real> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      Real m = xv[base];
      for (std::size_t t = 1; t < n; ++t)
        m = std::max(m, xv[base + t * inner]);
      Real z = 0;
      for (std::size_t t = 0; t < n; ++t) {
        Real e = std::exp(xv[base + t * inner] - m);
        out[base + t * inner] = e;
        z += e;
      }
      for (std::size_t t = 0; t < n; ++t) out[base + t * inner] /= z;
    }
  }
  Tensor<Real> r = Tensor<Real>::constant(s, std::move(out));
  if (detail::tracking<Real>({&x})) {
    detail::mark_tracked(r);
    auto xn = x.node(), on = r.node();
    Tape<Real>::active()->record([xn, on, outer, inner, n] {
      if (on->grad.empty() || !xn->requires_grad) return;
      const auto& g = on->grad;
      const auto& y = on->value;
      auto& gx = xn->grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          Real dot = 0;
          for (std::size_t t = 0; t < n; ++t)
            dot += g[base + t * inner] * y[base + t * inner];
          for (std::size_t t = 0; t < n; ++t) {
            const std::size_t idx = base + t * inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { gelu, elu, relu };

namespace detail {

template <class Real>
inline Real act_forward(Real x, Activation kind) {
  switch (kind) {
    case Activation::gelu: {
      // Exact erf formulation: x * Phi(x).
      const double xd = static_cast<double>(x);
      return static_cast<Real>(xd * 0.5 * (1.0 + std::erf(xd / std::sqrt(2.0))));
    }
    case Activation::elu:
      return x > Real(0) ? x : static_cast<Real>(std::expm1(static_cast<double>(x)));
    case Activation::relu:
      return x > Real(0) ? x : Real(0);
  }
  throw ValueError("activation: unsupported kind");
}

template <class Real>
inline Real act_derivative(Real x, Activation kind) {
  switch (kind) {
    case Activation::gelu: {
      const double xd = static_cast<double>(x);
      const double phi_cdf = 0.5 * (1.0 + std::erf(xd / std::sqrt(2.0)));
      const double phi_pdf =
          std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * 3.14159265358979323846);
      return static_cast<Real>(phi_cdf + xd * phi_pdf);
    }
    case Activation::elu:
      return x > Real(0) ? Real(1)
                         : static_cast<Real>(std::exp(static_cast<double>(x)));
    case Activation::relu:
      return x > Real(0) ? Real(1) : Real(0);
  }
  throw ValueError("activation: unsupported kind");
}

}  // namespace detail

template <class Real>
Tensor<Real> activation(const Tensor<Real>& x, Activation kind) {
  std::vector<Real> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = detail::act_forward(xv[i], kind);
  Tensor<Real> r = Tensor<Real>::constant(x.shape(), std::move(out));
  if (detail::tracking<Real>({&x})) {
    detail::mark_tracked(r);
    auto xn = x.node(), on = r.node();
    Tape<Real>::active()->record([xn, on, kind] {
      if (on->grad.empty() || !xn->requires_grad) return;
      const auto& g = on->grad;
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        gx[i] += g[i] * detail::act_derivative(xn->value[i], kind);
    });
  }
  return r;
}

template <class Real>
Tensor<Real> gelu(const Tensor<Real>& x) { return activation(x, Activation::gelu); }
template <class Real>
Tensor<Real> elu(const Tensor<Real>& x) { return activation(x, Activation::elu); }
template <class Real>
Tensor<Real> relu(const Tensor<Real>& x) { return activation(x, Activation::relu); }

// ---------------------------------------------------------------------------
// Convolution along the time axis
// ---------------------------------------------------------------------------

struct Conv1dPadding {
  enum class Mode { same, fixed };
  Mode mode = Mode::fixed;
  std::size_t left = 0, right = 0;

  static Conv1dPadding same() { return {Mode::same, 0, 0}; }
  static Conv1dPadding fixed(std::size_t l, std::size_t r) {
    return {Mode::fixed, l, r};
  }
  static Conv1dPadding none() { return fixed(0, 0); }
};

/// Cross-correlation of x ([T x Cin]) with kernels ([Cout x Cin x K]) along
/// the time axis; no kernel flip. "same" padding yields T' = ceil(T/stride).
template <class Real>
Tensor<Real> conv1d(const Tensor<Real>& x, const Tensor<Real>& kernels,
                    std::size_t stride, Conv1dPadding padding) {
  detail::require_rank(x, 2, "conv1d");
  detail::require_rank(kernels, 3, "conv1d");
  if (stride == 0) throw ValueError("conv1d: stride must be positive");
  const std::size_t t_in = x.extent(0), c_in = x.extent(1);
  const std::size_t c_out = kernels.extent(0), kc_in = kernels.extent(1),
                    k = kernels.extent(2);
  if (kc_in != c_in) {
    std::ostringstream os;
    os << "conv1d: input channels disagree: " << shape_str(x.shape()) << " vs "
       << shape_str(kernels.shape());
    throw ShapeError(os.str());
  }
  std::size_t left = padding.left, right = padding.right;
  if (padding.mode == Conv1dPadding::Mode::same) {
    const std::size_t t_out_target = (t_in + stride - 1) / stride;
    const std::size_t span = (t_out_target - 1) * stride + k;
    const std::size_t total = span > t_in ? span - t_in : 0;
    left = total / 2;
    right = total - left;
  }
  if (k > t_in + left + right) {
    std::ostringstream os;
    os << "conv1d: kernel width " << k << " exceeds padded input length "
       << (t_in + left + right);
    throw ShapeError(os.str());
  }
  const std::size_t t_out = (t_in + left + right - k) / stride + 1;
  std::vector<Real> out(t_out * c_out, Real(0));
  const auto& xv = x.values();
  const auto& kv = kernels.values();
  for (std::size_t to = 0; to < t_out; ++to) {
    const long long start = static_cast<long long>(to * stride) -
                            static_cast<long long>(left);
    for (std::size_t co = 0; co < c_out; ++co) {
      Real acc = 0;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const long long ti = start + static_cast<long long>(kk);
        if (ti < 0 || ti >= static_cast<long long>(t_in)) continue;
        const Real* xrow = xv.data() + static_cast<std::size_t>(ti) * c_in;
        const Real* krow = kv.data() + (co * c_in * k) + kk;
        for (std::size_t ci = 0; ci < c_in; ++ci) acc += xrow[ci] * krow[ci * k];
      }
      out[to * c_out + co] = acc;
    }
  }
  Tensor<Real> r = Tensor<Real>::constant({t_out, c_out}, std::move(out));
  if (detail::tracking<Real>({&x, &kernels})) {
    detail::mark_tracked(r);
    auto xn = x.node(), kn = kernels.node(), on = r.node();
    Tape<Real>::active()->record([xn, kn, on, t_in, c_in, c_out, k, stride, left,
                                  t_out] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      for (std::size_t to = 0; to < t_out; ++to) {
        const long long start = static_cast<long long>(to * stride) -
                                static_cast<long long>(left);
        for (std::size_t co = 0; co < c_out; ++co) {
          const Real go = g[to * c_out + co];
          if (go == Real(0)) continue;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const long long ti = start + static_cast<long long>(kk);
            if (ti < 0 || ti >= static_cast<long long>(t_in)) continue;
            const std::size_t tu = static_cast<std::size_t>(ti);
            if (xn->requires_grad) {
              auto& gx = xn->grad_buffer();
              const Real* krow = kn->value.data() + (co * c_in * k) + kk;
              for (std::size_t ci = 0; ci < c_in; ++ci)
                gx[tu * c_in + ci] += go * krow[ci * k];
            }
            if (kn->requires_grad) {
              auto& gk = kn->grad_buffer();
              const Real* xrow = xn->value.data() + tu * c_in;
              for (std::size_t ci = 0; ci < c_in; ++ci)
                gk[(co * c_in + ci) * k + kk] += go * xrow[ci];
            }
          }
        }
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Pooling over the time axis
// ---------------------------------------------------------------------------

enum class PoolKind { max_over_time, mean_over_time };

/// Per-channel reduction of x ([T x D]) over time. Max pooling routes the
/// gradient to the first maximal element of each column; mean pooling
/// spreads it uniformly.
template <class Real>
Tensor<Real> pool(const Tensor<Real>& x, PoolKind kind) {
  detail::require_rank(x, 2, "pool");
  const std::size_t t = x.extent(0), d = x.extent(1);
  if (t == 0) throw ShapeError("pool: empty time axis");
  std::vector<Real> out(d, Real(0));
  std::vector<std::size_t> argmax(kind == PoolKind::max_over_time ? d : 0, 0);
  const auto& xv = x.values();
  if (kind == PoolKind::max_over_time) {
    for (std::size_t j = 0; j < d; ++j) {
      Real best = xv[j];
      std::size_t bi = 0;
      for (std::size_t i = 1; i < t; ++i) {
        if (xv[i * d + j] > best) {  // strict: ties keep the earliest index
          best = xv[i * d + j];
          bi = i;
        }
      }
      out[j] = best;
      argmax[j] = bi;
    }
  } else {
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < d; ++j) out[j] += xv[i * d + j];
    for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<Real>(t);
  }
  Tensor<Real> r = Tensor<Real>::constant({d}, std::move(out));
  if (detail::tracking<Real>({&x})) {
    detail::mark_tracked(r);
    auto xn = x.node(), on = r.node();
    Tape<Real>::active()->record([xn, on, t, d, kind, argmax = std::move(argmax)] {
      if (on->grad.empty() || !xn->requires_grad) return;
      const auto& g = on->grad;
      auto& gx = xn->grad_buffer();
      if (kind == PoolKind::max_over_time) {
        for (std::size_t j = 0; j < d; ++j) gx[argmax[j] * d + j] += g[j];
      } else {
        const Real inv = Real(1) / static_cast<Real>(t);
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[j] * inv;
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Gather / scatter
// ---------------------------------------------------------------------------

/// out[n] = w[indices[n]]. Backward scatter-adds into w, so repeated
/// indices accumulate.
template <class Real>
Tensor<Real> gather(const Tensor<Real>& w, const std::vector<std::size_t>& indices) {
  detail::require_rank(w, 1, "gather");
  const std::size_t len = w.extent(0);
  for (std::size_t idx : indices) {
    if (idx >= len) {
      std::ostringstream os;
      os << "gather: index " << idx << " out of range for length " << len;
      throw ValueError(os.str());
    }
  }
  std::vector<Real> out(indices.size());
  const auto& wv = w.values();
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = wv[indices[i]];
  Tensor<Real> r = Tensor<Real>::constant({indices.size()}, std::move(out));
  if (detail::tracking<Real>({&w})) {
    detail::mark_tracked(r);
    auto wn = w.node(), on = r.node();
    Tape<Real>::active()->record([wn, on, indices] {
      if (on->grad.empty() || !wn->requires_grad) return;
      const auto& g = on->grad;
      auto& gw = wn->grad_buffer();
      for (std::size_t i = 0; i < indices.size(); ++i) gw[indices[i]] += g[i];
    });
  }
  return r;
}

/// Row gather: out[i, :] = x[indices[i], :].
template <class Real>
Tensor<Real> select_rows(const Tensor<Real>& x,
                         const std::vector<std::size_t>& indices) {
  detail::require_rank(x, 2, "select_rows");
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  if (indices.empty()) throw ValueError("select_rows: empty index list");
  for (std::size_t idx : indices) {
    if (idx >= rows) {
      std::ostringstream os;
      os << "select_rows: row index " << idx << " out of range for "
         << shape_str(x.shape());
      throw ValueError(os.str());
    }
  }
  std::vector<Real> out(indices.size() * cols);
  const auto& xv = x.values();
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy_n(xv.data() + indices[i] * cols, cols, out.data() + i * cols);
  Tensor<Real> r = Tensor<Real>::constant({indices.size(), cols}, std::move(out));
  if (detail::tracking<Real>({&x})) {
    detail::mark_tracked(r);
    auto xn = x.node(), on = r.node();
    Tape<Real>::active()->record([xn, on, indices, cols] {
      if (on->grad.empty() || !xn->requires_grad) return;
      const auto& g = on->grad;
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < indices.size(); ++i)
        for (std::size_t j = 0; j < cols; ++j)
          gx[indices[i] * cols + j] += g[i * cols + j];
    });
  }
  return r;
}

/// Assembles a [total x C] matrix whose rows at `indices` come from `rows`
/// (in order) and whose remaining rows are all `fill`. Differentiable in
/// both `rows` and `fill`.
template <class Real>
Tensor<Real> scatter_rows_with_fill(std::size_t total,
                                    const std::vector<std::size_t>& indices,
                                    const Tensor<Real>& rows,
                                    const Tensor<Real>& fill) {
  detail::require_rank(rows, 2, "scatter_rows_with_fill");
  detail::require_rank(fill, 1, "scatter_rows_with_fill");
  const std::size_t n = rows.extent(0), cols = rows.extent(1);
  if (indices.size() != n)
    throw ShapeError("scatter_rows_with_fill: index count does not match row count");
  if (fill.extent(0) != cols)
    throw ShapeError("scatter_rows_with_fill: fill length does not match row width");
  std::vector<char> placed(total, 0);
  for (std::size_t idx : indices) {
    if (idx >= total) {
      std::ostringstream os;
      os << "scatter_rows_with_fill: index " << idx << " out of range for "
         << total << " rows";
      throw ValueError(os.str());
    }
    if (placed[idx])
      throw ValueError("scatter_rows_with_fill: duplicate row index");
    placed[idx] = 1;
  }
  std::vector<Real> out(total * cols);
  const auto& fv = fill.values();
  for (std::size_t i = 0; i < total; ++i)
    std::copy_n(fv.data(), cols, out.data() + i * cols);
  const auto& rv = rows.values();
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(rv.data() + i * cols, cols, out.data() + indices[i] * cols);
  Tensor<Real> r = Tensor<Real>::constant({total, cols}, std::move(out));
  if (detail::tracking<Real>({&rows, &fill})) {
    detail::mark_tracked(r);
    auto rn = rows.node(), fn = fill.node(), on = r.node();
    Tape<Real>::active()->record([rn, fn, on, indices, total, cols,
                                  placed = std::move(placed)] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      if (rn->requires_grad) {
        auto& gr = rn->grad_buffer();
        for (std::size_t i = 0; i < indices.size(); ++i)
          for (std::size_t j = 0; j < cols; ++j)
            gr[i * cols + j] += g[indices[i] * cols + j];
      }
      if (fn->requires_grad) {
        auto& gf = fn->grad_buffer();
        for (std::size_t i = 0; i < total; ++i) {
          if (placed[i]) continue;
          for (std::size_t j = 0; j < cols; ++j) gf[j] += g[i * cols + j];
        }
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> sum_all(const Tensor<Real>& x) {
  Real acc = 0;
  for (Real v : x.values()) acc += v;
  Tensor<Real> r = Tensor<Real>::constant({1}, {acc});
  if (detail::tracking<Real>({&x})) {
    detail::mark_tracked(r);
    auto xn = x.node(), on = r.node();
    Tape<Real>::active()->record([xn, on] {
      if (on->grad.empty() || !xn->requires_grad) return;
      const Real g = on->grad[0];
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return r;
}

template <class Real>
Tensor<Real> mean_all(const Tensor<Real>& x) {
  return mul_scalar(sum_all(x), Real(1) / static_cast<Real>(x.numel()));
}

// ---------------------------------------------------------------------------
// Layer normalization (fused, per row of a [T x D] tensor)
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gamma,
                        const Tensor<Real>& beta, Real eps = Real(1e-5)) {
  detail::require_rank(x, 2, "layer_norm");
  detail::require_rank(gamma, 1, "layer_norm");
  detail::require_rank(beta, 1, "layer_norm");
  const std::size_t t = x.extent(0), d = x.extent(1);
  if (gamma.extent(0) != d || beta.extent(0) != d)
    throw ShapeError("layer_norm: gain/bias length does not match feature dim of " +
                     shape_str(x.shape()));
  std::vector<Real> out(t * d), xhat(t * d), inv_std(t);
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (std::size_t i = 0; i < t; ++i) {
    Real mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xv[i * d + j];
    mean /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const Real c = xv[i * d + j] - mean;
      var += c * c;
    }
    var /= static_cast<Real>(d);
    const Real is = Real(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const Real xh = (xv[i * d + j] - mean) * is;
      xhat[i * d + j] = xh;
      out[i * d + j] = gv[j] * xh + bv[j];
    }
  }
  Tensor<Real> r = Tensor<Real>::constant({t, d}, std::move(out));
  if (detail::tracking<Real>({&x, &gamma, &beta})) {
    detail::mark_tracked(r);
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = r.node();
    Tape<Real>::active()->record([xn, gn, bn, on, t, d, xhat = std::move(xhat),
                                  inv_std = std::move(inv_std)] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      if (gn->requires_grad) {
        auto& gg = gn->grad_buffer();
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < d; ++j)
            gg[j] += g[i * d + j] * xhat[i * d + j];
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
      }
      if (xn->requires_grad) {
        auto& gx = xn->grad_buffer();
        for (std::size_t i = 0; i < t; ++i) {
          Real mean_gh = 0, mean_ghx = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const Real gh = g[i * d + j] * gn->value[j];
            mean_gh += gh;
            mean_ghx += gh * xhat[i * d + j];
          }
          mean_gh /= static_cast<Real>(d);
          mean_ghx /= static_cast<Real>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const Real gh = g[i * d + j] * gn->value[j];
            gx[i * d + j] +=
                inv_std[i] * (gh - mean_gh - xhat[i * d + j] * mean_ghx);
          }
        }
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Dropout (inverted scaling; identity when rate == 0)
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> dropout(const Tensor<Real>& x, Real rate, Rng& rng) {
  if (rate < Real(0) || rate >= Real(1))
    throw ValueError("dropout: rate must lie in [0, 1)");
  if (rate == Real(0)) return x;
  const Real keep = Real(1) - rate;
  std::vector<Real> mask(x.numel());
  for (auto& m : mask)
    m = rng.uniform() < static_cast<double>(rate) ? Real(0) : Real(1) / keep;
  std::vector<Real> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  Tensor<Real> r = Tensor<Real>::constant(x.shape(), std::move(out));
  if (detail::tracking<Real>({&x})) {
    detail::mark_tracked(r);
    auto xn = x.node(), on = r.node();
    Tape<Real>::active()->record([xn, on, mask = std::move(mask)] {
      if (on->grad.empty() || !xn->requires_grad) return;
      const auto& g = on->grad;
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return r;
}

}  // namespace seqformer
