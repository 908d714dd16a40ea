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

#include <cmath>
#include <cstddef>
#include <optional>
#include <sstream>
#include <vector>

#include "seqformer/tensor.hpp"

namespace seqformer {

// ---------------------------------------------------------------------------
// tAPE: sinusoidal absolute position encoding with frequencies rescaled by
// d_model / L so the table adapts to the series length.
// ---------------------------------------------------------------------------

template <class Real>
struct TapeTable {
  std::size_t seq_len = 0;
  std::size_t d_model = 0;
  Tensor<Real> table;  // constant [L x d_model], entries in [-1, 1]
};

namespace detail {

/// omega_k = 10000^(-2k / d_model) for k in [0, d_model/2).
inline double sinusoid_frequency(std::size_t k, std::size_t d_model) {
  return std::pow(10000.0, -2.0 * static_cast<double>(k) /
                               static_cast<double>(d_model));
}

template <class Real>
Tensor<Real> sinusoid_table(std::size_t len, std::size_t d_model,
                            double freq_scale) {
  std::vector<Real> data(len * d_model);
  for (std::size_t k = 0; k < d_model / 2; ++k) {
    const double w = sinusoid_frequency(k, d_model) * freq_scale;
    for (std::size_t i = 0; i < len; ++i) {
      const double arg = static_cast<double>(i) * w;
      data[i * d_model + 2 * k] = static_cast<Real>(std::sin(arg));
      data[i * d_model + 2 * k + 1] = static_cast<Real>(std::cos(arg));
    }
  }
  return Tensor<Real>::constant({len, d_model}, std::move(data));
}

}  // namespace detail

/// Frequency after length rescaling: omega_k * d_model / L.
inline double tape_frequency(std::size_t k, std::size_t d_model, std::size_t len) {
  return detail::sinusoid_frequency(k, d_model) * static_cast<double>(d_model) /
         static_cast<double>(len);
}

template <class Real>
TapeTable<Real> build_tape_table(std::size_t len, std::size_t d_model) {
  if (len == 0) throw ValueError("build_tape_table: length must be positive");
  if (d_model == 0 || d_model % 2 != 0) {
    std::ostringstream os;
    os << "build_tape_table: d_model must be positive and even, got " << d_model;
    throw ValueError(os.str());
  }
  TapeTable<Real> t;
  t.seq_len = len;
  t.d_model = d_model;
  t.table = detail::sinusoid_table<Real>(
      len, d_model, static_cast<double>(d_model) / static_cast<double>(len));
  return t;
}

/// Plain sinusoidal table without the d_model/L rescaling (used by the
/// autoencoder; also the degenerate tAPE case L == d_model).
template <class Real>
Tensor<Real> vanilla_sinusoid_table(std::size_t len, std::size_t d_model) {
  if (len == 0) throw ValueError("vanilla_sinusoid_table: length must be positive");
  if (d_model == 0 || d_model % 2 != 0)
    throw ValueError("vanilla_sinusoid_table: d_model must be positive and even");
  return detail::sinusoid_table<Real>(len, d_model, 1.0);
}

/// x_i <- x_i + p_i. Gradient passes through to x unchanged.
template <class Real>
Tensor<Real> add_ape(const Tensor<Real>& x, const TapeTable<Real>& table) {
  if (x.rank() != 2 || x.extent(0) != table.seq_len ||
      x.extent(1) != table.d_model) {
    std::ostringstream os;
    os << "add_ape: input " << shape_str(x.shape())
       << " does not match position table [" << table.seq_len << "x"
       << table.d_model << "]";
    throw ShapeError(os.str());
  }
  return add(x, table.table);
}

// ---------------------------------------------------------------------------
// eRPE: one learnable scalar per relative offset, 2L-1 per attention head,
// added to the attention weights after the softmax.
// ---------------------------------------------------------------------------

/// Relative-offset index with the 1-based convention: positions i, j in
/// [1, L] map to i - j + L in [1, 2L-1]; i == j sits at the middle entry L.
inline std::size_t erpe_index(std::size_t i, std::size_t j, std::size_t len) {
  if (i < 1 || i > len || j < 1 || j > len) {
    std::ostringstream os;
    os << "erpe_index: positions (" << i << ", " << j
       << ") out of range for length " << len;
    throw ValueError(os.str());
  }
  return i - j + len;
}

/// Zero-based gather indices for the full L x L offset matrix, row-major.
inline std::vector<std::size_t> erpe_index_map(std::size_t len) {
  std::vector<std::size_t> out(len * len);
  for (std::size_t i = 1; i <= len; ++i)
    for (std::size_t j = 1; j <= len; ++j)
      out[(i - 1) * len + (j - 1)] = erpe_index(i, j, len) - 1;
  return out;
}

/// Per-head learnable relative-position vectors, length exactly 2L-1 each.
/// Initialized to zeros so an untrained model reduces to vanilla attention.
template <class Real>
struct ERPEWeights {
  std::size_t num_heads = 0;
  std::size_t seq_len = 0;
  std::vector<Tensor<Real>> per_head;

  static ERPEWeights zeros(std::size_t heads, std::size_t len) {
    if (heads == 0 || len == 0)
      throw ValueError("ERPEWeights: heads and length must be positive");
    ERPEWeights w;
    w.num_heads = heads;
    w.seq_len = len;
    w.per_head.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h)
      w.per_head.push_back(Tensor<Real>::zeros({2 * len - 1}, true));
    return w;
  }
};

/// Standard scaled dot-product attention: softmax(Q K^T / sqrt(d_head)) V.
template <class Real>
Tensor<Real> scaled_dot_attention(const Tensor<Real>& q, const Tensor<Real>& k,
                                  const Tensor<Real>& v) {
  detail::require_rank(q, 2, "attention");
  detail::require_rank(k, 2, "attention");
  detail::require_rank(v, 2, "attention");
  if (q.extent(0) != k.extent(0) || q.extent(0) != v.extent(0) ||
      q.extent(1) != k.extent(1)) {
    std::ostringstream os;
    os << "attention: inconsistent Q/K/V shapes " << shape_str(q.shape()) << ", "
       << shape_str(k.shape()) << ", " << shape_str(v.shape());
    throw ShapeError(os.str());
  }
  const Real scale = Real(1) / static_cast<Real>(
                                   std::sqrt(static_cast<double>(q.extent(1))));
  Tensor<Real> scores = mul_scalar(matmul(q, transpose(k)), scale);
  Tensor<Real> attn = softmax(scores, 1);
  return matmul(attn, v);
}

/// Attention with relative position weights: the post-softmax weight for
/// pair (i, j) is A_ij + w[i-j+L], and the combined weight is NOT
/// re-normalized. Differentiable in Q, K, V and w.
template <class Real>
Tensor<Real> erpe_attention(const Tensor<Real>& q, const Tensor<Real>& k,
                            const Tensor<Real>& v, const Tensor<Real>& w) {
  detail::require_rank(q, 2, "erpe_attention");
  detail::require_rank(k, 2, "erpe_attention");
  detail::require_rank(v, 2, "erpe_attention");
  detail::require_rank(w, 1, "erpe_attention");
  const std::size_t len = q.extent(0);
  if (k.extent(0) != len || v.extent(0) != len || q.extent(1) != k.extent(1)) {
    std::ostringstream os;
    os << "erpe_attention: inconsistent Q/K/V shapes " << shape_str(q.shape())
       << ", " << shape_str(k.shape()) << ", " << shape_str(v.shape());
    throw ShapeError(os.str());
  }
  if (w.extent(0) != 2 * len - 1) {
    std::ostringstream os;
    os << "erpe_attention: relative weight vector has length " << w.extent(0)
       << ", expected 2L-1 = " << (2 * len - 1) << " for L = " << len;
    throw ShapeError(os.str());
  }
  const Real scale = Real(1) / static_cast<Real>(
                                   std::sqrt(static_cast<double>(q.extent(1))));
  Tensor<Real> scores = mul_scalar(matmul(q, transpose(k)), scale);
  Tensor<Real> attn = softmax(scores, 1);
  Tensor<Real> rel = reshape(gather(w, erpe_index_map(len)), {len, len});
  return matmul(add(attn, rel), v);
}

}  // namespace seqformer
