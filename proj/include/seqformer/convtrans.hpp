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

#include <cstddef>
#include <string>
#include <vector>

#include "seqformer/encodings.hpp"
#include "seqformer/layers.hpp"
#include "seqformer/serialize.hpp"
#include "seqformer/tensor.hpp"

namespace seqformer {

/// Classifier topology. Defaults follow the reference training setup:
/// 8 layers, 8 heads, FFN width 256, segment length 16, 3 classes.
struct ConvTransConfig {
  std::size_t num_layers = 8;
  std::size_t num_heads = 8;
  std::size_t d_model = 64;
  std::size_t ffn_dim = 256;
  std::size_t seq_len = 16;   // L, the sliding-window segment length
  std::size_t input_dim = 1;  // D, feature channels per frame
  std::size_t num_classes = 3;
  std::size_t conv_kernel = 3;
  double dropout = 0.0;
  bool use_tape = true;    // absolute position table added after embedding
  bool use_erpe = true;    // per-head relative position weights
  bool extra_skip = true;  // extra identity path around each layer

  void validate() const {
    if (num_layers == 0 || num_heads == 0 || d_model == 0 || ffn_dim == 0 ||
        seq_len == 0 || input_dim == 0 || num_classes == 0 || conv_kernel == 0)
      throw ValueError("ConvTransConfig: all structural fields must be positive");
    if (d_model % num_heads != 0)
      throw ValueError("ConvTransConfig: d_model must be divisible by num_heads");
    if (d_model % 2 != 0)
      throw ValueError("ConvTransConfig: d_model must be even");
    if (dropout < 0.0 || dropout >= 1.0)
      throw ValueError("ConvTransConfig: dropout must lie in [0, 1)");
  }
};

/// Residual convolutional-transformer classifier: conv input embedding with
/// an absolute position table, a stack of transformer layers whose heads
/// carry relative position weights, and an ELU -> max-pool + GAP -> linear
/// head producing one logit per class.
template <class Real>
struct ConvTransModel {
  ConvTransConfig cfg;
  Tensor<Real> conv_kernels;  // [d_model x input_dim x conv_kernel]
  Tensor<Real> conv_bias;     // [d_model]
  TapeTable<Real> ape;        // constant; unused when cfg.use_tape is off
  std::vector<TransformerLayerParams<Real>> layers;
  LinearLayer<Real> head;  // [2*d_model x num_classes]

  static ConvTransModel init(const ConvTransConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ConvTransModel m;
    m.cfg = cfg;
    Rng rng(seed);
    const std::size_t fan = cfg.input_dim * cfg.conv_kernel;
    const double sd = std::sqrt(2.0 / static_cast<double>(fan + cfg.d_model));
    std::vector<Real> kw(cfg.d_model * cfg.input_dim * cfg.conv_kernel);
    for (auto& v : kw) v = static_cast<Real>(rng.normal(0.0, sd));
    m.conv_kernels = Tensor<Real>::parameter(
        {cfg.d_model, cfg.input_dim, cfg.conv_kernel}, std::move(kw));
    m.conv_bias = Tensor<Real>::zeros({cfg.d_model}, true);
    m.ape = build_tape_table<Real>(cfg.seq_len, cfg.d_model);
    m.layers.reserve(cfg.num_layers);
    for (std::size_t i = 0; i < cfg.num_layers; ++i)
      m.layers.push_back(init_transformer_layer<Real>(
          cfg.d_model, cfg.ffn_dim, cfg.num_heads,
          cfg.use_erpe ? cfg.seq_len : 0, rng));
    m.head = init_linear<Real>(2 * cfg.d_model, cfg.num_classes, rng);
    return m;
  }

  std::vector<Tensor<Real>> parameters() const {
    std::vector<Tensor<Real>> out;
    out.push_back(conv_kernels);
    out.push_back(conv_bias);
    for (const auto& l : layers) collect_parameters(l, out);
    collect_parameters(head, out);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
  }

  /// Conv embedding (stride 1, same padding) plus the absolute position
  /// table. Input is one [L x D] segment.
  Tensor<Real> embed(const Tensor<Real>& series) const {
    if (series.rank() != 2 || series.extent(0) != cfg.seq_len ||
        series.extent(1) != cfg.input_dim) {
      std::ostringstream os;
      os << "embed: expected [" << cfg.seq_len << "x" << cfg.input_dim
         << "] series, got " << shape_str(series.shape());
      throw ShapeError(os.str());
    }
    Tensor<Real> tokens = add_row(
        conv1d(series, conv_kernels, 1, Conv1dPadding::same()), conv_bias);
    if (cfg.use_tape) tokens = add_ape(tokens, ape);
    return tokens;
  }

  Tensor<Real> layer_forward(const Tensor<Real>& tokens, std::size_t layer_idx,
                             Rng* rng = nullptr) const {
    return transformer_layer_forward(tokens, layers.at(layer_idx),
                                     static_cast<Real>(cfg.dropout), rng);
  }

  /// ELU, then max pooling and global average pooling over time,
  /// concatenated and mapped linearly to class logits.
  Tensor<Real> head_logits(const Tensor<Real>& tokens) const {
    Tensor<Real> a = elu(tokens);
    Tensor<Real> mx = reshape(pool(a, PoolKind::max_over_time), {std::size_t(1), cfg.d_model});
    Tensor<Real> av = reshape(pool(a, PoolKind::mean_over_time), {std::size_t(1), cfg.d_model});
    Tensor<Real> pooled = concat_cols<Real>({mx, av});
    return reshape(head.apply(pooled), {cfg.num_classes});
  }

  Tensor<Real> forward(const Tensor<Real>& series, Rng* rng = nullptr) const {
    Tensor<Real> x = embed(series);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      Tensor<Real> y = layer_forward(x, i, rng);
      x = cfg.extra_skip ? add(y, x) : y;
    }
    return head_logits(x);
  }
};

/// Closed-form parameter count for a config with both encodings enabled:
///   conv:      d*D*K + d
///   per layer: 4*d^2 + 9*d + 2*d*f + f + heads*(2L-1)
///   head:      2*d*M + M
inline std::size_t expected_parameter_count(const ConvTransConfig& c) {
  const std::size_t d = c.d_model, f = c.ffn_dim, L = c.seq_len;
  std::size_t per_layer = 4 * d * d + 9 * d + 2 * d * f + f;
  if (c.use_erpe) per_layer += c.num_heads * (2 * L - 1);
  return c.d_model * c.input_dim * c.conv_kernel + d +
         c.num_layers * per_layer + 2 * d * c.num_classes + c.num_classes;
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic "CTRS", version u32, config block, then the
// parameter arrays in declaration order as little-endian f64.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kConvTransFormatVersion = 1;

template <class Real>
void save_checkpoint(const ConvTransModel<Real>& m, const std::string& path) {
  BinaryWriter w(path);
  w.magic("CTRS");
  w.u32(kConvTransFormatVersion);
  const ConvTransConfig& c = m.cfg;
  w.u32(static_cast<std::uint32_t>(c.num_layers));
  w.u32(static_cast<std::uint32_t>(c.num_heads));
  w.u32(static_cast<std::uint32_t>(c.d_model));
  w.u32(static_cast<std::uint32_t>(c.ffn_dim));
  w.u32(static_cast<std::uint32_t>(c.seq_len));
  w.u32(static_cast<std::uint32_t>(c.input_dim));
  w.u32(static_cast<std::uint32_t>(c.num_classes));
  w.u32(static_cast<std::uint32_t>(c.conv_kernel));
  std::uint32_t flags = 0;
  if (c.use_tape) flags |= 1u;
  if (c.use_erpe) flags |= 2u;
  if (c.extra_skip) flags |= 4u;
  w.u32(flags);
  w.f64(c.dropout);
  for (const auto& p : m.parameters()) w.f64_array(p.values());
  w.close();
}

template <class Real>
ConvTransModel<Real> load_checkpoint(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic("CTRS");
  const std::uint32_t version = r.u32();
  if (version != kConvTransFormatVersion) {
    std::ostringstream os;
    os << path << ": unsupported checkpoint format version " << version
       << " (expected " << kConvTransFormatVersion << ")";
    throw IoError(os.str());
  }
  ConvTransConfig c;
  c.num_layers = r.u32();
  c.num_heads = r.u32();
  c.d_model = r.u32();
  c.ffn_dim = r.u32();
  c.seq_len = r.u32();
  c.input_dim = r.u32();
  c.num_classes = r.u32();
  c.conv_kernel = r.u32();
  const std::uint32_t flags = r.u32();
  c.use_tape = (flags & 1u) != 0;
  c.use_erpe = (flags & 2u) != 0;
  c.extra_skip = (flags & 4u) != 0;
  c.dropout = r.f64();
  c.validate();
  ConvTransModel<Real> m = ConvTransModel<Real>::init(c, 0);
  for (auto& p : m.parameters()) p.values_mut() = r.template f64_array<Real>(p.numel());
  r.expect_eof();
  return m;
}

}  // namespace seqformer
