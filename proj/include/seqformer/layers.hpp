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
#include <vector>

#include "seqformer/encodings.hpp"
#include "seqformer/rng.hpp"
#include "seqformer/tensor.hpp"

namespace seqformer {

template <class Real>
struct LinearLayer {
  Tensor<Real> weight;  // [in x out]
  Tensor<Real> bias;    // [out]

  Tensor<Real> apply(const Tensor<Real>& x) const {
    return add_row(matmul(x, weight), bias);
  }
};

template <class Real>
LinearLayer<Real> init_linear(std::size_t in, std::size_t out, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(in + out));
  std::vector<Real> w(in * out);
  for (auto& v : w) v = static_cast<Real>(rng.normal(0.0, sd));
  LinearLayer<Real> l;
  l.weight = Tensor<Real>::parameter({in, out}, std::move(w));
  l.bias = Tensor<Real>::zeros({out}, true);
  return l;
}

template <class Real>
struct LayerNormParams {
  Tensor<Real> gamma;  // [d], ones at init
  Tensor<Real> beta;   // [d], zeros at init

  Tensor<Real> apply(const Tensor<Real>& x) const {
    return layer_norm(x, gamma, beta);
  }
};

template <class Real>
LayerNormParams<Real> init_layer_norm(std::size_t d) {
  LayerNormParams<Real> n;
  n.gamma = Tensor<Real>::full({d}, Real(1), true);
  n.beta = Tensor<Real>::zeros({d}, true);
  return n;
}

/// One pre-norm transformer layer: multi-head attention (optionally with
/// per-head relative position weights) and a two-linear-layer GELU FFN,
/// each wrapped in a residual connection.
template <class Real>
struct TransformerLayerParams {
  std::size_t num_heads = 1;
  LayerNormParams<Real> ln1, ln2;
  LinearLayer<Real> q_proj, k_proj, v_proj, o_proj;
  std::vector<Tensor<Real>> erpe;  // per-head [2L-1]; empty = plain attention
  LinearLayer<Real> ffn_in, ffn_out;
};

template <class Real>
TransformerLayerParams<Real> init_transformer_layer(std::size_t d_model,
                                                    std::size_t ffn_dim,
                                                    std::size_t num_heads,
                                                    std::size_t erpe_len,
                                                    Rng& rng) {
  if (d_model % num_heads != 0)
    throw ValueError("transformer layer: d_model must be divisible by num_heads");
  TransformerLayerParams<Real> p;
  p.num_heads = num_heads;
  p.ln1 = init_layer_norm<Real>(d_model);
  p.q_proj = init_linear<Real>(d_model, d_model, rng);
  p.k_proj = init_linear<Real>(d_model, d_model, rng);
  p.v_proj = init_linear<Real>(d_model, d_model, rng);
  p.o_proj = init_linear<Real>(d_model, d_model, rng);
  if (erpe_len > 0) {
    ERPEWeights<Real> w = ERPEWeights<Real>::zeros(num_heads, erpe_len);
    p.erpe = std::move(w.per_head);
  }
  p.ln2 = init_layer_norm<Real>(d_model);
  p.ffn_in = init_linear<Real>(d_model, ffn_dim, rng);
  p.ffn_out = init_linear<Real>(ffn_dim, d_model, rng);
  return p;
}

template <class Real>
Tensor<Real> multi_head_attention(const Tensor<Real>& x,
                                  const TransformerLayerParams<Real>& p) {
  const std::size_t d_model = x.extent(1);
  const std::size_t d_head = d_model / p.num_heads;
  Tensor<Real> q = p.q_proj.apply(x);
  Tensor<Real> k = p.k_proj.apply(x);
  Tensor<Real> v = p.v_proj.apply(x);
  std::vector<Tensor<Real>> heads;
  heads.reserve(p.num_heads);
  for (std::size_t h = 0; h < p.num_heads; ++h) {
    const std::size_t c0 = h * d_head, c1 = (h + 1) * d_head;
    Tensor<Real> qh = slice_cols(q, c0, c1);
    Tensor<Real> kh = slice_cols(k, c0, c1);
    Tensor<Real> vh = slice_cols(v, c0, c1);
    heads.push_back(p.erpe.empty()
                        ? scaled_dot_attention(qh, kh, vh)
                        : erpe_attention(qh, kh, vh, p.erpe[h]));
  }
  return p.o_proj.apply(concat_cols(heads));
}

template <class Real>
Tensor<Real> feed_forward(const Tensor<Real>& x,
                          const TransformerLayerParams<Real>& p) {
  return p.ffn_out.apply(gelu(p.ffn_in.apply(x)));
}

/// h = x + MHA(LN1(x)); out = h + FFN(LN2(h)).
template <class Real>
Tensor<Real> transformer_layer_forward(const Tensor<Real>& x,
                                       const TransformerLayerParams<Real>& p,
                                       Real dropout_rate = Real(0),
                                       Rng* rng = nullptr) {
  Tensor<Real> attn_out = multi_head_attention(p.ln1.apply(x), p);
  if (dropout_rate > Real(0) && rng) attn_out = dropout(attn_out, dropout_rate, *rng);
  Tensor<Real> h = add(x, attn_out);
  Tensor<Real> ffn_out = feed_forward(p.ln2.apply(h), p);
  if (dropout_rate > Real(0) && rng) ffn_out = dropout(ffn_out, dropout_rate, *rng);
  return add(h, ffn_out);
}

template <class Real>
void collect_parameters(const LinearLayer<Real>& l, std::vector<Tensor<Real>>& out) {
  out.push_back(l.weight);
  out.push_back(l.bias);
}

template <class Real>
void collect_parameters(const LayerNormParams<Real>& n,
                        std::vector<Tensor<Real>>& out) {
  out.push_back(n.gamma);
  out.push_back(n.beta);
}

template <class Real>
void collect_parameters(const TransformerLayerParams<Real>& p,
                        std::vector<Tensor<Real>>& out) {
  collect_parameters(p.ln1, out);
  collect_parameters(p.q_proj, out);
  collect_parameters(p.k_proj, out);
  collect_parameters(p.v_proj, out);
  collect_parameters(p.o_proj, out);
  for (const auto& w : p.erpe) out.push_back(w);
  collect_parameters(p.ln2, out);
  collect_parameters(p.ffn_in, out);
  collect_parameters(p.ffn_out, out);
}

}  // namespace seqformer
