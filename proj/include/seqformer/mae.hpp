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
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "seqformer/encodings.hpp"
#include "seqformer/layers.hpp"
#include "seqformer/rng.hpp"
#include "seqformer/serialize.hpp"
#include "seqformer/tensor.hpp"

namespace seqformer {

/// Raw video-like tensor, frames x height x width x channels, row-major in
/// that order. Values are f32 like the on-disk clip container.
struct VideoClip {
  std::size_t frames = 0, height = 0, width = 0, channels = 0;
  std::vector<float> data;
  double fps = 0.0;  // informational only
  std::string source_id;

  std::size_t numel() const { return frames * height * width * channels; }

  float at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const {
    return data[((t * height + y) * width + x) * channels + c];
  }
  float& at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) {
    return data[((t * height + y) * width + x) * channels + c];
  }
};

// ---------------------------------------------------------------------------
// Tubelet tokenization
// ---------------------------------------------------------------------------

struct TubeletGrid {
  std::size_t t_patch = 0, s_patch = 0;
  std::size_t nt = 0, ny = 0, nx = 0;  // token grid extents
  std::size_t channels = 0;

  std::size_t n_tokens() const { return nt * ny * nx; }
  std::size_t token_dim() const { return t_patch * s_patch * s_patch * channels; }
  std::size_t tokens_per_time_slice() const { return ny * nx; }
};

inline TubeletGrid tubelet_grid(std::size_t frames, std::size_t height,
                                std::size_t width, std::size_t channels,
                                std::size_t t_patch, std::size_t s_patch) {
  if (t_patch == 0 || s_patch == 0)
    throw ValueError("tubelet_grid: patch sizes must be positive");
  auto check = [](std::size_t extent, std::size_t patch, const char* name) {
    if (extent == 0 || extent % patch != 0) {
      std::ostringstream os;
      os << "tubelet_grid: " << name << " extent " << extent
         << " is not divisible by patch size " << patch;
      throw ValueError(os.str());
    }
  };
  check(frames, t_patch, "time");
  check(height, s_patch, "height");
  check(width, s_patch, "width");
  if (channels == 0) throw ValueError("tubelet_grid: channels must be positive");
  TubeletGrid g;
  g.t_patch = t_patch;
  g.s_patch = s_patch;
  g.nt = frames / t_patch;
  g.ny = height / s_patch;
  g.nx = width / s_patch;
  g.channels = channels;
  return g;
}

/// Flattens a clip into [N_tokens x token_dim]. Token order is raster:
/// time-major, then row, then column. Within a token, values are laid out
/// (dt, dy, dx, channel), matching the clip's own layout.
template <class Real>
Tensor<Real> tubelet_tokenize(const VideoClip& clip, std::size_t t_patch,
                              std::size_t s_patch) {
  const TubeletGrid g = tubelet_grid(clip.frames, clip.height, clip.width,
                                     clip.channels, t_patch, s_patch);
  const std::size_t dim = g.token_dim();
  std::vector<Real> out(g.n_tokens() * dim);
  std::size_t tok = 0;
  for (std::size_t tt = 0; tt < g.nt; ++tt) {
    for (std::size_t ty = 0; ty < g.ny; ++ty) {
      for (std::size_t tx = 0; tx < g.nx; ++tx, ++tok) {
        Real* dst = out.data() + tok * dim;
        std::size_t k = 0;
        for (std::size_t dt = 0; dt < t_patch; ++dt)
          for (std::size_t dy = 0; dy < s_patch; ++dy)
            for (std::size_t dx = 0; dx < s_patch; ++dx)
              for (std::size_t c = 0; c < clip.channels; ++c)
                dst[k++] = static_cast<Real>(
                    clip.at(tt * t_patch + dt, ty * s_patch + dy,
                            tx * s_patch + dx, c));
      }
    }
  }
  return Tensor<Real>::constant({g.n_tokens(), dim}, std::move(out));
}

/// Inverse raster: rebuilds the clip a token matrix came from.
template <class Real>
VideoClip tubelet_untokenize(const Tensor<Real>& tokens, std::size_t frames,
                             std::size_t height, std::size_t width,
                             std::size_t channels, std::size_t t_patch,
                             std::size_t s_patch) {
  const TubeletGrid g =
      tubelet_grid(frames, height, width, channels, t_patch, s_patch);
  if (tokens.rank() != 2 || tokens.extent(0) != g.n_tokens() ||
      tokens.extent(1) != g.token_dim())
    throw ShapeError("tubelet_untokenize: token matrix " +
                     shape_str(tokens.shape()) + " does not match the grid");
  VideoClip clip;
  clip.frames = frames;
  clip.height = height;
  clip.width = width;
  clip.channels = channels;
  clip.data.assign(frames * height * width * channels, 0.f);
  const auto& tv = tokens.values();
  std::size_t tok = 0;
  for (std::size_t tt = 0; tt < g.nt; ++tt)
    for (std::size_t ty = 0; ty < g.ny; ++ty)
      for (std::size_t tx = 0; tx < g.nx; ++tx, ++tok) {
        const Real* src = tv.data() + tok * g.token_dim();
        std::size_t k = 0;
        for (std::size_t dt = 0; dt < t_patch; ++dt)
          for (std::size_t dy = 0; dy < s_patch; ++dy)
            for (std::size_t dx = 0; dx < s_patch; ++dx)
              for (std::size_t c = 0; c < channels; ++c)
                clip.at(tt * t_patch + dt, ty * s_patch + dy, tx * s_patch + dx,
                        c) = static_cast<float>(src[k++]);
      }
  return clip;
}

// ---------------------------------------------------------------------------
// Random masking
// ---------------------------------------------------------------------------

struct MaskSpec {
  double ratio = 0.9;
  std::uint64_t rng_seed = 0;
  std::vector<std::size_t> masked;   // sorted ascending
  std::vector<std::size_t> visible;  // sorted ascending, complement of masked
};

/// Uniform subset without replacement of size round(ratio * n_tokens).
/// Deterministic per seed. Errors when either side of the partition would
/// be empty.
inline MaskSpec sample_mask(std::size_t n_tokens, double ratio,
                            std::uint64_t seed) {
  if (n_tokens < 2)
    throw ValueError("sample_mask: need at least 2 tokens to split");
  if (!(ratio > 0.0 && ratio < 1.0))
    throw ValueError("sample_mask: ratio must lie strictly between 0 and 1");
  const std::size_t count = static_cast<std::size_t>(
      std::llround(ratio * static_cast<double>(n_tokens)));
  if (count == 0 || count == n_tokens) {
    std::ostringstream os;
    os << "sample_mask: ratio " << ratio << " over " << n_tokens
       << " tokens leaves an empty partition";
    throw ValueError(os.str());
  }
  std::vector<std::size_t> perm(n_tokens);
  std::iota(perm.begin(), perm.end(), std::size_t(0));
  Rng rng(seed);
  // Partial Fisher-Yates: the first `count` entries become the masked set.
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t j = i + rng.index(n_tokens - i);
    std::swap(perm[i], perm[j]);
  }
  MaskSpec spec;
  spec.ratio = ratio;
  spec.rng_seed = seed;
  spec.masked.assign(perm.begin(), perm.begin() + static_cast<long>(count));
  std::sort(spec.masked.begin(), spec.masked.end());
  spec.visible.assign(perm.begin() + static_cast<long>(count), perm.end());
  std::sort(spec.visible.begin(), spec.visible.end());
  return spec;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct MAEConfig {
  std::size_t t_patch = 2;
  std::size_t s_patch = 8;
  std::size_t channels = 1;
  std::size_t d_enc = 32;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 1;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 64;
  double mask_ratio = 0.9;
  enum class ReconLoss { l2_norm, mse };
  // Default is the mean of per-token L2 norms; mse is the squared variant.
  ReconLoss loss_kind = ReconLoss::l2_norm;

  std::size_t token_dim() const { return t_patch * s_patch * s_patch * channels; }

  void validate() const {
    if (t_patch == 0 || s_patch == 0 || channels == 0 || d_enc == 0 ||
        enc_layers == 0 || dec_layers == 0 || num_heads == 0 || ffn_dim == 0)
      throw ValueError("MAEConfig: all structural fields must be positive");
    if (d_enc % num_heads != 0)
      throw ValueError("MAEConfig: d_enc must be divisible by num_heads");
    if (d_enc % 2 != 0) throw ValueError("MAEConfig: d_enc must be even");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
      throw ValueError("MAEConfig: mask_ratio must lie strictly between 0 and 1");
  }
};

/// Masked autoencoder over tubelet tokens. The encoder sees only visible
/// tokens (plus their positions); the decoder sees encoder outputs at the
/// visible positions and a shared learnable mask token everywhere else,
/// and reconstructs raw token values at the masked positions.
template <class Real>
struct MAEModel {
  MAEConfig cfg;
  LinearLayer<Real> token_proj;  // token_dim -> d_enc
  Tensor<Real> mask_token;       // [d_enc]
  std::vector<TransformerLayerParams<Real>> encoder;
  LayerNormParams<Real> enc_final;
  std::vector<TransformerLayerParams<Real>> decoder;
  LayerNormParams<Real> dec_final;
  LinearLayer<Real> recon;  // d_enc -> token_dim

  static MAEModel init(const MAEConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    MAEModel m;
    m.cfg = cfg;
    Rng rng(seed);
    m.token_proj = init_linear<Real>(cfg.token_dim(), cfg.d_enc, rng);
    std::vector<Real> mt(cfg.d_enc);
    for (auto& v : mt) v = static_cast<Real>(rng.normal(0.0, 0.02));
    m.mask_token = Tensor<Real>::parameter({cfg.d_enc}, std::move(mt));
    for (std::size_t i = 0; i < cfg.enc_layers; ++i)
      m.encoder.push_back(init_transformer_layer<Real>(cfg.d_enc, cfg.ffn_dim,
                                                       cfg.num_heads, 0, rng));
    m.enc_final = init_layer_norm<Real>(cfg.d_enc);
    for (std::size_t i = 0; i < cfg.dec_layers; ++i)
      m.decoder.push_back(init_transformer_layer<Real>(cfg.d_enc, cfg.ffn_dim,
                                                       cfg.num_heads, 0, rng));
    m.dec_final = init_layer_norm<Real>(cfg.d_enc);
    m.recon = init_linear<Real>(cfg.d_enc, cfg.token_dim(), rng);
    return m;
  }

  std::vector<Tensor<Real>> parameters() const {
    std::vector<Tensor<Real>> out;
    collect_parameters(token_proj, out);
    out.push_back(mask_token);
    for (const auto& l : encoder) collect_parameters(l, out);
    collect_parameters(enc_final, out);
    for (const auto& l : decoder) collect_parameters(l, out);
    collect_parameters(dec_final, out);
    collect_parameters(recon, out);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
  }
};

namespace detail {

/// Rows of the plain sinusoidal table at the given grid positions.
template <class Real>
Tensor<Real> position_rows(const std::vector<std::size_t>& positions,
                           std::size_t d) {
  std::vector<Real> out(positions.size() * d);
  for (std::size_t r = 0; r < positions.size(); ++r) {
    for (std::size_t k = 0; k < d / 2; ++k) {
      const double w = sinusoid_frequency(k, d);
      const double arg = static_cast<double>(positions[r]) * w;
      out[r * d + 2 * k] = static_cast<Real>(std::sin(arg));
      out[r * d + 2 * k + 1] = static_cast<Real>(std::cos(arg));
    }
  }
  return Tensor<Real>::constant({positions.size(), d}, std::move(out));
}

}  // namespace detail

/// Encoder pass over the given token rows, which sit at `positions` in the
/// full token grid. No masking happens here; callers select rows first.
/// The encoder's position encoding uses only the spatial index within a
/// temporal slice (grid position mod `tokens_per_slice`), so encoder
/// features are invariant to temporal translation; the decoder carries the
/// full grid position instead.
template <class Real>
Tensor<Real> mae_encode(const MAEModel<Real>& model, const Tensor<Real>& tokens,
                        const std::vector<std::size_t>& positions,
                        std::size_t tokens_per_slice) {
  if (tokens.rank() != 2 || tokens.extent(1) != model.cfg.token_dim()) {
    std::ostringstream os;
    os << "mae_encode: expected [n x " << model.cfg.token_dim()
       << "] tokens, got " << shape_str(tokens.shape());
    throw ShapeError(os.str());
  }
  if (positions.size() != tokens.extent(0))
    throw ShapeError("mae_encode: one grid position per token row required");
  if (tokens_per_slice == 0)
    throw ValueError("mae_encode: tokens_per_slice must be positive");
  std::vector<std::size_t> spatial(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i)
    spatial[i] = positions[i] % tokens_per_slice;
  Tensor<Real> h = add(model.token_proj.apply(tokens),
                       detail::position_rows<Real>(spatial, model.cfg.d_enc));
  for (const auto& layer : model.encoder)
    h = transformer_layer_forward(h, layer);
  return model.enc_final.apply(h);
}

/// Reconstructs the masked tokens. Output rows follow ascending masked
/// index order; shape [|masked| x token_dim]. `tokens_per_slice` is the
/// spatial token count of one temporal slice of the source grid.
template <class Real>
Tensor<Real> mae_forward(const MAEModel<Real>& model, const Tensor<Real>& tokens,
                         const MaskSpec& mask, std::size_t tokens_per_slice) {
  const std::size_t n = tokens.extent(0);
  if (mask.masked.size() + mask.visible.size() != n) {
    std::ostringstream os;
    os << "mae_forward: mask partitions " << mask.masked.size() << "+"
       << mask.visible.size() << " tokens but the grid has " << n;
    throw ShapeError(os.str());
  }
  Tensor<Real> visible_tokens = select_rows(tokens, mask.visible);
  Tensor<Real> enc_out =
      mae_encode(model, visible_tokens, mask.visible, tokens_per_slice);

  std::vector<std::size_t> all_positions(n);
  std::iota(all_positions.begin(), all_positions.end(), std::size_t(0));
  Tensor<Real> full =
      add(scatter_rows_with_fill(n, mask.visible, enc_out, model.mask_token),
          detail::position_rows<Real>(all_positions, model.cfg.d_enc));
  for (const auto& layer : model.decoder)
    full = transformer_layer_forward(full, layer);
  Tensor<Real> recon = model.recon.apply(model.dec_final.apply(full));
  return select_rows(recon, mask.masked);
}

// ---------------------------------------------------------------------------
// Reconstruction loss
// ---------------------------------------------------------------------------

/// Mean over tokens of the Euclidean norm of the per-token difference
/// (default), or of its square (mse). The norm's subgradient at an exact
/// zero difference is taken as 0.
template <class Real>
Tensor<Real> reconstruction_loss(const Tensor<Real>& target,
                                 const Tensor<Real>& pred,
                                 MAEConfig::ReconLoss kind =
                                     MAEConfig::ReconLoss::l2_norm) {
  detail::require_same_shape(target, pred, "reconstruction_loss");
  detail::require_rank(target, 2, "reconstruction_loss");
  const std::size_t n = target.extent(0), d = target.extent(1);
  const auto& tv = target.values();
  const auto& pv = pred.values();
  std::vector<Real> norms(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = static_cast<double>(tv[i * d + j]) -
                          static_cast<double>(pv[i * d + j]);
      sq += diff * diff;
    }
    const double norm = std::sqrt(sq);
    norms[i] = static_cast<Real>(norm);
    total += kind == MAEConfig::ReconLoss::l2_norm ? norm : sq;
  }
  total /= static_cast<double>(n);
  Tensor<Real> r = Tensor<Real>::constant({1}, {static_cast<Real>(total)});
  if (detail::tracking<Real>({&target, &pred})) {
    detail::mark_tracked(r);
    auto tn = target.node(), pn = pred.node(), on = r.node();
    Tape<Real>::active()->record([tn, pn, on, n, d, kind,
                                  norms = std::move(norms)] {
      if (on->grad.empty()) return;
      const double g = static_cast<double>(on->grad[0]) / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        double factor;
        if (kind == MAEConfig::ReconLoss::l2_norm) {
          const double norm = static_cast<double>(norms[i]);
          if (norm == 0.0) continue;  // subgradient 0 at the kink
          factor = g / norm;
        } else {
          factor = 2.0 * g;
        }
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = static_cast<double>(tn->value[i * d + j]) -
                              static_cast<double>(pn->value[i * d + j]);
          if (tn->requires_grad)
            tn->grad_buffer()[i * d + j] += static_cast<Real>(factor * diff);
          if (pn->requires_grad)
            pn->grad_buffer()[i * d + j] -= static_cast<Real>(factor * diff);
        }
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// Runs the encoder with no masking over consecutive frame windows of
/// length `window_len` (stride = window_len here; incomplete tails are
/// dropped when `pad_tail` is false, or padded by repeating the last frame)
/// and mean-pools the encoder tokens of each temporal slice, producing one
/// d_enc-dimensional row per t_patch frames.
template <class Real>
std::vector<std::vector<Real>> extract_feature_rows(const MAEModel<Real>& model,
                                                    const VideoClip& clip,
                                                    std::size_t window_len,
                                                    std::size_t stride,
                                                    bool pad_tail) {
  if (window_len == 0 || stride == 0)
    throw ValueError("extract_features: window length and stride must be positive");
  if (window_len % model.cfg.t_patch != 0)
    throw ValueError("extract_features: window length must be divisible by t_patch");
  const MAEConfig& c = model.cfg;
  std::vector<std::vector<Real>> rows;
  for (std::size_t start = 0; start < clip.frames; start += stride) {
    const bool complete = start + window_len <= clip.frames;
    if (!complete && !pad_tail) break;
    if (start >= clip.frames) break;
    // Materialize the window, repeating the last frame into any padding.
    VideoClip win;
    win.frames = window_len;
    win.height = clip.height;
    win.width = clip.width;
    win.channels = clip.channels;
    win.data.resize(win.numel());
    const std::size_t frame_sz = clip.height * clip.width * clip.channels;
    for (std::size_t f = 0; f < window_len; ++f) {
      const std::size_t src = std::min(start + f, clip.frames - 1);
      std::copy_n(clip.data.data() + src * frame_sz, frame_sz,
                  win.data.data() + f * frame_sz);
    }
    Tensor<Real> tokens = tubelet_tokenize<Real>(win, c.t_patch, c.s_patch);
    const TubeletGrid g = tubelet_grid(win.frames, win.height, win.width,
                                       win.channels, c.t_patch, c.s_patch);
    const std::size_t per_slice = g.tokens_per_time_slice();
    std::vector<std::size_t> positions(tokens.extent(0));
    std::iota(positions.begin(), positions.end(), std::size_t(0));
    Tensor<Real> enc = mae_encode(model, tokens, positions, per_slice);
    const auto& ev = enc.values();
    for (std::size_t s = 0; s < g.nt; ++s) {
      std::vector<Real> row(c.d_enc, Real(0));
      for (std::size_t k = 0; k < per_slice; ++k) {
        const Real* src = ev.data() + (s * per_slice + k) * c.d_enc;
        for (std::size_t j = 0; j < c.d_enc; ++j) row[j] += src[j];
      }
      for (auto& v : row) v /= static_cast<Real>(per_slice);
      rows.push_back(std::move(row));
    }
    if (!complete) break;  // padded tail window is the last one
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic "MAES", same layout discipline as "CTRS".
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kMaeFormatVersion = 1;

template <class Real>
void save_checkpoint(const MAEModel<Real>& m, const std::string& path) {
  BinaryWriter w(path);
  w.magic("MAES");
  w.u32(kMaeFormatVersion);
  const MAEConfig& c = m.cfg;
  w.u32(static_cast<std::uint32_t>(c.t_patch));
  w.u32(static_cast<std::uint32_t>(c.s_patch));
  w.u32(static_cast<std::uint32_t>(c.channels));
  w.u32(static_cast<std::uint32_t>(c.d_enc));
  w.u32(static_cast<std::uint32_t>(c.enc_layers));
  w.u32(static_cast<std::uint32_t>(c.dec_layers));
  w.u32(static_cast<std::uint32_t>(c.num_heads));
  w.u32(static_cast<std::uint32_t>(c.ffn_dim));
  w.f64(c.mask_ratio);
  w.u32(c.loss_kind == MAEConfig::ReconLoss::l2_norm ? 0u : 1u);
  for (const auto& p : m.parameters()) w.f64_array(p.values());
  w.close();
}

template <class Real>
MAEModel<Real> load_mae_checkpoint(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic("MAES");
  const std::uint32_t version = r.u32();
  if (version != kMaeFormatVersion) {
    std::ostringstream os;
    os << path << ": unsupported checkpoint format version " << version
       << " (expected " << kMaeFormatVersion << ")";
    throw IoError(os.str());
  }
  MAEConfig c;
  c.t_patch = r.u32();
  c.s_patch = r.u32();
  c.channels = r.u32();
  c.d_enc = r.u32();
  c.enc_layers = r.u32();
  c.dec_layers = r.u32();
  c.num_heads = r.u32();
  c.ffn_dim = r.u32();
  c.mask_ratio = r.f64();
  c.loss_kind = r.u32() == 0u ? MAEConfig::ReconLoss::l2_norm
                              : MAEConfig::ReconLoss::mse;
  c.validate();
  MAEModel<Real> m = MAEModel<Real>::init(c, 0);
  for (auto& p : m.parameters()) p.values_mut() = r.template f64_array<Real>(p.numel());
  r.expect_eof();
  return m;
}

}  // namespace seqformer
