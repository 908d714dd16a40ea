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
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "seqformer/config.hpp"
#include "seqformer/convtrans.hpp"
#include "seqformer/data.hpp"
#include "seqformer/mae.hpp"
#include "seqformer/metrics.hpp"
#include "seqformer/optim.hpp"
#include "seqformer/version.hpp"

namespace seqformer {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Worker-thread cap: SEQFORMER_THREADS when set and positive, otherwise
/// min(hardware concurrency, 4). Only evaluation sharding fans out.
inline std::size_t worker_thread_cap() {
  if (const char* env = std::getenv("SEQFORMER_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return std::min<std::size_t>(hw == 0 ? 1 : hw, 4);
}

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Raw clip container: magic "VCLP", version u32, T/H/W/C u32, then
// T*H*W*C little-endian f32 values in (t, y, x, c) order.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kClipFormatVersion = 1;

inline void save_clip(const VideoClip& clip, const std::string& path) {
  BinaryWriter w(path);
  w.magic("VCLP");
  w.u32(kClipFormatVersion);
  w.u32(static_cast<std::uint32_t>(clip.frames));
  w.u32(static_cast<std::uint32_t>(clip.height));
  w.u32(static_cast<std::uint32_t>(clip.width));
  w.u32(static_cast<std::uint32_t>(clip.channels));
  w.f32_array(clip.data);
  w.close();
}

inline VideoClip load_clip(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic("VCLP");
  const std::uint32_t version = r.u32();
  if (version != kClipFormatVersion)
    throw IoError(path + ": unsupported clip format version " +
                  std::to_string(version));
  VideoClip clip;
  clip.frames = r.u32();
  clip.height = r.u32();
  clip.width = r.u32();
  clip.channels = r.u32();
  if (clip.frames == 0 || clip.height == 0 || clip.width == 0 ||
      clip.channels == 0)
    throw IoError(path + ": clip extents must be positive (header at byte 8)");
  clip.data = r.f32_array(clip.numel());
  r.expect_eof();
  clip.source_id = fs::path(path).stem().string();
  return clip;
}

/// Synthetic pretraining clips: a shared spatial pattern, a per-clip
/// temporal phase (by class when labeled), and mild noise. Most of the
/// signal is predictable from token position and the visible tokens, so a
/// small autoencoder can cut the reconstruction loss quickly.
inline std::vector<VideoClip> synth_pretrain_clips(std::uint64_t seed,
                                                   std::size_t count,
                                                   std::size_t frames,
                                                   std::size_t height,
                                                   std::size_t width,
                                                   std::size_t channels) {
  Rng rng(seed);
  std::vector<VideoClip> clips;
  clips.reserve(count);
  const double two_pi = 2.0 * 3.14159265358979323846;
  for (std::size_t i = 0; i < count; ++i) {
    VideoClip c;
    c.frames = frames;
    c.height = height;
    c.width = width;
    c.channels = channels;
    c.fps = 30.0;
    {
      std::ostringstream os;
      os << "clip-" << seed << "-" << i;
      c.source_id = os.str();
    }
    c.data.resize(c.numel());
    const std::size_t cls = i % kNumPainClasses;
    const double phase = two_pi * static_cast<double>(cls) / 3.0 +
                         rng.uniform(-0.3, 0.3);
    for (std::size_t t = 0; t < frames; ++t) {
      const double wave_t =
          0.2 * std::sin(two_pi * static_cast<double>(t) /
                             static_cast<double>(frames) +
                         phase);
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
          for (std::size_t ch = 0; ch < channels; ++ch) {
            const double v =
                0.5 +
                0.4 * std::sin(two_pi * static_cast<double>(x) /
                               static_cast<double>(width)) *
                    std::cos(two_pi * static_cast<double>(y) /
                             static_cast<double>(height)) +
                wave_t + rng.normal(0.0, 0.02);
            c.at(t, y, x, ch) = static_cast<float>(v);
          }
    }
    clips.push_back(std::move(c));
  }
  return clips;
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

inline json base_manifest(const RunConfig& cfg, const std::string& command) {
  json m;
  m["command"] = command;
  m["seqformer_version"] = kVersion;
  m["seed"] = cfg.run.seed;
  m["config_hash"] = cfg.config_hash();
  json kv = json::object();
  for (const auto& [k, v] : cfg.key_values()) kv[k] = v;
  m["config"] = kv;
  return m;
}

inline void write_manifest(const json& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError(path + ": cannot open for writing");
  out << m.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Shared config plumbing
// ---------------------------------------------------------------------------

inline OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "adamw") return OptimizerKind::adamw;
  if (s == "adam") return OptimizerKind::adam;
  if (s == "radam") return OptimizerKind::radam;
  throw ConfigError("unknown optimizer kind \"" + s + "\"");
}

inline ConvTransConfig classifier_config(const RunConfig& cfg,
                                         std::size_t input_dim) {
  ConvTransConfig c;
  c.num_layers = cfg.model.layers;
  c.num_heads = cfg.model.heads;
  c.d_model = cfg.model.d_model;
  c.ffn_dim = cfg.model.ffn_dim;
  c.seq_len = cfg.model.seq_len;
  c.input_dim = input_dim;
  c.num_classes = cfg.model.num_classes;
  c.conv_kernel = cfg.model.conv_kernel;
  c.dropout = cfg.model.dropout;
  c.use_tape = cfg.model.use_tape;
  c.use_erpe = cfg.model.use_erpe;
  c.extra_skip = cfg.model.skip;
  return c;
}

inline MAEConfig mae_config(const RunConfig& cfg) {
  MAEConfig c;
  c.t_patch = cfg.mae.t_patch;
  c.s_patch = cfg.mae.s_patch;
  c.d_enc = cfg.mae.d_enc;
  c.enc_layers = cfg.mae.enc_layers;
  c.dec_layers = cfg.mae.dec_layers;
  c.num_heads = cfg.mae.heads;
  c.ffn_dim = cfg.mae.ffn_dim;
  c.mask_ratio = cfg.mae.ratio;
  c.loss_kind = cfg.mae.loss == "mse" ? MAEConfig::ReconLoss::mse
                                      : MAEConfig::ReconLoss::l2_norm;
  return c;
}

inline WindowSpec window_spec(const RunConfig& cfg) {
  WindowSpec w;
  w.len = cfg.model.seq_len;
  w.stride = cfg.data.stride == 0 ? cfg.model.seq_len : cfg.data.stride;
  w.tail = cfg.data.tail_policy == "pad_repeat_last"
               ? WindowSpec::Tail::pad_repeat_last
               : WindowSpec::Tail::drop;
  return w;
}

template <class Real>
std::size_t argmax_class(const Tensor<Real>& logits) {
  const auto& v = logits.values();
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

struct PretrainResult {
  std::string checkpoint_path;
  std::string loss_csv_path;
  std::string manifest_path;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

template <class Real>
PretrainResult run_pretrain(const RunConfig& cfg, const std::string& out_dir,
                            const std::string& clips_dir = "",
                            std::size_t steps_override = 0) {
  fs::create_directories(out_dir);
  std::vector<VideoClip> clips;
  if (clips_dir.empty()) {
    clips = synth_pretrain_clips(derive_seed(cfg.run.seed, "synth.clips"), 64,
                                 16, 32, 32, 1);
  } else {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(clips_dir))
      if (e.is_regular_file() && e.path().extension() == ".vclp")
        files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) clips.push_back(load_clip(f));
    if (clips.empty()) throw ConfigError(clips_dir + ": no .vclp clips found");
  }

  MAEConfig mcfg = mae_config(cfg);
  if (clips[0].channels != mcfg.channels) mcfg.channels = clips[0].channels;
  MAEModel<Real> model =
      MAEModel<Real>::init(mcfg, derive_seed(cfg.run.seed, "pretrain.init"));

  OptimizerConfig ocfg;
  ocfg.kind = parse_optimizer_kind(cfg.mae.kind);
  ocfg.base_lr = cfg.mae.lr;
  ocfg.beta1 = cfg.mae.beta1;
  ocfg.beta2 = cfg.mae.beta2;
  ocfg.weight_decay = cfg.mae.weight_decay;
  ocfg.eps = cfg.mae.eps;
  Optimizer<Real> opt(ocfg, model.parameters());

  const std::size_t steps = steps_override ? steps_override : cfg.mae.steps;
  if (steps == 0) throw ConfigError("mae.steps must be positive");
  CosineSchedule sched{cfg.mae.lr, steps, cfg.mae.warmup, 0.0};
  Rng mask_rng = derive_rng(cfg.run.seed, "pretrain.mask");

  PretrainResult res;
  res.loss_csv_path = (fs::path(out_dir) / "pretrain_loss.csv").string();
  std::ofstream csv(res.loss_csv_path);
  if (!csv) throw IoError(res.loss_csv_path + ": cannot open for writing");
  csv << "step,loss\n";

  for (std::size_t step = 0; step < steps; ++step) {
    const VideoClip& clip = clips[step % clips.size()];
    Tensor<Real> tokens =
        tubelet_tokenize<Real>(clip, mcfg.t_patch, mcfg.s_patch);
    const TubeletGrid grid =
        tubelet_grid(clip.frames, clip.height, clip.width, clip.channels,
                     mcfg.t_patch, mcfg.s_patch);
    MaskSpec mask =
        sample_mask(tokens.extent(0), mcfg.mask_ratio, mask_rng.next_u64());
    Tape<Real> tape;
    Tensor<Real> pred =
        mae_forward(model, tokens, mask, grid.tokens_per_time_slice());
    Tensor<Real> target = select_rows(tokens, mask.masked);
    Tensor<Real> loss = reconstruction_loss(target, pred, mcfg.loss_kind);
    check_finite(loss, "pretrain loss");
    const double loss_v = static_cast<double>(loss.at(0));
    if (step == 0) res.initial_loss = loss_v;
    res.final_loss = loss_v;
    csv << step << ',' << fmt_g17(loss_v) << '\n';
    backward(loss);
    const double lr = cfg.mae.schedule == "cosine"
                          ? lr_at(sched, step)
                          : cfg.mae.lr;
    opt.step(lr);
    opt.zero_grad();
  }
  csv.close();

  res.checkpoint_path = (fs::path(out_dir) / "mae_checkpoint.bin").string();
  save_checkpoint(model, res.checkpoint_path);

  json m = base_manifest(cfg, "pretrain");
  m["steps"] = steps;
  m["masking_ratio"] = mcfg.mask_ratio;
  m["clips"] = clips.size();
  m["clips_source"] = clips_dir.empty() ? "synthetic" : clips_dir;
  m["checkpoint"] = res.checkpoint_path;
  m["loss_csv"] = res.loss_csv_path;
  m["initial_loss"] = res.initial_loss;
  m["final_loss"] = res.final_loss;
  res.manifest_path = (fs::path(out_dir) / "manifest.json").string();
  write_manifest(m, res.manifest_path);
  return res;
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

struct ExtractResult {
  std::string features_dir;
  std::string manifest_path;
  std::size_t clip_count = 0;
  std::size_t feature_dim = 0;
};

template <class Real>
ExtractResult run_extract(const RunConfig& cfg, const std::string& checkpoint,
                          const std::string& clips_dir,
                          std::size_t synthetic_count,
                          const std::string& out_dir, bool export_csv_too = false) {
  fs::create_directories(out_dir);
  MAEModel<Real> model = load_mae_checkpoint<Real>(checkpoint);
  if (model.cfg.t_patch != cfg.mae.t_patch ||
      model.cfg.s_patch != cfg.mae.s_patch || model.cfg.d_enc != cfg.mae.d_enc)
    throw ConfigError(
        "checkpoint geometry (t_patch/s_patch/d_enc) does not match the mae "
        "config block");

  std::vector<VideoClip> clips;
  std::map<std::string, std::size_t> labels;
  if (!clips_dir.empty()) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(clips_dir))
      if (e.is_regular_file() && e.path().extension() == ".vclp")
        files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) clips.push_back(load_clip(f));
    const fs::path lp = fs::path(clips_dir) / "labels.tsv";
    if (fs::exists(lp)) {
      std::ifstream in(lp);
      std::string line;
      while (std::getline(in, line)) {
        const auto tab = line.find('\t');
        if (tab == std::string::npos) continue;
        labels[line.substr(0, tab)] = parse_pain_class(line.substr(tab + 1));
      }
    }
  } else {
    if (synthetic_count == 0) synthetic_count = 16;
    clips = synth_pretrain_clips(derive_seed(cfg.run.seed, "synth.clips"),
                                 synthetic_count, 16, 32, 32, 1);
    for (std::size_t i = 0; i < clips.size(); ++i)
      labels[clips[i].source_id] = i % kNumPainClasses;
  }
  if (clips.empty()) throw ConfigError("extract: no clips to process");

  const WindowSpec spec = window_spec(cfg);
  Dataset out_ds;
  for (const auto& clip : clips) {
    auto rows = extract_feature_rows(model, clip, spec.len, spec.stride,
                                     spec.tail == WindowSpec::Tail::pad_repeat_last);
    if (rows.empty()) continue;
    FeatureSequence seq;
    seq.rows = rows.size();
    seq.dim = model.cfg.d_enc;
    seq.source_id = clip.source_id;
    seq.values.reserve(seq.rows * seq.dim);
    for (const auto& r : rows)
      for (Real v : r) seq.values.push_back(static_cast<float>(v));
    const auto it = labels.find(clip.source_id);
    if (it != labels.end()) seq.label = it->second;
    out_ds.sequences.push_back(std::move(seq));
  }
  out_ds.feature_dim = model.cfg.d_enc;
  out_ds.recount();
  save_features(out_ds, out_dir);
  if (export_csv_too)
    for (const auto& seq : out_ds.sequences)
      export_csv(seq, (fs::path(out_dir) / (seq.source_id + ".csv")).string());

  ExtractResult res;
  res.features_dir = out_dir;
  res.clip_count = clips.size();
  res.feature_dim = model.cfg.d_enc;
  json m = base_manifest(cfg, "extract");
  m["checkpoint"] = checkpoint;
  m["clips"] = clips.size();
  m["clips_source"] = clips_dir.empty() ? "synthetic" : clips_dir;
  m["feature_dim"] = model.cfg.d_enc;
  m["window_len"] = spec.len;
  m["window_stride"] = spec.stride;
  res.manifest_path = (fs::path(out_dir) / "manifest.json").string();
  write_manifest(m, res.manifest_path);
  return res;
}

// ---------------------------------------------------------------------------
// Classifier training
// ---------------------------------------------------------------------------

struct TrainResult {
  std::string checkpoint_path;
  std::string log_csv_path;
  std::string manifest_path;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
  double final_train_accuracy = 0.0;
  bool reached_perfect_train = false;
};

namespace detail {

template <class Real>
double segment_accuracy(const ConvTransModel<Real>& model,
                        const std::vector<Segment>& segments) {
  if (segments.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& seg : segments) {
    const Tensor<Real> logits = model.forward(segment_tensor<Real>(seg));
    if (argmax_class(logits) == *seg.label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(segments.size());
}

}  // namespace detail

struct TrainOptions {
  // Stop once the post-epoch training accuracy reaches this value (1.0 for
  // exact fit); 0 disables early stopping.
  double early_stop_train_acc = 0.0;
};

template <class Real>
TrainResult run_train(const RunConfig& cfg, const std::string& features_dir,
                      const std::string& out_dir, TrainOptions opts = {}) {
  fs::create_directories(out_dir);
  Dataset ds = load_features(features_dir);
  if (ds.sequences.empty())
    throw ConfigError(features_dir + ": no feature sequences to train on");
  for (const auto& seq : ds.sequences)
    if (!seq.label)
      throw ConfigError(features_dir + ": sequence \"" + seq.source_id +
                        "\" has no label; training requires labels.tsv");

  const WindowSpec spec = window_spec(cfg);
  std::vector<Segment> train_segments;
  for (const auto& seq : ds.sequences) {
    WindowResult wr = window(seq, spec);
    for (auto& s : wr.segments) train_segments.push_back(std::move(s));
  }
  if (train_segments.empty())
    throw ConfigError(features_dir + ": windowing produced no segments");

  std::vector<Segment> val_segments;
  if (!cfg.data.val_path.empty()) {
    Dataset val = load_features(cfg.data.val_path);
    for (const auto& seq : val.sequences) {
      if (!seq.label)
        throw ConfigError(cfg.data.val_path + ": validation data must be labeled");
      WindowResult wr = window(seq, spec);
      for (auto& s : wr.segments) val_segments.push_back(std::move(s));
    }
  }
  const std::vector<Segment>& val_ref =
      val_segments.empty() ? train_segments : val_segments;

  ConvTransConfig ccfg = classifier_config(cfg, ds.feature_dim);
  ConvTransModel<Real> model =
      ConvTransModel<Real>::init(ccfg, derive_seed(cfg.run.seed, "train.init"));

  OptimizerConfig ocfg;
  ocfg.kind = parse_optimizer_kind(cfg.optimizer.kind);
  ocfg.base_lr = cfg.optimizer.lr;
  ocfg.beta1 = cfg.optimizer.beta1;
  ocfg.beta2 = cfg.optimizer.beta2;
  ocfg.weight_decay = cfg.optimizer.weight_decay;
  ocfg.eps = cfg.optimizer.eps;
  std::vector<Tensor<Real>> params = model.parameters();
  Optimizer<Real> opt(ocfg, params);

  const std::size_t batch = std::min(cfg.run.batch_size, train_segments.size());
  const std::size_t steps_per_epoch = (train_segments.size() + batch - 1) / batch;
  const std::size_t total_steps = cfg.optimizer.total_steps
                                      ? cfg.optimizer.total_steps
                                      : cfg.run.epochs * steps_per_epoch;
  CosineSchedule sched{cfg.optimizer.lr, total_steps, cfg.optimizer.warmup,
                       cfg.optimizer.min_lr};
  Rng shuffle_rng = derive_rng(cfg.run.seed, "train.shuffle");
  Rng dropout_rng = derive_rng(cfg.run.seed, "train.dropout");
  Rng* drop = cfg.model.dropout > 0.0 ? &dropout_rng : nullptr;

  TrainResult res;
  res.log_csv_path = (fs::path(out_dir) / "train_log.csv").string();
  std::ofstream log(res.log_csv_path);
  if (!log) throw IoError(res.log_csv_path + ": cannot open for writing");
  log << "epoch,loss,train_acc,val_acc\n";

  std::vector<std::vector<Real>> best_values;
  double best_val = -1.0;
  std::size_t global_step = 0;
  std::vector<std::size_t> order(train_segments.size());
  std::iota(order.begin(), order.end(), std::size_t(0));

  for (std::size_t epoch = 1; epoch <= cfg.run.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
      const std::size_t b1 = std::min(b0 + batch, order.size());
      Tape<Real> tape;
      Tensor<Real> loss_sum = Tensor<Real>::zeros({1});
      for (std::size_t i = b0; i < b1; ++i) {
        const Segment& seg = train_segments[order[i]];
        Tensor<Real> logits = model.forward(segment_tensor<Real>(seg), drop);
        loss_sum = add(loss_sum, cross_entropy(logits, *seg.label));
      }
      Tensor<Real> loss =
          mul_scalar(loss_sum, Real(1) / static_cast<Real>(b1 - b0));
      check_finite(loss, "training loss");
      epoch_loss += static_cast<double>(loss.at(0));
      ++batches;
      backward(loss);
      if (cfg.optimizer.clip_norm > 0.0)
        clip_global_norm(params, cfg.optimizer.clip_norm);
      const double lr = cfg.optimizer.schedule == "cosine"
                            ? lr_at(sched, std::min(global_step, total_steps))
                            : cfg.optimizer.lr;
      opt.step(lr);
      opt.zero_grad();
      ++global_step;
    }
    epoch_loss /= static_cast<double>(batches);
    const double train_acc = detail::segment_accuracy(model, train_segments);
    const double val_acc = detail::segment_accuracy(model, val_ref);
    log << epoch << ',' << fmt_g17(epoch_loss) << ',' << fmt_g17(train_acc)
        << ',' << fmt_g17(val_acc) << '\n';
    res.epochs_run = epoch;
    res.final_train_accuracy = train_acc;
    if (val_acc > best_val) {
      best_val = val_acc;
      res.best_epoch = epoch;
      best_values.clear();
      for (const auto& p : params) best_values.push_back(p.values());
    }
    if (train_acc >= 1.0) res.reached_perfect_train = true;
    if (opts.early_stop_train_acc > 0.0 &&
        train_acc >= opts.early_stop_train_acc)
      break;
  }
  log.close();
  res.best_val_accuracy = best_val;

  // Persist the best-by-validation parameters.
  for (std::size_t i = 0; i < params.size(); ++i)
    params[i].values_mut() = best_values[i];
  res.checkpoint_path = (fs::path(out_dir) / "classifier_checkpoint.bin").string();
  save_checkpoint(model, res.checkpoint_path);

  json m = base_manifest(cfg, "train");
  m["features"] = features_dir;
  m["windows"] = train_segments.size();
  m["L"] = ccfg.seq_len;
  m["layers"] = ccfg.num_layers;
  m["heads"] = ccfg.num_heads;
  m["ffn_dim"] = ccfg.ffn_dim;
  m["d_model"] = ccfg.d_model;
  m["use_tape"] = ccfg.use_tape;
  m["use_erpe"] = ccfg.use_erpe;
  m["extra_skip"] = ccfg.extra_skip;
  m["epochs_run"] = res.epochs_run;
  m["best_epoch"] = res.best_epoch;
  m["best_val_accuracy"] = res.best_val_accuracy;
  m["checkpoint"] = res.checkpoint_path;
  m["log_csv"] = res.log_csv_path;
  res.manifest_path = (fs::path(out_dir) / "manifest.json").string();
  write_manifest(m, res.manifest_path);
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  MetricsSummary window_summary;
  std::optional<MetricsSummary> video_summary;
  std::string report_text;
  std::string report_txt_path;
  std::string report_json_path;
  std::string manifest_path;
};

template <class Real>
EvalResult run_eval(const RunConfig& cfg, const std::string& checkpoint,
                    const std::string& features_dir, const std::string& out_dir,
                    bool vote = false, bool weighted_avg = false) {
  fs::create_directories(out_dir);
  ConvTransModel<Real> model = load_checkpoint<Real>(checkpoint);
  Dataset ds = load_features(features_dir);
  if (ds.sequences.empty())
    throw ConfigError(features_dir + ": no feature sequences to evaluate");
  if (ds.feature_dim != model.cfg.input_dim) {
    std::ostringstream os;
    os << features_dir << ": feature dim " << ds.feature_dim
       << " does not match the checkpoint input dim " << model.cfg.input_dim;
    throw ConfigError(os.str());
  }
  for (const auto& seq : ds.sequences)
    if (!seq.label)
      throw ConfigError(features_dir + ": sequence \"" + seq.source_id +
                        "\" has no label; evaluation requires labels.tsv");

  WindowSpec spec = window_spec(cfg);
  spec.len = model.cfg.seq_len;  // the checkpoint fixes the segment length
  if (cfg.data.stride == 0) spec.stride = spec.len;

  const std::size_t m_classes = model.cfg.num_classes;
  const std::size_t n_threads =
      std::min(worker_thread_cap(), ds.sequences.size());
  std::vector<ConfusionMatrix> window_cms(n_threads, ConfusionMatrix(m_classes));
  std::vector<ConfusionMatrix> video_cms(n_threads, ConfusionMatrix(m_classes));
  std::vector<std::thread> workers;
  std::vector<std::string> shard_errors(n_threads);
  for (std::size_t w = 0; w < n_threads; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < ds.sequences.size(); i += n_threads) {
          const FeatureSequence& seq = ds.sequences[i];
          WindowResult wr = window(seq, spec);
          std::vector<std::size_t> preds;
          for (const auto& seg : wr.segments) {
            const Tensor<Real> logits = model.forward(segment_tensor<Real>(seg));
            const std::size_t pred = argmax_class(logits);
            preds.push_back(pred);
            window_cms[w].add(*seq.label, pred);
          }
          if (!preds.empty())
            video_cms[w].add(*seq.label, video_label_vote(preds));
        }
      } catch (const std::exception& e) {
        shard_errors[w] = e.what();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (const auto& err : shard_errors)
    if (!err.empty()) throw Error("eval shard failed: " + err);

  ConfusionMatrix window_cm(m_classes), video_cm(m_classes);
  for (const auto& cm : window_cms) window_cm += cm;
  for (const auto& cm : video_cms) video_cm += cm;

  EvalResult res;
  res.window_summary = summary(window_cm);
  const ConfusionMatrix& report_cm = vote ? video_cm : window_cm;
  const MetricsSummary report_summary = summary(report_cm);
  if (vote) res.video_summary = report_summary;

  std::vector<std::string> names;
  for (std::size_t c = 0; c < m_classes; ++c)
    names.push_back(c < kNumPainClasses ? pain_class_name(c)
                                        : "class" + std::to_string(c));
  res.report_text = format_report(report_summary, names, weighted_avg);

  json rep;
  rep["level"] = vote ? "video" : "window";
  rep["total"] = report_summary.total;
  rep["accuracy"] = report_summary.accuracy;
  json per = json::array();
  for (std::size_t c = 0; c < m_classes; ++c) {
    const ClassMetrics& cm = report_summary.per_class[c];
    per.push_back({{"name", names[c]},
                   {"precision", cm.precision},
                   {"recall", cm.recall},
                   {"f1", cm.f1},
                   {"precision_degenerate", cm.precision_degenerate},
                   {"recall_degenerate", cm.recall_degenerate},
                   {"f1_degenerate", cm.f1_degenerate}});
  }
  rep["per_class"] = per;
  rep["macro"] = {{"precision", report_summary.macro_precision},
                  {"recall", report_summary.macro_recall},
                  {"f1", report_summary.macro_f1}};
  rep["weighted"] = {{"precision", report_summary.weighted_precision},
                     {"recall", report_summary.weighted_recall},
                     {"f1", report_summary.weighted_f1}};
  json conf = json::array();
  for (std::size_t i = 0; i < m_classes; ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < m_classes; ++j) row.push_back(report_cm.at(i, j));
    conf.push_back(row);
  }
  rep["confusion"] = conf;

  res.report_txt_path = (fs::path(out_dir) / "report.txt").string();
  {
    std::ofstream out(res.report_txt_path);
    if (!out) throw IoError(res.report_txt_path + ": cannot open for writing");
    out << res.report_text;
  }
  res.report_json_path = (fs::path(out_dir) / "report.json").string();
  {
    std::ofstream out(res.report_json_path);
    if (!out) throw IoError(res.report_json_path + ": cannot open for writing");
    out << rep.dump(2) << '\n';
  }

  json m = base_manifest(cfg, "eval");
  m["checkpoint"] = checkpoint;
  m["features"] = features_dir;
  m["vote"] = vote;
  m["weighted_avg"] = weighted_avg;
  m["accuracy"] = report_summary.accuracy;
  res.manifest_path = (fs::path(out_dir) / "manifest.json").string();
  write_manifest(m, res.manifest_path);
  return res;
}

// ---------------------------------------------------------------------------
// Encoding inspection
// ---------------------------------------------------------------------------

struct InspectResult {
  std::string table_csv_path;
  std::string index_map_csv_path;
  std::string manifest_path;
};

inline InspectResult run_inspect_encodings(const RunConfig& cfg, std::size_t len,
                                           std::size_t d_model,
                                           const std::string& out_dir) {
  fs::create_directories(out_dir);
  const TapeTable<double> table = build_tape_table<double>(len, d_model);
  InspectResult res;
  res.table_csv_path = (fs::path(out_dir) / "tape_table.csv").string();
  {
    std::ofstream out(res.table_csv_path);
    if (!out) throw IoError(res.table_csv_path + ": cannot open for writing");
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < d_model; ++j) {
        if (j) out << ',';
        out << fmt_g17(table.table.at(i, j));
      }
      out << '\n';
    }
  }
  res.index_map_csv_path = (fs::path(out_dir) / "erpe_index_map.csv").string();
  {
    std::ofstream out(res.index_map_csv_path);
    if (!out) throw IoError(res.index_map_csv_path + ": cannot open for writing");
    for (std::size_t i = 1; i <= len; ++i) {
      for (std::size_t j = 1; j <= len; ++j) {
        if (j > 1) out << ',';
        out << erpe_index(i, j, len);
      }
      out << '\n';
    }
  }
  json m = base_manifest(cfg, "inspect-encodings");
  m["L"] = len;
  m["d_model"] = d_model;
  m["tape_table_csv"] = res.table_csv_path;
  m["erpe_index_map_csv"] = res.index_map_csv_path;
  res.manifest_path = (fs::path(out_dir) / "manifest.json").string();
  write_manifest(m, res.manifest_path);
  return res;
}

// ---------------------------------------------------------------------------
// Synthetic data commands
// ---------------------------------------------------------------------------

struct SynthResult {
  std::string out_dir;
  std::string manifest_path;
  std::size_t count = 0;
};

inline SynthResult run_synth_features(const RunConfig& cfg,
                                      std::size_t n_per_class, std::size_t len,
                                      std::size_t dim,
                                      SynthDifficulty difficulty,
                                      const std::string& out_dir,
                                      bool export_csv_too = false) {
  fs::create_directories(out_dir);
  Dataset ds = synth_classification_set(derive_seed(cfg.run.seed, "synth.data"),
                                        n_per_class, len, dim, difficulty);
  save_features(ds, out_dir);
  if (export_csv_too)
    for (const auto& seq : ds.sequences)
      export_csv(seq, (fs::path(out_dir) / (seq.source_id + ".csv")).string());
  SynthResult res;
  res.out_dir = out_dir;
  res.count = ds.sequences.size();
  json m = base_manifest(cfg, "synth");
  m["kind"] = "features";
  m["n_per_class"] = n_per_class;
  m["L"] = len;
  m["D"] = dim;
  m["difficulty"] = difficulty == SynthDifficulty::easy ? "easy" : "hard";
  m["sequences"] = ds.sequences.size();
  res.manifest_path = (fs::path(out_dir) / "manifest.json").string();
  write_manifest(m, res.manifest_path);
  return res;
}

inline SynthResult run_synth_clips(const RunConfig& cfg, std::size_t count,
                                   const std::string& out_dir) {
  fs::create_directories(out_dir);
  auto clips = synth_pretrain_clips(derive_seed(cfg.run.seed, "synth.clips"),
                                    count, 16, 32, 32, 1);
  std::ostringstream labels;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    save_clip(clips[i],
              (fs::path(out_dir) / (clips[i].source_id + ".vclp")).string());
    labels << clips[i].source_id << '\t'
           << pain_class_name(i % kNumPainClasses) << '\n';
  }
  {
    std::ofstream out(fs::path(out_dir) / "labels.tsv");
    if (!out) throw IoError(out_dir + "/labels.tsv: cannot open for writing");
    out << labels.str();
  }
  SynthResult res;
  res.out_dir = out_dir;
  res.count = clips.size();
  json m = base_manifest(cfg, "synth");
  m["kind"] = "clips";
  m["clips"] = clips.size();
  res.manifest_path = (fs::path(out_dir) / "manifest.json").string();
  write_manifest(m, res.manifest_path);
  return res;
}

}  // namespace seqformer
