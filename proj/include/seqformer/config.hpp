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

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "seqformer/error.hpp"
#include "seqformer/rng.hpp"

namespace seqformer {

/// Flat key=value run configuration ('#' starts a comment, blank lines are
/// skipped, unknown keys are rejected). Defaults follow the reference
/// training setup wherever it pins a value; everything else is a
/// desk-scale default documented in the README.
struct RunConfig {
  struct Model {
    std::size_t layers = 8;
    std::size_t heads = 8;
    std::size_t d_model = 64;
    std::size_t ffn_dim = 256;
    std::size_t seq_len = 16;  // model.L
    std::size_t conv_kernel = 3;
    std::size_t num_classes = 3;
    double dropout = 0.0;
    bool skip = true;      // extra identity path per layer
    bool use_tape = true;  // absolute position encoding
    bool use_erpe = true;  // relative position weights
  } model;

  struct Optimizer {
    std::string kind = "radam";  // classifier stage
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    double eps = 1e-8;
    std::string schedule = "cosine";  // cosine | constant
    std::size_t total_steps = 0;      // 0 = derived from epochs * batches
    std::size_t warmup = 0;
    double min_lr = 0.0;
    double clip_norm = 0.0;  // 0 = off
  } optimizer;

  struct Mae {
    double ratio = 0.9;
    std::size_t t_patch = 2;
    std::size_t s_patch = 8;
    std::size_t d_enc = 32;
    std::size_t enc_layers = 2;
    std::size_t dec_layers = 1;
    std::size_t heads = 4;
    std::size_t ffn_dim = 64;
    std::string loss = "l2";     // l2 | mse
    std::string kind = "adamw";  // pretraining optimizer
    double lr = 1.5e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.05;
    double eps = 1e-8;
    std::size_t steps = 300;
    std::size_t warmup = 0;
    std::string schedule = "cosine";
  } mae;

  struct Data {
    std::string train_path;
    std::string val_path;
    std::size_t stride = 0;  // 0 = window length
    std::string tail_policy = "drop";  // drop | pad_repeat_last
  } data;

  struct Run {
    std::uint64_t seed = 42;
    std::size_t epochs = 200;
    std::size_t batch_size = 8;
    std::string precision = "double";  // double | single
  } run;

  void set(const std::string& key, const std::string& value, int line);
  void validate() const;

  /// Every effective key=value pair, sorted by key; the manifest and the
  /// config hash both come from this.
  std::vector<std::pair<std::string, std::string>> key_values() const;
  std::string config_hash() const;

  static RunConfig parse_file(const std::string& path);
  static RunConfig parse_text(const std::string& text,
                              const std::string& origin = "<config>");
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key, int line) {
  if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
  if (v == "off" || v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected a boolean (on/off), got \"" + v + "\"", line);
}

inline std::size_t parse_size(const std::string& v, const std::string& key,
                              int line) {
  try {
    std::size_t pos;
    const unsigned long long out = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(out);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got \"" + v + "\"",
                      line);
  }
}

inline std::uint64_t parse_u64(const std::string& v, const std::string& key,
                               int line) {
  try {
    std::size_t pos;
    const unsigned long long out = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<std::uint64_t>(out);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an unsigned integer, got \"" + v + "\"",
                      line);
  }
}

inline double parse_real(const std::string& v, const std::string& key, int line) {
  try {
    std::size_t pos;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got \"" + v + "\"", line);
  }
}

inline std::string fmt_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string fmt_bool(bool v) { return v ? "on" : "off"; }

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value,
                           int line) {
  using detail::parse_bool;
  using detail::parse_real;
  using detail::parse_size;
  using detail::parse_u64;
  if (key == "model.layers") model.layers = parse_size(value, key, line);
  else if (key == "model.heads") model.heads = parse_size(value, key, line);
  else if (key == "model.d_model") model.d_model = parse_size(value, key, line);
  else if (key == "model.ffn_dim") model.ffn_dim = parse_size(value, key, line);
  else if (key == "model.L") model.seq_len = parse_size(value, key, line);
  else if (key == "model.conv_kernel") model.conv_kernel = parse_size(value, key, line);
  else if (key == "model.num_classes") model.num_classes = parse_size(value, key, line);
  else if (key == "model.dropout") model.dropout = parse_real(value, key, line);
  else if (key == "model.skip") model.skip = parse_bool(value, key, line);
  else if (key == "model.use_tape") model.use_tape = parse_bool(value, key, line);
  else if (key == "model.use_erpe") model.use_erpe = parse_bool(value, key, line);
  else if (key == "optimizer.kind") optimizer.kind = value;
  else if (key == "optimizer.lr") optimizer.lr = parse_real(value, key, line);
  else if (key == "optimizer.beta1") optimizer.beta1 = parse_real(value, key, line);
  else if (key == "optimizer.beta2") optimizer.beta2 = parse_real(value, key, line);
  else if (key == "optimizer.weight_decay") optimizer.weight_decay = parse_real(value, key, line);
  else if (key == "optimizer.eps") optimizer.eps = parse_real(value, key, line);
  else if (key == "optimizer.schedule") optimizer.schedule = value;
  else if (key == "optimizer.total_steps") optimizer.total_steps = parse_size(value, key, line);
  else if (key == "optimizer.warmup") optimizer.warmup = parse_size(value, key, line);
  else if (key == "optimizer.min_lr") optimizer.min_lr = parse_real(value, key, line);
  else if (key == "optimizer.clip_norm") optimizer.clip_norm = parse_real(value, key, line);
  else if (key == "mae.ratio") mae.ratio = parse_real(value, key, line);
  else if (key == "mae.t_patch") mae.t_patch = parse_size(value, key, line);
  else if (key == "mae.s_patch") mae.s_patch = parse_size(value, key, line);
  else if (key == "mae.d_enc") mae.d_enc = parse_size(value, key, line);
  else if (key == "mae.enc_layers") mae.enc_layers = parse_size(value, key, line);
  else if (key == "mae.dec_layers") mae.dec_layers = parse_size(value, key, line);
  else if (key == "mae.heads") mae.heads = parse_size(value, key, line);
  else if (key == "mae.ffn_dim") mae.ffn_dim = parse_size(value, key, line);
  else if (key == "mae.loss") mae.loss = value;
  else if (key == "mae.kind") mae.kind = value;
  else if (key == "mae.lr") mae.lr = parse_real(value, key, line);
  else if (key == "mae.beta1") mae.beta1 = parse_real(value, key, line);
  else if (key == "mae.beta2") mae.beta2 = parse_real(value, key, line);
  else if (key == "mae.weight_decay") mae.weight_decay = parse_real(value, key, line);
  else if (key == "mae.eps") mae.eps = parse_real(value, key, line);
  else if (key == "mae.steps") mae.steps = parse_size(value, key, line);
  else if (key == "mae.warmup") mae.warmup = parse_size(value, key, line);
  else if (key == "mae.schedule") mae.schedule = value;
  else if (key == "data.train_path") data.train_path = value;
  else if (key == "data.val_path") data.val_path = value;
  else if (key == "data.stride") data.stride = parse_size(value, key, line);
  else if (key == "data.tail_policy") data.tail_policy = value;
  else if (key == "run.seed") run.seed = parse_u64(value, key, line);
  else if (key == "run.epochs") run.epochs = parse_size(value, key, line);
  else if (key == "run.batch_size") run.batch_size = parse_size(value, key, line);
  else if (key == "run.precision") run.precision = value;
  else throw ConfigError("unknown config key \"" + key + "\"", line);
}

inline void RunConfig::validate() const {
  auto want = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  want(model.layers > 0 && model.heads > 0 && model.d_model > 0 &&
           model.ffn_dim > 0 && model.seq_len > 0 && model.conv_kernel > 0 &&
           model.num_classes > 0,
       "model: structural fields must be positive");
  want(model.d_model % model.heads == 0, "model.d_model must be divisible by model.heads");
  want(model.d_model % 2 == 0, "model.d_model must be even");
  want(model.dropout >= 0.0 && model.dropout < 1.0, "model.dropout must lie in [0, 1)");
  auto check_kind = [&](const std::string& k, const std::string& key) {
    want(k == "adamw" || k == "adam" || k == "radam",
         key + ": unknown optimizer kind \"" + k + "\"");
  };
  check_kind(optimizer.kind, "optimizer.kind");
  check_kind(mae.kind, "mae.kind");
  auto check_sched = [&](const std::string& s, const std::string& key) {
    want(s == "cosine" || s == "constant", key + ": unknown schedule \"" + s + "\"");
  };
  check_sched(optimizer.schedule, "optimizer.schedule");
  check_sched(mae.schedule, "mae.schedule");
  want(optimizer.lr > 0 && mae.lr > 0, "learning rates must be positive");
  want(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 &&
           optimizer.beta2 < 1 && mae.beta1 >= 0 && mae.beta1 < 1 &&
           mae.beta2 >= 0 && mae.beta2 < 1,
       "betas must lie in [0, 1)");
  want(mae.ratio > 0.0 && mae.ratio < 1.0, "mae.ratio must lie strictly between 0 and 1");
  want(mae.loss == "l2" || mae.loss == "mse", "mae.loss must be l2 or mse");
  want(data.tail_policy == "drop" || data.tail_policy == "pad_repeat_last",
       "data.tail_policy must be drop or pad_repeat_last");
  want(run.precision == "double" || run.precision == "single",
       "run.precision must be double or single");
  want(run.batch_size > 0, "run.batch_size must be positive");
  want(run.epochs > 0, "run.epochs must be positive");
}

inline std::vector<std::pair<std::string, std::string>> RunConfig::key_values()
    const {
  using detail::fmt_bool;
  using detail::fmt_real;
  std::vector<std::pair<std::string, std::string>> kv = {
      {"model.layers", std::to_string(model.layers)},
      {"model.heads", std::to_string(model.heads)},
      {"model.d_model", std::to_string(model.d_model)},
      {"model.ffn_dim", std::to_string(model.ffn_dim)},
      {"model.L", std::to_string(model.seq_len)},
      {"model.conv_kernel", std::to_string(model.conv_kernel)},
      {"model.num_classes", std::to_string(model.num_classes)},
      {"model.dropout", fmt_real(model.dropout)},
      {"model.skip", fmt_bool(model.skip)},
      {"model.use_tape", fmt_bool(model.use_tape)},
      {"model.use_erpe", fmt_bool(model.use_erpe)},
      {"optimizer.kind", optimizer.kind},
      {"optimizer.lr", fmt_real(optimizer.lr)},
      {"optimizer.beta1", fmt_real(optimizer.beta1)},
      {"optimizer.beta2", fmt_real(optimizer.beta2)},
      {"optimizer.weight_decay", fmt_real(optimizer.weight_decay)},
      {"optimizer.eps", fmt_real(optimizer.eps)},
      {"optimizer.schedule", optimizer.schedule},
      {"optimizer.total_steps", std::to_string(optimizer.total_steps)},
      {"optimizer.warmup", std::to_string(optimizer.warmup)},
      {"optimizer.min_lr", fmt_real(optimizer.min_lr)},
      {"optimizer.clip_norm", fmt_real(optimizer.clip_norm)},
      {"mae.ratio", fmt_real(mae.ratio)},
      {"mae.t_patch", std::to_string(mae.t_patch)},
      {"mae.s_patch", std::to_string(mae.s_patch)},
      {"mae.d_enc", std::to_string(mae.d_enc)},
      {"mae.enc_layers", std::to_string(mae.enc_layers)},
      {"mae.dec_layers", std::to_string(mae.dec_layers)},
      {"mae.heads", std::to_string(mae.heads)},
      {"mae.ffn_dim", std::to_string(mae.ffn_dim)},
      {"mae.loss", mae.loss},
      {"mae.kind", mae.kind},
      {"mae.lr", fmt_real(mae.lr)},
      {"mae.beta1", fmt_real(mae.beta1)},
      {"mae.beta2", fmt_real(mae.beta2)},
      {"mae.weight_decay", fmt_real(mae.weight_decay)},
      {"mae.eps", fmt_real(mae.eps)},
      {"mae.steps", std::to_string(mae.steps)},
      {"mae.warmup", std::to_string(mae.warmup)},
      {"mae.schedule", mae.schedule},
      {"data.train_path", data.train_path},
      {"data.val_path", data.val_path},
      {"data.stride", std::to_string(data.stride)},
      {"data.tail_policy", data.tail_policy},
      {"run.seed", std::to_string(run.seed)},
      {"run.epochs", std::to_string(run.epochs)},
      {"run.batch_size", std::to_string(run.batch_size)},
      {"run.precision", run.precision},
  };
  return kv;
}

inline std::string RunConfig::config_hash() const {
  std::ostringstream os;
  for (const auto& [k, v] : key_values()) os << k << '=' << v << '\n';
  const std::uint64_t h = fnv1a64(os.str());
  std::ostringstream hex;
  hex << std::hex << h;
  return hex.str();
}

inline RunConfig RunConfig::parse_text(const std::string& text,
                                       const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ": expected key=value", line_no);
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(origin + ": empty key", line_no);
    cfg.set(key, value, line_no);
  }
  cfg.validate();
  return cfg;
}

inline RunConfig RunConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str(), path);
}

}  // namespace seqformer
