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
#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "seqformer/pipeline.hpp"

namespace {

struct GlobalArgs {
  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool quiet = false;
};

seqformer::RunConfig load_config(const GlobalArgs& g) {
  seqformer::RunConfig cfg;
  if (!g.config_path.empty())
    cfg = seqformer::RunConfig::parse_file(g.config_path);
  if (g.seed_set) cfg.run.seed = g.seed;
  cfg.validate();
  return cfg;
}

void say(const GlobalArgs& g, const std::string& msg) {
  if (!g.quiet) std::cout << msg << '\n';
}

/// Commands run in double precision unless run.precision=single.
template <class Fn>
int with_precision(const seqformer::RunConfig& cfg, Fn&& fn) {
  if (cfg.run.precision == "single") return fn(float{});
  return fn(double{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"seqformer: masked-autoencoder features + convolutional "
               "transformer classifier for windowed time-series pain levels"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand

  GlobalArgs g;
  app.add_option("--config", g.config_path, "run config file (key=value)");
  app.add_option("--out", g.out_dir, "output directory");
  auto* seed_opt = app.add_option("--seed", g.seed, "master RNG seed");
  app.add_flag("--quiet", g.quiet, "suppress progress output");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "pretrain the masked autoencoder");
  bool pre_synth = false;
  std::string pre_clips;
  std::size_t pre_steps = 0;
  pre->add_flag("--synthetic", pre_synth, "use the synthetic clip corpus");
  pre->add_option("--clips", pre_clips, "directory of .vclp clips");
  pre->add_option("--steps", pre_steps, "override mae.steps");

  // extract
  auto* ext = app.add_subcommand("extract", "extract features with a trained autoencoder");
  std::string ext_ckpt, ext_clips;
  std::size_t ext_synth = 0;
  bool ext_csv = false;
  ext->add_option("--checkpoint", ext_ckpt, "autoencoder checkpoint")->required();
  ext->add_option("--clips", ext_clips, "directory of .vclp clips");
  ext->add_option("--synthetic", ext_synth, "use N synthetic clips instead");
  ext->add_flag("--export-csv", ext_csv, "also write features as CSV");

  // train
  auto* tr = app.add_subcommand("train", "train the classifier on FSEQ features");
  std::string tr_features;
  bool tr_no_erpe = false, tr_no_tape = false;
  std::size_t tr_epochs = 0;
  tr->add_option("--features", tr_features, "directory of .fseq files + labels.tsv")
      ->required();
  tr->add_flag("--no-erpe", tr_no_erpe, "disable relative position weights");
  tr->add_flag("--no-tape", tr_no_tape, "disable absolute position encoding");
  tr->add_option("--epochs", tr_epochs, "override run.epochs");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a classifier checkpoint");
  std::string ev_ckpt, ev_features;
  bool ev_vote = false, ev_weighted = false;
  ev->add_option("--checkpoint", ev_ckpt, "classifier checkpoint")->required();
  ev->add_option("--features", ev_features, "directory of labeled .fseq files")
      ->required();
  ev->add_flag("--vote", ev_vote, "aggregate window predictions per sequence");
  ev->add_flag("--weighted-avg", ev_weighted,
               "report support-weighted instead of macro averages");

  // inspect-encodings
  auto* ins = app.add_subcommand("inspect-encodings",
                                 "dump the position table and offset index map");
  std::size_t ins_len = 16, ins_d = 64;
  ins->add_option("--L", ins_len, "sequence length");
  ins->add_option("--d-model", ins_d, "embedding dimension (even)");

  // synth
  auto* sy = app.add_subcommand("synth", "generate synthetic datasets");
  std::size_t sy_n = 20, sy_len = 16, sy_dim = 8, sy_clips = 0;
  std::string sy_difficulty = "easy";
  bool sy_csv = false;
  sy->add_option("--n-per-class", sy_n, "sequences per class");
  sy->add_option("--L", sy_len, "sequence length");
  sy->add_option("--D", sy_dim, "feature channels");
  sy->add_option("--difficulty", sy_difficulty, "easy | hard");
  sy->add_option("--clips", sy_clips, "emit N .vclp clips instead of features");
  sy->add_flag("--export-csv", sy_csv, "also write features as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    g.seed_set = seed_opt->count() > 0;
    seqformer::RunConfig cfg = load_config(g);

    if (pre->parsed()) {
      if (!pre_synth && pre_clips.empty())
        throw seqformer::ConfigError(
            "pretrain: pass --synthetic or --clips DIR");
      return with_precision(cfg, [&](auto real) {
        using Real = decltype(real);
        auto res = seqformer::run_pretrain<Real>(cfg, g.out_dir, pre_clips,
                                                 pre_steps);
        say(g, "pretrain: loss " + seqformer::fmt_g17(res.initial_loss) +
                   " -> " + seqformer::fmt_g17(res.final_loss));
        say(g, "checkpoint: " + res.checkpoint_path);
        return 0;
      });
    }
    if (ext->parsed()) {
      if (ext_clips.empty() && ext_synth == 0)
        throw seqformer::ConfigError("extract: pass --clips DIR or --synthetic N");
      return with_precision(cfg, [&](auto real) {
        using Real = decltype(real);
        auto res = seqformer::run_extract<Real>(cfg, ext_ckpt, ext_clips,
                                                ext_synth, g.out_dir, ext_csv);
        say(g, "extract: " + std::to_string(res.clip_count) + " clips -> " +
                   res.features_dir);
        return 0;
      });
    }
    if (tr->parsed()) {
      if (tr_no_erpe) cfg.model.use_erpe = false;
      if (tr_no_tape) cfg.model.use_tape = false;
      if (tr_epochs) cfg.run.epochs = tr_epochs;
      return with_precision(cfg, [&](auto real) {
        using Real = decltype(real);
        auto res = seqformer::run_train<Real>(cfg, tr_features, g.out_dir);
        say(g, "train: best val accuracy " +
                   seqformer::fmt_g17(res.best_val_accuracy) + " at epoch " +
                   std::to_string(res.best_epoch));
        say(g, "checkpoint: " + res.checkpoint_path);
        return 0;
      });
    }
    if (ev->parsed()) {
      return with_precision(cfg, [&](auto real) {
        using Real = decltype(real);
        auto res = seqformer::run_eval<Real>(cfg, ev_ckpt, ev_features,
                                             g.out_dir, ev_vote, ev_weighted);
        if (!g.quiet) std::cout << res.report_text;
        return 0;
      });
    }
    if (ins->parsed()) {
      auto res = seqformer::run_inspect_encodings(cfg, ins_len, ins_d, g.out_dir);
      say(g, "wrote " + res.table_csv_path + " and " + res.index_map_csv_path);
      return 0;
    }
    if (sy->parsed()) {
      if (sy_clips > 0) {
        auto res = seqformer::run_synth_clips(cfg, sy_clips, g.out_dir);
        say(g, "wrote " + std::to_string(res.count) + " clips to " + res.out_dir);
      } else {
        auto res = seqformer::run_synth_features(
            cfg, sy_n, sy_len, sy_dim, seqformer::parse_difficulty(sy_difficulty),
            g.out_dir, sy_csv);
        say(g, "wrote " + std::to_string(res.count) + " sequences to " +
                   res.out_dir);
      }
      return 0;
    }
    return 2;
  } catch (const seqformer::NonFiniteError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const seqformer::ConfigError& e) {
    if (e.line > 0)
      std::cerr << "config error (line " << e.line << "): " << e.what() << '\n';
    else
      std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const seqformer::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
