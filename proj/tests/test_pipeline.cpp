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
#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

#include "seqformer/pipeline.hpp"
#include "support/testutil.hpp"

using namespace seqformer;
using testutil::TempDir;

namespace {

RunConfig tiny_train_config() {
  RunConfig cfg;
  cfg.model.layers = 1;
  cfg.model.heads = 2;
  cfg.model.d_model = 8;
  cfg.model.ffn_dim = 16;
  cfg.model.seq_len = 16;
  cfg.run.epochs = 3;
  cfg.run.batch_size = 4;
  cfg.run.seed = 5;
  return cfg;
}

int run_cli(const std::string& args) {
  const std::string cmd =
      std::string(SEQFORMER_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("synth + train + eval round trip", "[pipeline]") {
  TempDir tmp;
  RunConfig cfg = tiny_train_config();
  const std::string data_dir = tmp.sub("features");
  run_synth_features(cfg, 4, 16, 4, SynthDifficulty::easy, data_dir);

  Dataset ds = load_features(data_dir);
  REQUIRE(ds.sequences.size() == 12);
  REQUIRE(ds.feature_dim == 4);

  const std::string train_dir = tmp.sub("train");
  TrainResult tr = run_train<double>(cfg, data_dir, train_dir);
  CHECK(std::filesystem::exists(tr.checkpoint_path));
  CHECK(std::filesystem::exists(tr.log_csv_path));
  CHECK(tr.epochs_run == 3);
  CHECK(tr.best_epoch >= 1);

  // The manifest echoes the run settings.
  json manifest = json::parse(testutil::read_file(tr.manifest_path));
  CHECK(manifest["command"] == "train");
  CHECK(manifest["L"] == 16);
  CHECK(manifest["layers"] == 1);
  CHECK(manifest["heads"] == 2);
  CHECK(manifest["ffn_dim"] == 16);
  CHECK(manifest["use_tape"] == true);
  CHECK(manifest["use_erpe"] == true);
  CHECK(manifest["config"]["optimizer.kind"] == "radam");
  CHECK(manifest["seed"] == 5);

  const std::string eval_dir = tmp.sub("eval");
  EvalResult ev = run_eval<double>(cfg, tr.checkpoint_path, data_dir, eval_dir);
  CHECK(std::filesystem::exists(ev.report_txt_path));
  CHECK(std::filesystem::exists(ev.report_json_path));
  CHECK(ev.report_text.find("NP") != std::string::npos);
  CHECK(ev.report_text.find("Accuracy") != std::string::npos);

  // JSON and text carry the same numbers: the text accuracy is the
  // truncated JSON raw accuracy.
  json rep = json::parse(testutil::read_file(ev.report_json_path));
  const double raw_acc = rep["accuracy"].get<double>();
  CHECK(ev.report_text.find("Accuracy    " + format_round2(raw_acc)) !=
        std::string::npos);
  CHECK(rep["per_class"].size() == 3);
  CHECK(rep["confusion"].size() == 3);

  // Voting aggregation also runs (one window per sequence here, so the
  // video-level totals match the sequence count).
  const std::string vote_dir = tmp.sub("eval_vote");
  EvalResult vote = run_eval<double>(cfg, tr.checkpoint_path, data_dir,
                                     vote_dir, true);
  REQUIRE(vote.video_summary.has_value());
  CHECK(vote.video_summary->total == 12);
}

TEST_CASE("train rejects unlabeled or missing data", "[pipeline]") {
  TempDir tmp;
  RunConfig cfg = tiny_train_config();
  const std::string dir = tmp.sub("unlabeled");
  Dataset ds = synth_classification_set(3, 2, 16, 4, SynthDifficulty::easy);
  for (auto& s : ds.sequences) s.label.reset();
  save_features(ds, dir);
  CHECK_THROWS_AS(run_train<double>(cfg, dir, tmp.sub("out")), ConfigError);
  std::filesystem::create_directories(tmp.sub("empty"));
  CHECK_THROWS_AS(run_train<double>(cfg, tmp.sub("empty"), tmp.sub("out2")),
                  ConfigError);
}

TEST_CASE("eval rejects a feature-dim mismatch", "[pipeline]") {
  TempDir tmp;
  RunConfig cfg = tiny_train_config();
  const std::string d4 = tmp.sub("d4");
  run_synth_features(cfg, 2, 16, 4, SynthDifficulty::easy, d4);
  TrainResult tr = run_train<double>(cfg, d4, tmp.sub("train"));
  const std::string d6 = tmp.sub("d6");
  run_synth_features(cfg, 2, 16, 6, SynthDifficulty::easy, d6);
  CHECK_THROWS_AS(
      run_eval<double>(cfg, tr.checkpoint_path, d6, tmp.sub("eval")),
      ConfigError);
}

TEST_CASE("pretrain writes a loss curve, checkpoint, and manifest",
          "[pipeline]") {
  TempDir tmp;
  RunConfig cfg;
  cfg.run.seed = 11;
  cfg.mae.steps = 12;
  PretrainResult res = run_pretrain<double>(cfg, tmp.sub("pre"));
  CHECK(std::filesystem::exists(res.checkpoint_path));
  const std::string csv = testutil::read_file(res.loss_csv_path);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);  // header + 12 steps
  CHECK(csv.rfind("step,loss\n", 0) == 0);
  json manifest = json::parse(testutil::read_file(res.manifest_path));
  CHECK(manifest["masking_ratio"] == 0.9);
  CHECK(manifest["steps"] == 12);
  CHECK(manifest["clips_source"] == "synthetic");

  // The checkpoint loads back into a usable model.
  auto model = load_mae_checkpoint<double>(res.checkpoint_path);
  CHECK(model.cfg.d_enc == cfg.mae.d_enc);
}

TEST_CASE("pretrain and train are bit-deterministic per seed", "[pipeline]") {
  TempDir tmp;
  RunConfig cfg;
  cfg.run.seed = 21;
  cfg.mae.steps = 10;
  PretrainResult a = run_pretrain<double>(cfg, tmp.sub("a"));
  PretrainResult b = run_pretrain<double>(cfg, tmp.sub("b"));
  CHECK(testutil::read_file(a.loss_csv_path) ==
        testutil::read_file(b.loss_csv_path));
  CHECK(testutil::read_file(a.checkpoint_path) ==
        testutil::read_file(b.checkpoint_path));

  RunConfig tcfg = tiny_train_config();
  const std::string data_dir = tmp.sub("features");
  run_synth_features(tcfg, 3, 16, 4, SynthDifficulty::easy, data_dir);
  TrainResult ta = run_train<double>(tcfg, data_dir, tmp.sub("ta"));
  TrainResult tb = run_train<double>(tcfg, data_dir, tmp.sub("tb"));
  CHECK(testutil::read_file(ta.log_csv_path) ==
        testutil::read_file(tb.log_csv_path));
  CHECK(testutil::read_file(ta.checkpoint_path) ==
        testutil::read_file(tb.checkpoint_path));

  // A different seed changes the trajectory.
  RunConfig other = tcfg;
  other.run.seed = 999;
  TrainResult tc = run_train<double>(other, data_dir, tmp.sub("tc"));
  CHECK(testutil::read_file(ta.log_csv_path) !=
        testutil::read_file(tc.log_csv_path));
}

TEST_CASE("extract produces FSEQ features with the encoder width",
          "[pipeline]") {
  TempDir tmp;
  RunConfig cfg;
  cfg.run.seed = 31;
  cfg.mae.steps = 6;
  PretrainResult pre = run_pretrain<double>(cfg, tmp.sub("pre"));
  ExtractResult ex = run_extract<double>(cfg, pre.checkpoint_path, "", 4,
                                         tmp.sub("features"));
  CHECK(ex.feature_dim == cfg.mae.d_enc);
  Dataset ds = load_features(ex.features_dir);
  REQUIRE(ds.sequences.size() == 4);
  CHECK(ds.feature_dim == cfg.mae.d_enc);
  // Synthetic clips carry labels through extraction.
  for (const auto& s : ds.sequences) CHECK(s.label.has_value());
  // 16 frames, window 16, t_patch 2: 8 rows per clip.
  CHECK(ds.sequences[0].rows == 8);

  ExtractResult again = run_extract<double>(cfg, pre.checkpoint_path, "", 4,
                                            tmp.sub("features2"));
  Dataset ds2 = load_features(again.features_dir);
  for (std::size_t i = 0; i < ds.sequences.size(); ++i)
    CHECK(ds.sequences[i].values == ds2.sequences[i].values);
}

TEST_CASE("clip container round trip", "[pipeline]") {
  TempDir tmp;
  auto clips = synth_pretrain_clips(7, 2, 4, 8, 8, 1);
  save_clip(clips[0], tmp.sub("c.vclp"));
  VideoClip back = load_clip(tmp.sub("c.vclp"));
  CHECK(back.frames == 4);
  CHECK(back.data == clips[0].data);
  {
    std::ofstream out(tmp.sub("bad.vclp"), std::ios::binary);
    out << "WRNG";
  }
  CHECK_THROWS_AS(load_clip(tmp.sub("bad.vclp")), IoError);
}

TEST_CASE("inspect-encodings dumps the table and index map", "[pipeline]") {
  TempDir tmp;
  RunConfig cfg;
  InspectResult res = run_inspect_encodings(cfg, 4, 8, tmp.str());
  const std::string table = testutil::read_file(res.table_csv_path);
  // Row 0 is sin0/cos0 interleaved.
  CHECK(table.rfind("0,1,0,1,0,1,0,1\n", 0) == 0);
  const std::string map = testutil::read_file(res.index_map_csv_path);
  // Diagonal of the index map is L = 4; first row starts at it.
  CHECK(map.rfind("4,3,2,1\n", 0) == 0);
  std::istringstream lines(map);
  std::string line;
  std::size_t row = 0;
  while (std::getline(lines, line)) {
    std::istringstream cells(line);
    std::string cell;
    std::size_t col = 0;
    while (std::getline(cells, cell, ',')) {
      if (row == col) CHECK(cell == "4");
      ++col;
    }
    ++row;
  }
  CHECK(row == 4);
}

TEST_CASE("the CLI maps errors to the exit-code contract", "[pipeline]") {
  TempDir tmp;
  // Usage errors.
  CHECK(run_cli("") == 2);
  CHECK(run_cli("eval --checkpoint " + tmp.sub("missing.bin") + " --features " +
                tmp.str() + " --out " + tmp.sub("o1")) == 2);
  CHECK(run_cli("inspect-encodings --L 4 --d-model 7 --out " + tmp.sub("o2")) ==
        2);
  // Config file errors carry exit code 2.
  {
    std::ofstream out(tmp.sub("bad.cfg"));
    out << "model.layers = 2\nbogus.key = 1\n";
  }
  CHECK(run_cli("--config " + tmp.sub("bad.cfg") + " synth --out " +
                tmp.sub("o3")) == 2);
  // Help exits 0.
  CHECK(run_cli("--help") == 0);
}

TEST_CASE("the CLI runs the full synthetic pipeline", "[pipeline]") {
  TempDir tmp;
  const std::string synth_dir = tmp.sub("features");
  CHECK(run_cli("--seed 3 synth --n-per-class 3 --L 16 --D 4 --out " +
                synth_dir) == 0);
  Dataset ds = load_features(synth_dir);
  CHECK(ds.sequences.size() == 9);

  {
    std::ofstream out(tmp.sub("tiny.cfg"));
    out << "model.layers = 1\nmodel.heads = 2\nmodel.d_model = 8\n"
        << "model.ffn_dim = 16\nrun.epochs = 2\nrun.batch_size = 4\n";
  }
  const std::string train_dir = tmp.sub("train");
  CHECK(run_cli("--config " + tmp.sub("tiny.cfg") + " --seed 3 train --features " +
                synth_dir + " --out " + train_dir) == 0);
  REQUIRE(std::filesystem::exists(train_dir + "/classifier_checkpoint.bin"));

  const std::string eval_dir = tmp.sub("eval");
  CHECK(run_cli("--config " + tmp.sub("tiny.cfg") + " --seed 3 eval --checkpoint " +
                train_dir + "/classifier_checkpoint.bin --features " + synth_dir +
                " --vote --out " + eval_dir) == 0);
  CHECK(std::filesystem::exists(eval_dir + "/report.json"));

  // Ablation flags land in the manifest.
  const std::string ablated_dir = tmp.sub("train_ablated");
  CHECK(run_cli("--config " + tmp.sub("tiny.cfg") + " --seed 3 train --features " +
                synth_dir + " --no-erpe --no-tape --out " + ablated_dir) == 0);
  json manifest =
      json::parse(testutil::read_file(ablated_dir + "/manifest.json"));
  CHECK(manifest["use_tape"] == false);
  CHECK(manifest["use_erpe"] == false);
}

TEST_CASE("worker thread cap honors the environment variable", "[pipeline]") {
  ::setenv("SEQFORMER_THREADS", "2", 1);
  CHECK(worker_thread_cap() == 2);
  ::setenv("SEQFORMER_THREADS", "garbage", 1);
  CHECK(worker_thread_cap() >= 1);
  ::unsetenv("SEQFORMER_THREADS");
  CHECK(worker_thread_cap() >= 1);
}
