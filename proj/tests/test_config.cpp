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

#include "seqformer/config.hpp"

using namespace seqformer;

TEST_CASE("defaults mirror the reference training setup", "[config]") {
  RunConfig cfg;
  CHECK(cfg.model.layers == 8);
  CHECK(cfg.model.heads == 8);
  CHECK(cfg.model.ffn_dim == 256);
  CHECK(cfg.model.seq_len == 16);
  CHECK(cfg.model.skip);
  CHECK(cfg.optimizer.kind == "radam");
  CHECK(cfg.optimizer.lr == 1e-3);
  CHECK(cfg.optimizer.schedule == "cosine");
  CHECK(cfg.mae.kind == "adamw");
  CHECK(cfg.mae.lr == 1.5e-4);
  CHECK(cfg.mae.beta1 == 0.9);
  CHECK(cfg.mae.beta2 == 0.95);
  CHECK(cfg.mae.ratio == 0.9);
  CHECK(cfg.run.precision == "double");
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("parsing handles comments, blanks, and spacing", "[config]") {
  const std::string text =
      "# a comment line\n"
      "\n"
      "model.layers = 4   # trailing comment\n"
      "model.d_model=32\n"
      "  run.seed =  7\n"
      "optimizer.lr = 5e-4\n"
      "model.skip = off\n";
  RunConfig cfg = RunConfig::parse_text(text);
  CHECK(cfg.model.layers == 4);
  CHECK(cfg.model.d_model == 32);
  CHECK(cfg.run.seed == 7);
  CHECK(cfg.optimizer.lr == 5e-4);
  CHECK_FALSE(cfg.model.skip);
}

TEST_CASE("unknown keys are rejected with the line number", "[config]") {
  const std::string text = "model.layers = 4\nmodel.depth = 3\n";
  try {
    RunConfig::parse_text(text);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.line == 2);
    CHECK(std::string(e.what()).find("model.depth") != std::string::npos);
  }
}

TEST_CASE("malformed values are rejected with the line number", "[config]") {
  try {
    RunConfig::parse_text("run.epochs = soon\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.line == 1);
  }
  CHECK_THROWS_AS(RunConfig::parse_text("just a line\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse_text("= 3\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse_text("model.skip = maybe\n"), ConfigError);
}

TEST_CASE("validation rejects inconsistent settings", "[config]") {
  CHECK_THROWS_AS(RunConfig::parse_text("model.d_model = 30\nmodel.heads = 8\n"),
                  ConfigError);
  CHECK_THROWS_AS(RunConfig::parse_text("optimizer.kind = sgd\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse_text("mae.ratio = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse_text("data.tail_policy = wrap\n"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse_text("run.precision = half\n"), ConfigError);
}

TEST_CASE("later assignments win", "[config]") {
  RunConfig cfg = RunConfig::parse_text("run.seed = 1\nrun.seed = 2\n");
  CHECK(cfg.run.seed == 2);
}

TEST_CASE("key_values covers every settable key", "[config]") {
  RunConfig cfg;
  const auto kv = cfg.key_values();
  RunConfig other;
  // Every advertised key must round-trip through set() unchanged.
  for (const auto& [k, v] : kv) CHECK_NOTHROW(other.set(k, v, 1));
  CHECK(other.config_hash() == cfg.config_hash());
}

TEST_CASE("config hash tracks value changes", "[config]") {
  RunConfig a;
  RunConfig b;
  CHECK(a.config_hash() == b.config_hash());
  b.run.seed = 999;
  CHECK(a.config_hash() != b.config_hash());
}
