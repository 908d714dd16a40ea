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

#include <cmath>

#include "seqformer/mae.hpp"
#include "support/testutil.hpp"

using namespace seqformer;
using testutil::max_grad_rel_err;
using DT = Tensor<double>;

namespace {

VideoClip random_clip(std::size_t t, std::size_t h, std::size_t w,
                      std::size_t c, Rng& rng) {
  VideoClip clip;
  clip.frames = t;
  clip.height = h;
  clip.width = w;
  clip.channels = c;
  clip.data.resize(t * h * w * c);
  for (auto& v : clip.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return clip;
}

MAEConfig tiny_mae_config() {
  MAEConfig c;
  c.t_patch = 1;
  c.s_patch = 2;
  c.channels = 1;
  c.d_enc = 6;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.num_heads = 2;
  c.ffn_dim = 8;
  return c;
}

}  // namespace

TEST_CASE("tubelet tokenization geometry", "[mae]") {
  SECTION("degenerate single token holds the whole clip") {
    Rng rng(1);
    VideoClip clip = random_clip(2, 4, 4, 1, rng);
    DT tokens = tubelet_tokenize<double>(clip, 2, 4);
    REQUIRE(tokens.shape() == Shape{1, 32});
    for (std::size_t i = 0; i < 32; ++i)
      CHECK(tokens.at(i) == static_cast<double>(clip.data[i]));
  }
  SECTION("token count and dim follow the grid arithmetic") {
    Rng rng(2);
    VideoClip clip = random_clip(4, 8, 8, 1, rng);
    DT tokens = tubelet_tokenize<double>(clip, 2, 4);
    // (4/2) * (8/4) * (8/4) = 8 tokens of 2*4*4*1 = 32 values.
    REQUIRE(tokens.shape() == Shape{8, 32});
  }
  SECTION("raster order is time-major, then row, then column") {
    // One frame, 4x4, 2x2 patches: token 1 must be the top-right block.
    VideoClip clip;
    clip.frames = 1;
    clip.height = 4;
    clip.width = 4;
    clip.channels = 1;
    clip.data.resize(16);
    for (std::size_t i = 0; i < 16; ++i) clip.data[i] = static_cast<float>(i);
    DT tokens = tubelet_tokenize<double>(clip, 1, 2);
    REQUIRE(tokens.shape() == Shape{4, 4});
    CHECK(tokens.at(1, 0) == 2.0);
    CHECK(tokens.at(1, 1) == 3.0);
    CHECK(tokens.at(1, 2) == 6.0);
    CHECK(tokens.at(1, 3) == 7.0);
  }
  SECTION("round trip reproduces the clip exactly") {
    Rng rng(3);
    VideoClip clip = random_clip(4, 8, 8, 2, rng);
    DT tokens = tubelet_tokenize<double>(clip, 2, 4);
    VideoClip back = tubelet_untokenize(tokens, 4, 8, 8, 2, 2, 4);
    CHECK(back.data == clip.data);
  }
  SECTION("divisibility violations name the offending dimension") {
    Rng rng(4);
    VideoClip clip = random_clip(3, 8, 8, 1, rng);
    CHECK_THROWS_MATCHES(tubelet_tokenize<double>(clip, 2, 4), ValueError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("time")));
    VideoClip clip2 = random_clip(4, 6, 8, 1, rng);
    CHECK_THROWS_MATCHES(tubelet_tokenize<double>(clip2, 2, 4), ValueError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("height")));
  }
}

TEST_CASE("sample_mask fixtures", "[mae]") {
  SECTION("ratio 0.9 over 10 tokens masks exactly 9") {
    MaskSpec m = sample_mask(10, 0.9, 7);
    CHECK(m.masked.size() == 9);
    CHECK(m.visible.size() == 1);
  }
  SECTION("same seed gives the same mask") {
    MaskSpec a = sample_mask(100, 0.9, 1234);
    MaskSpec b = sample_mask(100, 0.9, 1234);
    CHECK(a.masked == b.masked);
    CHECK(a.visible == b.visible);
    MaskSpec c = sample_mask(100, 0.9, 1235);
    CHECK(a.masked != c.masked);
  }
  SECTION("partition invariants hold across many seeds") {
    Rng rng(99);
    for (int rep = 0; rep < 1000; ++rep) {
      const std::size_t n = 2 + rng.index(199);
      const double ratio = 0.05 + 0.9 * rng.uniform();
      const std::size_t count = static_cast<std::size_t>(
          std::llround(ratio * static_cast<double>(n)));
      if (count == 0 || count == n) continue;
      MaskSpec m = sample_mask(n, ratio, rng.next_u64());
      CHECK(m.masked.size() + m.visible.size() == n);
      std::vector<char> seen(n, 0);
      for (std::size_t idx : m.masked) seen[idx] += 1;
      for (std::size_t idx : m.visible) seen[idx] += 1;
      for (char s : seen) CHECK(s == 1);  // disjoint union covers all tokens
    }
  }
  SECTION("masked count equals round(0.9 n) for every n in [2, 1000]") {
    for (std::size_t n = 2; n <= 1000; ++n) {
      const std::size_t expect = (9 * n + 5) / 10;  // integer half-up oracle
      MaskSpec m = sample_mask(n, 0.9, 42);
      CHECK(m.masked.size() == expect);
    }
  }
  SECTION("degenerate partitions are rejected") {
    CHECK_THROWS_AS(sample_mask(1, 0.9, 0), ValueError);
    CHECK_THROWS_AS(sample_mask(10, 0.01, 0), ValueError);
    CHECK_THROWS_AS(sample_mask(10, 0.99, 0), ValueError);
    CHECK_THROWS_AS(sample_mask(10, 0.0, 0), ValueError);
    CHECK_THROWS_AS(sample_mask(10, 1.0, 0), ValueError);
  }
}

TEST_CASE("mae_forward shape contract", "[mae]") {
  MAEConfig cfg = tiny_mae_config();
  auto model = MAEModel<double>::init(cfg, 5);
  Rng rng(6);
  VideoClip clip = random_clip(2, 4, 4, 1, rng);
  DT tokens = tubelet_tokenize<double>(clip, cfg.t_patch, cfg.s_patch);
  REQUIRE(tokens.extent(0) == 8);
  MaskSpec mask = sample_mask(8, 0.75, 11);
  DT pred = mae_forward(model, tokens, mask, 4);
  CHECK(pred.shape() == Shape{mask.masked.size(), cfg.token_dim()});

  MaskSpec wrong = sample_mask(6, 0.5, 11);
  CHECK_THROWS_AS(mae_forward(model, tokens, wrong, 4), ShapeError);
}

TEST_CASE("encoder ignores values at masked positions", "[mae]") {
  MAEConfig cfg = tiny_mae_config();
  auto model = MAEModel<double>::init(cfg, 7);
  Rng rng(8);
  VideoClip clip = random_clip(2, 4, 4, 1, rng);
  DT tokens = tubelet_tokenize<double>(clip, cfg.t_patch, cfg.s_patch);
  MaskSpec mask = sample_mask(tokens.extent(0), 0.75, 13);

  DT enc_a =
      mae_encode(model, select_rows(tokens, mask.visible), mask.visible, 4);
  DT pred_a = mae_forward(model, tokens, mask, 4);

  // Perturb the raw values at every masked position.
  std::vector<double> perturbed = tokens.values();
  for (std::size_t idx : mask.masked)
    for (std::size_t j = 0; j < cfg.token_dim(); ++j)
      perturbed[idx * cfg.token_dim() + j] += rng.uniform(1.0, 2.0);
  DT tokens_b = DT::constant(tokens.shape(), perturbed);
  DT enc_b =
      mae_encode(model, select_rows(tokens_b, mask.visible), mask.visible, 4);
  DT pred_b = mae_forward(model, tokens_b, mask, 4);

  for (std::size_t i = 0; i < enc_a.numel(); ++i)
    CHECK(std::abs(enc_a.at(i) - enc_b.at(i)) <= 1e-12);
  for (std::size_t i = 0; i < pred_a.numel(); ++i)
    CHECK(std::abs(pred_a.at(i) - pred_b.at(i)) <= 1e-12);
}

TEST_CASE("reconstruction_loss fixtures", "[mae]") {
  SECTION("identical inputs give zero") {
    DT x = DT::constant({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(reconstruction_loss(x, x).at(0) == 0.0);
  }
  SECTION("single token 3-4-5 norm") {
    DT target = DT::constant({1, 2}, {3.0, 4.0});
    DT pred = DT::zeros({1, 2});
    CHECK(reconstruction_loss(target, pred).at(0) ==
          Catch::Approx(5.0).margin(1e-12));
  }
  SECTION("mean over tokens of per-token norms") {
    DT target = DT::constant({2, 2}, {3.0, 4.0, 1.0, 1.0});
    DT pred = DT::constant({2, 2}, {0.0, 0.0, 1.0, 1.0});
    // Norms are 5 and 0, so the loss is 2.5.
    CHECK(reconstruction_loss(target, pred).at(0) ==
          Catch::Approx(2.5).margin(1e-12));
  }
  SECTION("mse variant uses squared norms") {
    DT target = DT::constant({1, 2}, {3.0, 4.0});
    DT pred = DT::zeros({1, 2});
    CHECK(reconstruction_loss(target, pred, MAEConfig::ReconLoss::mse).at(0) ==
          Catch::Approx(25.0).margin(1e-12));
  }
  SECTION("shape mismatch is rejected") {
    DT a = DT::zeros({2, 3});
    DT b = DT::zeros({3, 2});
    CHECK_THROWS_AS(reconstruction_loss(a, b), ShapeError);
  }
  SECTION("permuting tokens jointly leaves the loss unchanged") {
    Rng rng(21);
    DT target = testutil::random_tensor({5, 4}, rng);
    DT pred = testutil::random_tensor({5, 4}, rng);
    const double base = reconstruction_loss(target, pred).at(0);
    std::vector<std::size_t> perm = {4, 0, 3, 1, 2};
    const double permuted =
        reconstruction_loss(select_rows(target, perm), select_rows(pred, perm))
            .at(0);
    CHECK(permuted == base);
  }
  SECTION("zero-difference tokens use subgradient zero") {
    DT target = DT::constant({2, 2}, {1.0, 1.0, 3.0, 4.0});
    DT pred = DT::parameter({2, 2}, {1.0, 1.0, 0.0, 0.0});
    Tape<double> tape;
    backward(reconstruction_loss(target, pred));
    CHECK(pred.grad()[0] == 0.0);
    CHECK(pred.grad()[1] == 0.0);
    CHECK(pred.grad()[2] != 0.0);
  }
}

TEST_CASE("reconstruction_loss gradients match finite differences", "[mae]") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 13);
    DT target = testutil::random_tensor({3, 4}, rng);
    DT pred = testutil::random_tensor({3, 4}, rng, -2, 2, true);
    for (auto kind : {MAEConfig::ReconLoss::l2_norm, MAEConfig::ReconLoss::mse}) {
      auto build = [&] { return reconstruction_loss(target, pred, kind); };
      CHECK(max_grad_rel_err(build, {pred}, rng) < 1e-4);
    }
  }
}

TEST_CASE("gradients flow to encoder, decoder and mask token", "[mae]") {
  MAEConfig cfg = tiny_mae_config();
  for (std::uint64_t seed = 1; seed <= 2; ++seed) {
    auto model = MAEModel<double>::init(cfg, seed * 17);
    Rng rng(seed * 19);
    VideoClip clip = random_clip(2, 4, 4, 1, rng);
    DT tokens = tubelet_tokenize<double>(clip, cfg.t_patch, cfg.s_patch);
    MaskSpec mask = sample_mask(tokens.extent(0), 0.75, seed);
    auto params = model.parameters();
    auto build = [&] {
      DT pred = mae_forward(model, tokens, mask, 4);
      DT target = select_rows(tokens, mask.masked);
      return reconstruction_loss(target, pred);
    };
    CHECK(max_grad_rel_err(build, params, rng, 1e-5, 3) < 1e-4);
    // Explicitly confirm the mask token received gradient.
    CHECK(model.mask_token.has_grad());
    bool nonzero = false;
    for (double g : model.mask_token.grad()) nonzero |= g != 0.0;
    CHECK(nonzero);
  }
}

TEST_CASE("extract_features shape, determinism, and symmetry", "[mae]") {
  MAEConfig cfg;
  cfg.t_patch = 2;
  cfg.s_patch = 4;
  cfg.channels = 1;
  cfg.d_enc = 8;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.num_heads = 2;
  cfg.ffn_dim = 8;
  auto model = MAEModel<double>::init(cfg, 23);

  SECTION("row dim equals d_enc and rows follow the window grid") {
    Rng rng(29);
    VideoClip clip = random_clip(16, 8, 8, 1, rng);
    auto rows = extract_feature_rows(model, clip, 8, 8, false);
    // Two windows of 8 frames, each 8/2 = 4 temporal slices.
    REQUIRE(rows.size() == 8);
    for (const auto& r : rows) CHECK(r.size() == 8);
  }
  SECTION("identical clips give identical features") {
    Rng rng(31);
    VideoClip clip = random_clip(8, 8, 8, 1, rng);
    auto a = extract_feature_rows(model, clip, 8, 8, false);
    auto b = extract_feature_rows(model, clip, 8, 8, false);
    CHECK(a == b);
  }
  SECTION("a constant clip yields constant feature rows") {
    VideoClip clip;
    clip.frames = 8;
    clip.height = 8;
    clip.width = 8;
    clip.channels = 1;
    clip.data.assign(8 * 8 * 8, 0.37f);
    auto rows = extract_feature_rows(model, clip, 8, 8, false);
    REQUIRE(rows.size() == 4);
    for (std::size_t r = 1; r < rows.size(); ++r)
      for (std::size_t j = 0; j < rows[0].size(); ++j)
        CHECK(std::abs(rows[r][j] - rows[0][j]) <= 1e-9);
  }
  SECTION("dropped vs padded tails") {
    Rng rng(37);
    VideoClip clip = random_clip(12, 8, 8, 1, rng);
    CHECK(extract_feature_rows(model, clip, 8, 8, false).size() == 4);
    CHECK(extract_feature_rows(model, clip, 8, 8, true).size() == 8);
  }
}

TEST_CASE("mae checkpoint round trip", "[mae]") {
  testutil::TempDir tmp;
  MAEConfig cfg = tiny_mae_config();
  cfg.loss_kind = MAEConfig::ReconLoss::mse;
  auto model = MAEModel<double>::init(cfg, 41);
  const std::string path = tmp.sub("mae.bin");
  save_checkpoint(model, path);
  auto loaded = load_mae_checkpoint<double>(path);
  CHECK(loaded.cfg.d_enc == cfg.d_enc);
  CHECK(loaded.cfg.loss_kind == MAEConfig::ReconLoss::mse);
  const auto a = model.parameters();
  const auto b = loaded.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].values() == b[i].values());

  {
    std::ofstream out(tmp.sub("junk.bin"), std::ios::binary);
    out << "NOPE";
  }
  CHECK_THROWS_AS(load_mae_checkpoint<double>(tmp.sub("junk.bin")), IoError);
}
