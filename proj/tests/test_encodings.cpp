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
#include <set>

#include "seqformer/encodings.hpp"
#include "support/testutil.hpp"

using namespace seqformer;
using testutil::max_grad_rel_err;
using testutil::random_tensor;
using DT = Tensor<double>;

namespace {

/// Literal double-loop reference: out_i = sum_j (A_ij + w[i-j+L]) v_j with
/// A the row-softmax of the scaled dot products. 1-based w indexing.
std::vector<double> erpe_reference(const DT& q, const DT& k, const DT& v,
                                   const DT& w) {
  const std::size_t L = q.extent(0), dh = q.extent(1), dv = v.extent(1);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> out(L * dv, 0.0);
  for (std::size_t i = 1; i <= L; ++i) {
    std::vector<double> e(L);
    for (std::size_t j = 1; j <= L; ++j) {
      double dot = 0;
      for (std::size_t t = 0; t < dh; ++t)
        dot += q.at(i - 1, t) * k.at(j - 1, t);
      e[j - 1] = dot * scale;
    }
    double mx = e[0];
    for (double x : e) mx = std::max(mx, x);
    double z = 0;
    for (double x : e) z += std::exp(x - mx);
    for (std::size_t j = 1; j <= L; ++j) {
      const double a = std::exp(e[j - 1] - mx) / z;
      const double rel = w.at(erpe_index(i, j, L) - 1);
      for (std::size_t t = 0; t < dv; ++t)
        out[(i - 1) * dv + t] += (a + rel) * v.at(j - 1, t);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("position table row zero alternates 0 and 1", "[encodings]") {
  for (std::size_t d : {std::size_t(2), std::size_t(8), std::size_t(64),
                        std::size_t(128)}) {
    const auto t = build_tape_table<double>(16, d);
    for (std::size_t j = 0; j < d; ++j)
      CHECK(t.table.at(0, j) == (j % 2 == 0 ? 0.0 : 1.0));
  }
}

TEST_CASE("L == d_model degenerates to the vanilla sinusoidal table",
          "[encodings]") {
  for (std::size_t n : {std::size_t(8), std::size_t(16), std::size_t(48),
                        std::size_t(64)}) {
    const auto t = build_tape_table<double>(n, n);
    const auto v = vanilla_sinusoid_table<double>(n, n);
    for (std::size_t i = 0; i < t.table.numel(); ++i)
      CHECK(std::abs(t.table.at(i) - v.at(i)) <= 1e-12);
  }
}

TEST_CASE("frequency rescaling fixture L=16 d=128", "[encodings]") {
  // Independent scalar evaluation: omega_0 = 10000^0 = 1, rescaled by
  // d_model/L = 8, so entry (1, 0) is sin(8).
  CHECK(tape_frequency(0, 128, 16) == Catch::Approx(8.0).margin(1e-15));
  const auto t = build_tape_table<double>(16, 128);
  CHECK(t.table.at(1, 0) == Catch::Approx(std::sin(8.0)).margin(1e-12));
  CHECK(t.table.at(1, 0) == Catch::Approx(0.98936).margin(1e-5));
  CHECK(t.table.at(1, 1) == Catch::Approx(std::cos(8.0)).margin(1e-12));
}

TEST_CASE("table entries stay within [-1, 1]", "[encodings]") {
  for (std::size_t len : {std::size_t(1), std::size_t(3), std::size_t(16),
                          std::size_t(100), std::size_t(512)}) {
    for (std::size_t d : {std::size_t(2), std::size_t(16), std::size_t(64),
                          std::size_t(256)}) {
      const auto t = build_tape_table<double>(len, d);
      for (std::size_t i = 0; i < t.table.numel(); ++i) {
        CHECK(t.table.at(i) <= 1.0);
        CHECK(t.table.at(i) >= -1.0);
      }
    }
  }
}

TEST_CASE("doubling L halves every rescaled frequency", "[encodings]") {
  for (std::size_t d : {std::size_t(16), std::size_t(64), std::size_t(128)}) {
    for (std::size_t len : {std::size_t(8), std::size_t(16), std::size_t(32),
                            std::size_t(128)}) {
      for (std::size_t k = 0; k < d / 2; ++k) {
        const double ratio =
            tape_frequency(k, d, len) / tape_frequency(k, d, 2 * len);
        CHECK(std::abs(ratio - 2.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("odd d_model is rejected", "[encodings]") {
  CHECK_THROWS_AS(build_tape_table<double>(16, 63), ValueError);
  CHECK_THROWS_AS(build_tape_table<double>(0, 64), ValueError);
}

TEST_CASE("add_ape fixtures", "[encodings]") {
  const auto t = build_tape_table<double>(4, 6);
  DT zero = DT::zeros({4, 6});
  DT out = add_ape(zero, t);
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.at(i) == t.table.at(i));

  std::vector<double> neg(t.table.values());
  for (auto& v : neg) v = -v;
  DT negated = DT::constant({4, 6}, neg);
  DT cancelled = add_ape(negated, t);
  for (std::size_t i = 0; i < cancelled.numel(); ++i) CHECK(cancelled.at(i) == 0.0);

  DT wrong = DT::zeros({5, 6});
  CHECK_THROWS_AS(add_ape(wrong, t), ShapeError);

  // Gradient passes through unchanged.
  DT x = DT::parameter({4, 6}, std::vector<double>(24, 0.5));
  Tape<double> tape;
  backward(sum_all(add_ape(x, t)));
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("erpe_index follows the 1-based contract", "[encodings]") {
  const std::size_t L = 16;
  CHECK(erpe_index(7, 7, L) == L);
  CHECK(erpe_index(L, 1, L) == 2 * L - 1);
  CHECK(erpe_index(1, L, L) == 1);
  CHECK_THROWS_AS(erpe_index(0, 1, L), ValueError);
  CHECK_THROWS_AS(erpe_index(1, L + 1, L), ValueError);
}

TEST_CASE("erpe_index covers every diagonal exactly", "[encodings]") {
  for (std::size_t L : {std::size_t(1), std::size_t(2), std::size_t(5),
                        std::size_t(16)}) {
    std::set<std::size_t> seen;
    for (std::size_t i = 1; i <= L; ++i)
      for (std::size_t j = 1; j <= L; ++j) seen.insert(erpe_index(i, j, L));
    REQUIRE(seen.size() == 2 * L - 1);
    // The offsets form a bijection onto 1..2L-1.
    std::size_t expect = 0;
    for (std::size_t v : seen) CHECK(v == ++expect);
  }
}

TEST_CASE("ERPEWeights allocates 2L-1 zeros per head", "[encodings]") {
  const auto w = ERPEWeights<double>::zeros(8, 16);
  REQUIRE(w.per_head.size() == 8);
  for (const auto& h : w.per_head) {
    REQUIRE(h.extent(0) == 31);
    CHECK(h.requires_grad());
    for (std::size_t i = 0; i < h.numel(); ++i) CHECK(h.at(i) == 0.0);
  }
}

TEST_CASE("erpe_attention with zero weights equals standard attention",
          "[encodings]") {
  Rng rng(5);
  for (int rep = 0; rep < 5; ++rep) {
    const std::size_t L = 6, dh = 4;
    DT q = random_tensor({L, dh}, rng);
    DT k = random_tensor({L, dh}, rng);
    DT v = random_tensor({L, dh}, rng);
    DT w = DT::zeros({2 * L - 1});
    DT with = erpe_attention(q, k, v, w);
    DT without = scaled_dot_attention(q, k, v);
    for (std::size_t i = 0; i < with.numel(); ++i)
      CHECK(std::abs(with.at(i) - without.at(i)) <= 1e-10);
  }
}

TEST_CASE("erpe_attention singleton sequence", "[encodings]") {
  DT q = DT::constant({1, 3}, {0.3, -1.0, 2.0});
  DT k = DT::constant({1, 3}, {1.0, 0.5, -0.25});
  DT v = DT::constant({1, 3}, {4.0, 5.0, 6.0});
  DT w = DT::constant({1}, {0.25});
  DT out = erpe_attention(q, k, v, w);
  // Softmax over one element is 1, so out = (1 + w) * v.
  for (std::size_t t = 0; t < 3; ++t)
    CHECK(out.at(0, t) == Catch::Approx(1.25 * v.at(0, t)).margin(1e-12));
}

TEST_CASE("erpe_attention matches the double-loop reference", "[encodings]") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const std::size_t L = 3, dh = 4;
    DT q = random_tensor({L, dh}, rng);
    DT k = random_tensor({L, dh}, rng);
    DT v = random_tensor({L, dh}, rng);
    DT w = random_tensor({2 * L - 1}, rng, -0.5, 0.5);
    const auto expect = erpe_reference(q, k, v, w);
    DT out = erpe_attention(q, k, v, w);
    for (std::size_t i = 0; i < expect.size(); ++i)
      CHECK(std::abs(out.at(i) - expect[i]) <= 1e-10);
  }
}

TEST_CASE("erpe_attention rejects mismatched weight length", "[encodings]") {
  Rng rng(9);
  DT q = random_tensor({4, 2}, rng);
  DT w = DT::zeros({6});  // needs 2L-1 = 7
  CHECK_THROWS_MATCHES(erpe_attention(q, q, q, w), ShapeError,
                       Catch::Matchers::MessageMatches(
                           Catch::Matchers::ContainsSubstring("2L-1")));
}

TEST_CASE("attention row sums document the un-normalized contract",
          "[encodings]") {
  Rng rng(17);
  const std::size_t L = 5, dh = 3;
  DT q = random_tensor({L, dh}, rng);
  DT k = random_tensor({L, dh}, rng);
  DT w = random_tensor({2 * L - 1}, rng, -0.3, 0.3);
  // Recompute A in the open, as the reference does.
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t i = 1; i <= L; ++i) {
    std::vector<double> e(L);
    for (std::size_t j = 1; j <= L; ++j) {
      double dot = 0;
      for (std::size_t t = 0; t < dh; ++t)
        dot += q.at(i - 1, t) * k.at(j - 1, t);
      e[j - 1] = dot * scale;
    }
    double mx = e[0];
    for (double x : e) mx = std::max(mx, x);
    double z = 0;
    for (double x : e) z += std::exp(x - mx);
    double a_sum = 0, combined_sum = 0, w_sum = 0;
    for (std::size_t j = 1; j <= L; ++j) {
      const double a = std::exp(e[j - 1] - mx) / z;
      const double rel = w.at(erpe_index(i, j, L) - 1);
      a_sum += a;
      combined_sum += a + rel;
      w_sum += rel;
    }
    CHECK(std::abs(a_sum - 1.0) <= 1e-9);
    CHECK(std::abs(combined_sum - (1.0 + w_sum)) <= 1e-12);
  }
}

TEST_CASE("zero-weight attention is permutation equivariant", "[encodings]") {
  Rng rng(23);
  const std::size_t L = 6, dh = 4;
  DT q = random_tensor({L, dh}, rng);
  DT k = random_tensor({L, dh}, rng);
  DT v = random_tensor({L, dh}, rng);
  DT w = DT::zeros({2 * L - 1});
  std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
  DT out = erpe_attention(q, k, v, w);
  DT out_perm = erpe_attention(select_rows(q, perm), select_rows(k, perm),
                               select_rows(v, perm), w);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t t = 0; t < dh; ++t)
      CHECK(std::abs(out_perm.at(i, t) - out.at(perm[i], t)) <= 1e-10);

  // A single nonzero relative weight breaks equivariance for this
  // permutation (it reshuffles relative offsets).
  std::vector<double> wv(2 * L - 1, 0.0);
  wv[0] = 0.5;
  DT w1 = DT::constant({2 * L - 1}, wv);
  DT b = erpe_attention(q, k, v, w1);
  DT b_perm = erpe_attention(select_rows(q, perm), select_rows(k, perm),
                             select_rows(v, perm), w1);
  double max_diff = 0;
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t t = 0; t < dh; ++t)
      max_diff = std::max(max_diff,
                          std::abs(b_perm.at(i, t) - b.at(perm[i], t)));
  CHECK(max_diff > 1e-6);
}

TEST_CASE("erpe_attention gradients match finite differences", "[encodings]") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 31);
    const std::size_t L = 4, dh = 3;
    DT q = random_tensor({L, dh}, rng, -2, 2, true);
    DT k = random_tensor({L, dh}, rng, -2, 2, true);
    DT v = random_tensor({L, dh}, rng, -2, 2, true);
    DT w = random_tensor({2 * L - 1}, rng, -0.5, 0.5, true);
    DT wsum = random_tensor({L, dh}, rng);
    auto build = [&] { return sum_all(mul(erpe_attention(q, k, v, w), wsum)); };
    CHECK(max_grad_rel_err(build, {q, k, v, w}, rng) < 1e-4);
  }
}
