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

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "seqformer/rng.hpp"
#include "seqformer/tensor.hpp"

namespace testutil {

/// Unique scratch directory, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& hint = "seqformer") {
    static std::atomic<unsigned> counter{0};
    const unsigned id = counter++;
    std::ostringstream os;
    os << hint << "-" << ::getpid() << "-" << id;
    path_ = std::filesystem::temp_directory_path() / os.str();
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str() const { return path_.string(); }
  std::string sub(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Random tensor with entries uniform in [lo, hi).
inline seqformer::Tensor<double> random_tensor(seqformer::Shape shape,
                                               seqformer::Rng& rng,
                                               double lo = -2.0, double hi = 2.0,
                                               bool requires_grad = false) {
  std::vector<double> v(seqformer::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return requires_grad
             ? seqformer::Tensor<double>::parameter(std::move(shape), std::move(v))
             : seqformer::Tensor<double>::constant(std::move(shape), std::move(v));
}

/// Central finite-difference check. `build` constructs the scalar loss
/// from the current values of `params` (fresh graph per call). Compares
/// tape gradients against (f(x+h) - f(x-h)) / 2h at up to
/// `max_coords_per_param` coordinates per tensor (0 = all), returning the
/// worst relative error with denominator max(1, |analytic|, |numeric|).
inline double max_grad_rel_err(
    const std::function<seqformer::Tensor<double>()>& build,
    std::vector<seqformer::Tensor<double>> params, seqformer::Rng& rng,
    double h = 1e-5, std::size_t max_coords_per_param = 0) {
  using seqformer::Tape;
  using seqformer::Tensor;
  for (auto& p : params) p.zero_grad();
  {
    Tape<double> tape;
    Tensor<double> loss = build();
    seqformer::backward(loss);
  }
  double worst = 0.0;
  for (auto& p : params) {
    const std::size_t n = p.numel();
    std::vector<std::size_t> coords;
    if (max_coords_per_param == 0 || n <= max_coords_per_param) {
      coords.resize(n);
      std::iota(coords.begin(), coords.end(), std::size_t(0));
    } else {
      for (std::size_t k = 0; k < max_coords_per_param; ++k)
        coords.push_back(rng.index(n));
    }
    for (std::size_t c : coords) {
      const double orig = p.values()[c];
      p.values_mut()[c] = orig + h;
      const double up = build().at(0);
      p.values_mut()[c] = orig - h;
      const double dn = build().at(0);
      p.values_mut()[c] = orig;
      const double numeric = (up - dn) / (2.0 * h);
      const double analytic = p.has_grad() ? p.grad()[c] : 0.0;
      const double denom =
          std::max({1.0, std::abs(numeric), std::abs(analytic)});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace testutil
