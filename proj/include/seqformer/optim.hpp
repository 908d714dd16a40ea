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

#include <cmath>
#include <cstddef>
#include <sstream>
#include <vector>

#include "seqformer/tensor.hpp"

namespace seqformer {

enum class OptimizerKind { adamw, adam, radam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double base_lr = 1.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.0;  // decoupled; ignored by plain Adam
  double eps = 1e-8;
  // Test hook: always take the variance-adapted RAdam branch with a
  // rectification factor of 1, which makes RAdam trace Adam exactly.
  bool force_rectified = false;

  void validate() const {
    if (base_lr <= 0) throw ValueError("optimizer: base_lr must be positive");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ValueError("optimizer: betas must lie in [0, 1)");
    if (eps < 0) throw ValueError("optimizer: eps must be non-negative");
  }
};

/// First-order optimizer over a fixed parameter list. Gradients are read
/// from each tensor's grad buffer; step() leaves them untouched so the
/// caller controls zeroing.
template <class Real>
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::vector<Tensor<Real>> params)
      : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  const std::vector<Tensor<Real>>& params() const { return params_; }
  long long step_count() const { return t_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// One update with learning rate `lr`. Parameters whose grad buffer was
  /// never touched this pass are treated as having zero gradient.
  void step(double lr) {
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    // RAdam rectification (maximum length of the approximated SMA).
    const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
    const double beta2_t = std::pow(b2, static_cast<double>(t_));
    const double rho_t =
        rho_inf - 2.0 * static_cast<double>(t_) * beta2_t / (1.0 - beta2_t);
    bool rectified = cfg_.force_rectified || rho_t > 4.0;
    double rect = 1.0;
    if (cfg_.kind == OptimizerKind::radam && rectified && !cfg_.force_rectified) {
      rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                       ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].values_mut();
      const bool has_grad = params_[i].has_grad();
      const std::vector<Real>* gp = has_grad ? &params_[i].grad() : nullptr;
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double g = gp ? static_cast<double>((*gp)[j]) : 0.0;
        double& m = m_[i][j];
        double& v = v_[i][j];
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        const double mhat = m / bc1;
        const double denom = std::sqrt(v / bc2) + cfg_.eps;
        // denom can be 0 only when every gradient so far was 0 (then
        // mhat is 0 too); treat that as no update.
        const double adapted = denom > 0.0 ? mhat / denom : 0.0;
        double update;
        switch (cfg_.kind) {
          case OptimizerKind::adamw:
          case OptimizerKind::adam:
            update = adapted;
            break;
          case OptimizerKind::radam:
            // Variance rectification undefined early on: fall back to
            // un-adapted momentum SGD.
            update = rectified ? rect * adapted : mhat;
            break;
          default:
            throw ValueError("optimizer: unsupported kind");
        }
        double x = static_cast<double>(p[j]);
        x -= lr * update;
        if (cfg_.kind != OptimizerKind::adam && cfg_.weight_decay > 0.0)
          x -= lr * cfg_.weight_decay * static_cast<double>(p[j]);
        p[j] = static_cast<Real>(x);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor<Real>> params_;
  std::vector<std::vector<double>> m_, v_;
  long long t_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm. No-op when max_norm <= 0.
template <class Real>
double clip_global_norm(std::vector<Tensor<Real>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (Real g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      auto n = p.node();
      for (auto& g : n->grad) g = static_cast<Real>(static_cast<double>(g) * scale);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Cosine decay schedule with optional linear warmup
// ---------------------------------------------------------------------------

struct CosineSchedule {
  double base_lr = 1e-3;
  std::size_t total_steps = 1;
  std::size_t warmup_steps = 0;
  double min_lr = 0.0;

  void validate() const {
    if (total_steps == 0) throw ValueError("schedule: total_steps must be positive");
    if (warmup_steps >= total_steps)
      throw ValueError("schedule: warmup_steps must be < total_steps");
  }
};

/// Linear warmup to base_lr over warmup_steps, then
/// min_lr + (base_lr - min_lr) * (1 + cos(pi * progress)) / 2.
/// Steps past total_steps clamp to min_lr.
inline double lr_at(const CosineSchedule& s, std::size_t step) {
  s.validate();
  if (step > s.total_steps) return s.min_lr;
  if (s.warmup_steps > 0 && step < s.warmup_steps)
    return s.base_lr * static_cast<double>(step) /
           static_cast<double>(s.warmup_steps);
  const double progress =
      static_cast<double>(step - s.warmup_steps) /
      static_cast<double>(s.total_steps - s.warmup_steps);
  return s.min_lr + 0.5 * (s.base_lr - s.min_lr) *
                        (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---------------------------------------------------------------------------
// Cross-entropy loss (negative log-likelihood of the labeled class)
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
void ce_row_forward(const Real* logits, std::size_t m, std::size_t label,
                    double& loss, std::vector<double>& probs) {
  double mx = static_cast<double>(logits[0]);
  for (std::size_t j = 1; j < m; ++j)
    mx = std::max(mx, static_cast<double>(logits[j]));
  double z = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    probs[j] = std::exp(static_cast<double>(logits[j]) - mx);
    z += probs[j];
  }
  for (std::size_t j = 0; j < m; ++j) probs[j] /= z;
  loss = (mx + std::log(z)) - static_cast<double>(logits[label]);
}

}  // namespace detail

/// Scalar loss -log softmax(logits)[label] for a rank-1 logits vector, or
/// the batch mean for rank-2 [B x M] logits with one label per row.
/// Computed via log-sum-exp with max subtraction; the logits gradient is
/// exactly softmax(logits) - one_hot(label) (scaled by 1/B for batches).
template <class Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits,
                           const std::vector<std::size_t>& labels) {
  std::size_t batch, m;
  if (logits.rank() == 1) {
    batch = 1;
    m = logits.extent(0);
  } else if (logits.rank() == 2) {
    batch = logits.extent(0);
    m = logits.extent(1);
  } else {
    throw ShapeError("cross_entropy: logits must be rank 1 or 2, got " +
                     shape_str(logits.shape()));
  }
  if (labels.size() != batch) {
    std::ostringstream os;
    os << "cross_entropy: " << labels.size() << " labels for batch of " << batch;
    throw ShapeError(os.str());
  }
  for (std::size_t label : labels) {
    if (label >= m) {
      std::ostringstream os;
      os << "cross_entropy: label " << label << " out of range for " << m
         << " classes";
      throw ValueError(os.str());
    }
  }
  const auto& lv = logits.values();
  std::vector<double> probs_all(batch * m);
  double total = 0.0;
  std::vector<double> probs(m);
  for (std::size_t b = 0; b < batch; ++b) {
    double row_loss;
    detail::ce_row_forward(lv.data() + b * m, m, labels[b], row_loss, probs);
    std::copy(probs.begin(), probs.end(), probs_all.begin() + b * m);
    total += row_loss;
  }
  total /= static_cast<double>(batch);
  Tensor<Real> r = Tensor<Real>::constant({1}, {static_cast<Real>(total)});
  if (detail::tracking<Real>({&logits})) {
    detail::mark_tracked(r);
    auto ln = logits.node(), on = r.node();
    Tape<Real>::active()->record([ln, on, labels, batch, m,
                                  probs_all = std::move(probs_all)] {
      if (on->grad.empty() || !ln->requires_grad) return;
      const double g = static_cast<double>(on->grad[0]) /
                       static_cast<double>(batch);
      auto& gl = ln->grad_buffer();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < m; ++j) {
          double p = probs_all[b * m + j];
          if (j == labels[b]) p -= 1.0;
          gl[b * m + j] += static_cast<Real>(g * p);
        }
      }
    });
  }
  return r;
}

template <class Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, std::size_t label) {
  return cross_entropy(logits, std::vector<std::size_t>{label});
}

}  // namespace seqformer
