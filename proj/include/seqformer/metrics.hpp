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
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "seqformer/error.hpp"

namespace seqformer {

/// M x M integer confusion matrix; rows are true classes, columns are
/// predictions. Mergeable by addition, so evaluation shards can each keep
/// their own matrix.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes)
      : m_(num_classes), counts_(num_classes * num_classes, 0) {
    if (num_classes == 0)
      throw ValueError("ConfusionMatrix: need at least one class");
  }

  std::size_t num_classes() const { return m_; }

  std::uint64_t at(std::size_t true_c, std::size_t pred_c) const {
    check_index(true_c);
    check_index(pred_c);
    return counts_[true_c * m_ + pred_c];
  }

  void add(std::size_t true_c, std::size_t pred_c, std::uint64_t n = 1) {
    check_index(true_c);
    check_index(pred_c);
    counts_[true_c * m_ + pred_c] += n;
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  std::uint64_t row_total(std::size_t true_c) const {
    check_index(true_c);
    std::uint64_t t = 0;
    for (std::size_t j = 0; j < m_; ++j) t += counts_[true_c * m_ + j];
    return t;
  }

  std::uint64_t col_total(std::size_t pred_c) const {
    check_index(pred_c);
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < m_; ++i) t += counts_[i * m_ + pred_c];
    return t;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    if (other.m_ != m_)
      throw ShapeError("ConfusionMatrix: cannot merge matrices of different size");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
  }

  friend ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) {
    a += b;
    return a;
  }

 private:
  void check_index(std::size_t c) const {
    if (c >= m_) {
      std::ostringstream os;
      os << "ConfusionMatrix: class index " << c << " out of range for " << m_
         << " classes";
      throw ValueError(os.str());
    }
  }

  std::size_t m_;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix accumulate(const std::vector<std::size_t>& preds,
                                  const std::vector<std::size_t>& labels,
                                  std::size_t num_classes) {
  if (preds.size() != labels.size()) {
    std::ostringstream os;
    os << "accumulate: " << preds.size() << " predictions vs " << labels.size()
       << " labels";
    throw ValueError(os.str());
  }
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) cm.add(labels[i], preds[i]);
  return cm;
}

/// Precision/recall/F1 for one class. A zero denominator yields the value
/// 0 together with the matching degenerate flag, which keeps tables free
/// of NaN while staying detectable.
struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool precision_degenerate = false;  // no samples predicted as this class
  bool recall_degenerate = false;     // no true samples of this class
  bool f1_degenerate = false;
};

inline ClassMetrics per_class_prf1(const ConfusionMatrix& cm, std::size_t c) {
  const double tp = static_cast<double>(cm.at(c, c));
  const double predicted = static_cast<double>(cm.col_total(c));
  const double actual = static_cast<double>(cm.row_total(c));
  ClassMetrics out;
  if (predicted > 0) {
    out.precision = tp / predicted;
  } else {
    out.precision_degenerate = true;
  }
  if (actual > 0) {
    out.recall = tp / actual;
  } else {
    out.recall_degenerate = true;
  }
  if (out.precision + out.recall > 0) {
    out.f1 = 2.0 * out.precision * out.recall / (out.precision + out.recall);
  } else {
    out.f1_degenerate = true;
  }
  return out;
}

struct MetricsSummary {
  std::vector<ClassMetrics> per_class;
  double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
  double weighted_precision = 0.0, weighted_recall = 0.0, weighted_f1 = 0.0;
  double accuracy = 0.0;
  std::uint64_t total = 0;
};

inline MetricsSummary summary(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw ValueError("summary: empty confusion matrix");
  MetricsSummary s;
  s.total = total;
  const std::size_t m = cm.num_classes();
  std::uint64_t trace = 0;
  for (std::size_t c = 0; c < m; ++c) {
    s.per_class.push_back(per_class_prf1(cm, c));
    trace += cm.at(c, c);
    const double weight =
        static_cast<double>(cm.row_total(c)) / static_cast<double>(total);
    s.macro_precision += s.per_class[c].precision;
    s.macro_recall += s.per_class[c].recall;
    s.macro_f1 += s.per_class[c].f1;
    s.weighted_precision += weight * s.per_class[c].precision;
    s.weighted_recall += weight * s.per_class[c].recall;
    s.weighted_f1 += weight * s.per_class[c].f1;
  }
  s.macro_precision /= static_cast<double>(m);
  s.macro_recall /= static_cast<double>(m);
  s.macro_f1 /= static_cast<double>(m);
  s.accuracy = static_cast<double>(trace) / static_cast<double>(total);
  return s;
}

/// Display rounding used by the text report: values are truncated to two
/// decimals (0.1259 prints as 0.12). Raw values stay available in the
/// machine-readable output.
inline double display_round2(double x) {
  const double sign = x < 0 ? -1.0 : 1.0;
  return sign * std::floor(std::abs(x) * 100.0 + 1e-9) / 100.0;
}

inline std::string format_round2(double x) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << display_round2(x);
  return os.str();
}

/// Aligned text table mirroring the NP/Low/High column layout.
inline std::string format_report(const MetricsSummary& s,
                                 const std::vector<std::string>& class_names,
                                 bool weighted_avg = false) {
  if (class_names.size() != s.per_class.size())
    throw ValueError("format_report: one name per class required");
  std::ostringstream os;
  os << std::left << std::setw(12) << "";
  for (const auto& n : class_names) os << std::right << std::setw(8) << n;
  os << std::right << std::setw(8) << "Avg" << '\n';
  auto row = [&](const char* name, auto getter, double avg) {
    os << std::left << std::setw(12) << name;
    for (const auto& c : s.per_class)
      os << std::right << std::setw(8) << format_round2(getter(c));
    os << std::right << std::setw(8) << format_round2(avg) << '\n';
  };
  row("Precision", [](const ClassMetrics& c) { return c.precision; },
      weighted_avg ? s.weighted_precision : s.macro_precision);
  row("Recall", [](const ClassMetrics& c) { return c.recall; },
      weighted_avg ? s.weighted_recall : s.macro_recall);
  row("F1-score", [](const ClassMetrics& c) { return c.f1; },
      weighted_avg ? s.weighted_f1 : s.macro_f1);
  os << std::left << std::setw(12) << "Accuracy" << std::right << std::setw(8)
     << format_round2(s.accuracy) << '\n';
  bool any_degenerate = false;
  for (const auto& c : s.per_class)
    any_degenerate |= c.precision_degenerate || c.recall_degenerate ||
                      c.f1_degenerate;
  if (any_degenerate) {
    os << "degenerate:";
    for (std::size_t c = 0; c < s.per_class.size(); ++c) {
      if (s.per_class[c].precision_degenerate)
        os << " precision[" << class_names[c] << "]";
      if (s.per_class[c].recall_degenerate)
        os << " recall[" << class_names[c] << "]";
      if (s.per_class[c].f1_degenerate) os << " f1[" << class_names[c] << "]";
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace seqformer
