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
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "seqformer/error.hpp"
#include "seqformer/rng.hpp"
#include "seqformer/serialize.hpp"
#include "seqformer/tensor.hpp"

namespace seqformer {

// Pain classes: 0 = NP (no pain), 1 = Low, 2 = High.
inline constexpr std::size_t kNumPainClasses = 3;
inline constexpr const char* kPainClassNames[kNumPainClasses] = {"NP", "Low",
                                                                 "High"};

inline std::string pain_class_name(std::size_t c) {
  if (c >= kNumPainClasses) throw ValueError("pain class index out of range");
  return kPainClassNames[c];
}

inline std::size_t parse_pain_class(const std::string& s) {
  for (std::size_t c = 0; c < kNumPainClasses; ++c)
    if (s == kPainClassNames[c]) return c;
  throw ValueError("unknown pain class label \"" + s + "\"");
}

/// One per-frame embedding sequence: T rows of D features, stored as f32
/// exactly like the on-disk format so a save/load round trip is
/// bit-identical.
struct FeatureSequence {
  std::size_t rows = 0;  // T
  std::size_t dim = 0;   // D
  std::vector<float> values;  // row-major T x D
  std::optional<std::size_t> label;
  std::string source_id;

  float at(std::size_t t, std::size_t d) const { return values[t * dim + d]; }
  float& at(std::size_t t, std::size_t d) { return values[t * dim + d]; }
};

struct WindowSpec {
  enum class Tail { drop, pad_repeat_last };
  std::size_t len = 16;
  std::size_t stride = 16;
  Tail tail = Tail::drop;

  void validate() const {
    if (len == 0 || stride == 0)
      throw ValueError("WindowSpec: len and stride must be positive");
  }
};

struct Dataset {
  std::vector<FeatureSequence> sequences;
  std::size_t feature_dim = 0;
  std::array<std::size_t, kNumPainClasses> histogram{};
  std::string split;

  void recount() {
    histogram.fill(0);
    for (const auto& s : sequences)
      if (s.label) ++histogram[*s.label];
  }
};

// ---------------------------------------------------------------------------
// FSEQ container: magic "FSEQ", version u32, T u32, D u32, then T*D
// little-endian f32 values row-major. Labels live in a sibling labels.tsv
// with lines "source_id<TAB>{NP|Low|High}".
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kFseqFormatVersion = 1;

inline void save_feature_file(const FeatureSequence& seq,
                              const std::string& path) {
  if (seq.rows == 0 || seq.dim == 0)
    throw ValueError("save_feature_file: empty sequence");
  if (seq.values.size() != seq.rows * seq.dim)
    throw ShapeError("save_feature_file: value count does not match T x D");
  BinaryWriter w(path);
  w.magic("FSEQ");
  w.u32(kFseqFormatVersion);
  w.u32(static_cast<std::uint32_t>(seq.rows));
  w.u32(static_cast<std::uint32_t>(seq.dim));
  w.f32_array(seq.values);
  w.close();
}

inline FeatureSequence load_feature_file(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic("FSEQ");
  const std::uint32_t version = r.u32();
  if (version != kFseqFormatVersion) {
    std::ostringstream os;
    os << path << ": unsupported FSEQ version " << version << " at byte offset 4";
    throw IoError(os.str());
  }
  FeatureSequence seq;
  seq.rows = r.u32();
  seq.dim = r.u32();
  if (seq.rows == 0) {
    std::ostringstream os;
    os << path << ": T must be >= 1 (header at byte offset 8)";
    throw IoError(os.str());
  }
  if (seq.dim == 0) {
    std::ostringstream os;
    os << path << ": D must be >= 1 (header at byte offset 12)";
    throw IoError(os.str());
  }
  seq.values = r.f32_array(seq.rows * seq.dim);
  r.expect_eof();
  seq.source_id = std::filesystem::path(path).stem().string();
  return seq;
}

/// Writes every sequence of `ds` into `dir` as <source_id>.fseq plus a
/// labels.tsv holding the labeled ones.
inline void save_features(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ostringstream labels;
  for (const auto& seq : ds.sequences) {
    if (seq.source_id.empty())
      throw ValueError("save_features: sequence without a source_id");
    save_feature_file(seq, (fs::path(dir) / (seq.source_id + ".fseq")).string());
    if (seq.label)
      labels << seq.source_id << '\t' << pain_class_name(*seq.label) << '\n';
  }
  const std::string text = labels.str();
  if (!text.empty()) {
    std::ofstream out(fs::path(dir) / "labels.tsv");
    if (!out) throw IoError(dir + "/labels.tsv: cannot open for writing");
    out << text;
  }
}

inline std::optional<std::string> find_label_line_error(const std::string& line) {
  if (line.find('\t') == std::string::npos)
    return "missing tab separator";
  return std::nullopt;
}

/// Loads every *.fseq in `dir` (sorted by filename) and attaches labels
/// from labels.tsv when present. An empty directory is a valid, empty
/// dataset.
inline Dataset load_features(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir)) throw IoError(dir + ": no such directory");
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".fseq")
      files.push_back(entry.path().string());
  std::sort(files.begin(), files.end());

  Dataset ds;
  for (const auto& f : files) {
    FeatureSequence seq = load_feature_file(f);
    if (ds.feature_dim == 0) {
      ds.feature_dim = seq.dim;
    } else if (seq.dim != ds.feature_dim) {
      std::ostringstream os;
      os << f << ": feature dim " << seq.dim
         << " differs from the dataset's dim " << ds.feature_dim
         << " (header at byte offset 12)";
      throw IoError(os.str());
    }
    ds.sequences.push_back(std::move(seq));
  }

  const fs::path labels_path = fs::path(dir) / "labels.tsv";
  if (fs::exists(labels_path)) {
    std::ifstream in(labels_path);
    if (!in) throw IoError(labels_path.string() + ": cannot open");
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) {
        std::ostringstream os;
        os << labels_path.string() << ":" << line_no << ": missing tab separator";
        throw IoError(os.str());
      }
      const std::string id = line.substr(0, tab);
      const std::string label_str = line.substr(tab + 1);
      std::size_t label;
      try {
        label = parse_pain_class(label_str);
      } catch (const ValueError&) {
        std::ostringstream os;
        os << labels_path.string() << ":" << line_no << ": unknown label \""
           << label_str << "\"";
        throw IoError(os.str());
      }
      for (auto& seq : ds.sequences)
        if (seq.source_id == id) seq.label = label;
    }
  }
  ds.recount();
  return ds;
}

inline void export_csv(const FeatureSequence& seq, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError(path + ": cannot open for writing");
  for (std::size_t t = 0; t < seq.rows; ++t) {
    for (std::size_t d = 0; d < seq.dim; ++d) {
      if (d) out << ',';
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(seq.at(t, d)));
      out << buf;
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Sliding-window segmentation
// ---------------------------------------------------------------------------

struct Segment {
  std::size_t len = 0, dim = 0;
  std::vector<float> values;  // len x dim
  std::optional<std::size_t> label;
  std::string source_id;
  std::size_t start = 0;  // first source row of the window
};

struct WindowResult {
  std::vector<Segment> segments;
  std::vector<std::string> warnings;
};

/// Segments starting at 0, `stride` apart. A tail shorter than L is either
/// dropped or padded by repeating the last row. T < L with the drop policy
/// yields zero segments and a warning record.
inline WindowResult window(const FeatureSequence& seq, const WindowSpec& spec) {
  spec.validate();
  WindowResult res;
  if (seq.rows == 0) throw ValueError("window: sequence has no rows");
  for (std::size_t start = 0;; start += spec.stride) {
    const bool complete = start + spec.len <= seq.rows;
    if (!complete) {
      if (spec.tail == WindowSpec::Tail::drop || start >= seq.rows) break;
    }
    Segment seg;
    seg.len = spec.len;
    seg.dim = seq.dim;
    seg.label = seq.label;
    seg.source_id = seq.source_id;
    seg.start = start;
    seg.values.resize(spec.len * seq.dim);
    for (std::size_t r = 0; r < spec.len; ++r) {
      const std::size_t src = std::min(start + r, seq.rows - 1);
      std::copy_n(seq.values.data() + src * seq.dim, seq.dim,
                  seg.values.data() + r * seq.dim);
    }
    res.segments.push_back(std::move(seg));
    if (!complete) break;  // the padded tail window is the last one
  }
  if (res.segments.empty()) {
    std::ostringstream os;
    os << seq.source_id << ": sequence length " << seq.rows
       << " is shorter than the window length " << spec.len
       << "; no segments emitted";
    res.warnings.push_back(os.str());
  }
  return res;
}

template <class Real>
Tensor<Real> segment_tensor(const Segment& seg) {
  std::vector<Real> vals(seg.values.size());
  for (std::size_t i = 0; i < vals.size(); ++i)
    vals[i] = static_cast<Real>(seg.values[i]);
  return Tensor<Real>::constant({seg.len, seg.dim}, std::move(vals));
}

// ---------------------------------------------------------------------------
// Synthetic classification sets
// ---------------------------------------------------------------------------

enum class SynthDifficulty { easy, hard };

inline SynthDifficulty parse_difficulty(const std::string& s) {
  if (s == "easy") return SynthDifficulty::easy;
  if (s == "hard") return SynthDifficulty::hard;
  throw ValueError("unknown difficulty \"" + s + "\" (want easy|hard)");
}

namespace detail {

inline void add_burst(FeatureSequence& seq, std::size_t center,
                      std::size_t channel, float amplitude) {
  // Triangular bump of half-width 2 centered at `center`.
  for (long long off = -2; off <= 2; ++off) {
    const long long t = static_cast<long long>(center) + off;
    if (t < 0 || t >= static_cast<long long>(seq.rows)) continue;
    const float w = 1.0f - 0.4f * static_cast<float>(std::abs(off));
    seq.at(static_cast<std::size_t>(t), channel) += amplitude * w;
  }
}

}  // namespace detail

/// Three-class synthetic set, n sequences per class, each L x D.
///
/// easy: classes carry distinct channel signatures plus a constant
/// per-class offset, so the set is linearly separable from pooled
/// statistics alone (class 0: flat noise; class 1: low-frequency sinusoid
/// on a random channel; class 2: a burst at a random position).
///
/// hard: the class signal for 0 vs 2 is carried purely by WHERE a burst
/// sits (class 0: burst in the early half; class 2: the same burst in the
/// late band; class 1: sinusoid). A position-agnostic model cannot separate
/// classes 0 and 2.
inline Dataset synth_classification_set(std::uint64_t seed,
                                        std::size_t n_per_class, std::size_t len,
                                        std::size_t dim,
                                        SynthDifficulty difficulty) {
  if (n_per_class == 0)
    throw ValueError("synth_classification_set: n_per_class must be >= 1");
  if (len < 8 || dim == 0)
    throw ValueError("synth_classification_set: need len >= 8 and dim >= 1");
  Rng rng(seed);
  Dataset ds;
  ds.feature_dim = dim;
  const float noise = 0.1f;
  for (std::size_t idx = 0; idx < n_per_class; ++idx) {
    for (std::size_t cls = 0; cls < kNumPainClasses; ++cls) {
      FeatureSequence seq;
      seq.rows = len;
      seq.dim = dim;
      seq.label = cls;
      {
        std::ostringstream os;
        os << "synth-" << seed << "-" << (idx * kNumPainClasses + cls);
        seq.source_id = os.str();
      }
      seq.values.resize(len * dim);
      for (auto& v : seq.values)
        v = static_cast<float>(rng.normal(0.0, noise));

      const std::size_t channel = rng.index(dim);
      const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      if (difficulty == SynthDifficulty::easy) {
        // Constant per-class offset keeps the classes linearly separable.
        const std::size_t off_ch = cls % dim;
        for (std::size_t t = 0; t < len; ++t)
          seq.at(t, off_ch) += 0.6f * static_cast<float>(cls);
        if (cls == 1) {
          for (std::size_t t = 0; t < len; ++t)
            seq.at(t, channel) += static_cast<float>(
                0.8 * std::sin(2.0 * 3.14159265358979323846 *
                                   static_cast<double>(t) /
                                   static_cast<double>(len) +
                               phase));
        } else if (cls == 2) {
          detail::add_burst(seq, 2 + rng.index(len - 4), channel, 1.2f);
        }
      } else {
        // hard: identical burst statistics for classes 0 and 2; only the
        // band the burst lands in differs.
        const std::size_t early_lo = 2, early_hi = len / 2 - 2;
        const std::size_t late_lo = len / 2 + 1, late_hi = len - 3;
        if (cls == 0) {
          detail::add_burst(seq, early_lo + rng.index(early_hi - early_lo + 1),
                            channel, 1.5f);
        } else if (cls == 1) {
          for (std::size_t t = 0; t < len; ++t)
            seq.at(t, channel) += static_cast<float>(
                0.8 * std::sin(2.0 * 3.14159265358979323846 *
                                   static_cast<double>(t) /
                                   static_cast<double>(len) +
                               phase));
        } else {
          detail::add_burst(seq, late_lo + rng.index(late_hi - late_lo + 1),
                            channel, 1.5f);
        }
      }
      ds.sequences.push_back(std::move(seq));
    }
  }
  ds.recount();
  return ds;
}

// ---------------------------------------------------------------------------
// Per-video aggregation of window predictions
// ---------------------------------------------------------------------------

/// Majority class over the window predictions. Ties break toward the
/// higher pain class by default (clinically conservative); pass
/// `tie_toward_higher = false` for the lower class instead.
inline std::size_t video_label_vote(const std::vector<std::size_t>& preds,
                                    bool tie_toward_higher = true) {
  if (preds.empty()) throw ValueError("video_label_vote: empty prediction list");
  std::array<std::size_t, kNumPainClasses> counts{};
  for (std::size_t p : preds) {
    if (p >= kNumPainClasses)
      throw ValueError("video_label_vote: class index out of range");
    ++counts[p];
  }
  std::size_t best = 0;
  for (std::size_t c = 1; c < kNumPainClasses; ++c) {
    const bool wins = tie_toward_higher ? counts[c] >= counts[best]
                                        : counts[c] > counts[best];
    if (wins) best = c;
  }
  return best;
}

}  // namespace seqformer
