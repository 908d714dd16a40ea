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
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "seqformer/error.hpp"

namespace seqformer {

/// Little-endian binary writer. All multi-byte fields in the on-disk
/// formats go through here so the layout is platform independent.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path)
      : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw IoError(path + ": cannot open for writing");
  }

  void magic(const char tag[5]) { out_.write(tag, 4); }

  void u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out_.write(reinterpret_cast<const char*>(b), 4);
  }

  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out_.write(reinterpret_cast<const char*>(b), 8);
  }

  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }

  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }

  template <class Real>
  void f64_array(const std::vector<Real>& v) {
    for (Real x : v) f64(static_cast<double>(x));
  }

  void f32_array(const std::vector<float>& v) {
    for (float x : v) f32(x);
  }

  void close() {
    out_.close();
    if (!out_) throw IoError(path_ + ": write failed");
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path)
      : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError(path + ": cannot open for reading");
  }

  const std::string& path() const { return path_; }
  std::size_t offset() const { return offset_; }

  void expect_magic(const char tag[5]) {
    char got[4];
    read_raw(got, 4, "magic bytes");
    if (std::memcmp(got, tag, 4) != 0) {
      std::ostringstream os;
      os << path_ << ": bad magic at byte 0: expected \"" << tag << "\", got \""
         << std::string(got, 4) << "\"";
      throw IoError(os.str());
    }
  }

  std::uint32_t u32() {
    unsigned char b[4];
    read_raw(reinterpret_cast<char*>(b), 4, "u32 field");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    unsigned char b[8];
    read_raw(reinterpret_cast<char*>(b), 8, "u64 field");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  template <class Real>
  std::vector<Real> f64_array(std::size_t n) {
    std::vector<Real> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<Real>(f64());
    return out;
  }

  std::vector<float> f32_array(std::size_t n) {
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f32();
    return out;
  }

  void expect_eof() {
    char c;
    if (in_.read(&c, 1)) {
      std::ostringstream os;
      os << path_ << ": trailing bytes at offset " << offset_;
      throw IoError(os.str());
    }
  }

 private:
  void read_raw(char* dst, std::size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      std::ostringstream os;
      os << path_ << ": truncated file: failed to read " << what
         << " at byte offset " << offset_;
      throw IoError(os.str());
    }
    offset_ += n;
  }

  std::string path_;
  std::ifstream in_;
  std::size_t offset_ = 0;
};

}  // namespace seqformer
