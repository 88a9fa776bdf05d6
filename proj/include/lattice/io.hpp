// Copyright (c) 2026 The Lattice Authors
// SPDX-License-Identifier: Apache-2.0
//
// File helpers shared by datasets, checkpoints and CLI outputs.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lattice {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Writes to "<path>.tmp" and renames over path.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

// Little-endian encoding independent of the host byte order.
void put_u32(std::string& out, std::uint32_t v);
void put_u64(std::string& out, std::uint64_t v);
void put_f64(std::string& out, double v);

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string raw(std::size_t n);
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  void seek(std::size_t p);

 private:
  void need(std::size_t n) const;
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace lattice
