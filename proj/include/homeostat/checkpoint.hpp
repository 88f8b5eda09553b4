#pragma once

// Single-file checkpoint container:
//
//   magic "HMSTCKPT" | u32 version | u32 section count
//   per section: u32 name length | name | u64 payload length | payload
//   u64 FNV-1a hash of every preceding byte
//
// All integers and floats are little-endian. Tensor lists inside sections
// carry a name, rank, u64 extents and a dtype tag before the raw values.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "homeostat/layers.hpp"
#include "homeostat/transformer.hpp"

namespace homeostat {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointFile {
 public:
  void set(const std::string& section, std::string payload);
  bool has(const std::string& section) const;
  // Throws CheckpointError when the section is missing.
  const std::string& get(const std::string& section) const;

  void write(const std::filesystem::path& path) const;
  static CheckpointFile read(const std::filesystem::path& path);

 private:
  std::map<std::string, std::string> sections_;
};

class ByteWriter {
 public:
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void i64(std::int64_t v) { raw(&v, sizeof v); }
  void str(const std::string& s);
  void raw(const void* data, std::size_t n);
  // Named matrix: name, rank 2, extents, dtype tag 2 (float64), values.
  void matrix(const std::string& name, const Matrix& m);

  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string section)
      : data_(data), section_(std::move(section)) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64();
  std::string str();
  void raw(void* out, std::size_t n);
  // Reads a named matrix into `out`, which must already have the stored
  // shape; a different name or shape raises CheckpointError.
  void matrix_into(const std::string& expected_name, Matrix& out);
  bool done() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::string section_;
  std::size_t pos_ = 0;
};

std::string encode_weights(Transformer& model);
void decode_weights(const std::string& payload, Transformer& model);

// Every statistics cache of the model: frames, cursor and fill.
std::string encode_caches(Transformer& model);
void decode_caches(const std::string& payload, Transformer& model);

}  // namespace homeostat
