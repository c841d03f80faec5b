// SPDX-License-Identifier: Apache-2.0
//
// Single-file tensor container:
//
//   bytes 0..7     magic "VITPTQ\0\x01"
//   bytes 8..15    manifest length L, unsigned 64-bit little-endian
//   bytes 16..     UTF-8 JSON manifest (L bytes), zero-padded to a multiple of 64
//   payload        little-endian float32 tensors, row-major, each at a
//                  64-byte aligned offset relative to the payload start
//
// The manifest carries "format_version" ("<major>.<minor>"), "payload_bytes",
// a "tensors" directory (name -> {dtype, shape, byte_offset, byte_length})
// and any caller metadata under other keys.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitptq/tensor.hpp"

namespace vitptq::io {

inline constexpr char kMagic[8] = {'V', 'I', 'T', 'P', 'T', 'Q', '\0', '\x01'};
inline constexpr int kFormatMajor = 1;
inline constexpr int kFormatMinor = 0;
inline constexpr std::size_t kAlignment = 64;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;

  /// Narrows to float32 (round to nearest).
  static StoredTensor from(std::string name, const Tensor& t);
  Tensor to_tensor() const;
};

struct Container {
  /// Caller metadata. "format_version", "payload_bytes" and "tensors" are
  /// reserved and are filled in by encode().
  nlohmann::json meta = nlohmann::json::object();
  std::vector<StoredTensor> tensors;  // payload order

  const StoredTensor* find(std::string_view name) const;
  /// Throws FormatError when absent.
  const StoredTensor& at(std::string_view name) const;
  void add(std::string name, const Tensor& t) { tensors.push_back(StoredTensor::from(std::move(name), t)); }
};

std::vector<std::uint8_t> encode(const Container& c);
/// Validates everything before building the result: magic, manifest JSON,
/// version, directory entries (dtype, sizes, alignment, bounds, overlap) and
/// the total length. Throws FormatError.
Container decode(std::span<const std::uint8_t> bytes);

/// Writes through a temporary file and renames, so readers never observe a
/// partial container.
void save_container(const Container& c, const std::filesystem::path& path);
Container load_container(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace vitptq::io
