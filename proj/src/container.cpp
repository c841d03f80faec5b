// SPDX-License-Identifier: Apache-2.0
#include "vitptq/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "vitptq/errors.hpp"

namespace vitptq::io {

namespace {

constexpr std::size_t kHeaderBytes = 16;
const char* const kReserved[] = {"format_version", "payload_bytes", "tensors"};

std::size_t align_up(std::size_t v) { return (v + kAlignment - 1) / kAlignment * kAlignment; }

void put_u64(std::vector<std::uint8_t>& out, std::size_t pos, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out[pos + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[pos + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

std::string version_string() { return std::to_string(kFormatMajor) + "." + std::to_string(kFormatMinor); }

struct Entry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t length = 0;
};

Entry parse_entry(const std::string& name, const nlohmann::json& e, std::size_t payload_bytes) {
  auto fail = [&](const std::string& why) { return FormatError("container tensor '" + name + "': " + why); };
  if (!e.is_object()) throw fail("directory entry is not an object");
  for (const char* key : {"dtype", "shape", "byte_offset", "byte_length"}) {
    if (!e.contains(key)) throw fail(std::string("missing '") + key + "'");
  }
  if (e["dtype"] != "float32") throw fail("unsupported dtype " + e["dtype"].dump());
  if (!e["shape"].is_array()) throw fail("shape is not an array");
  Entry out;
  out.name = name;
  std::size_t numel = 1;
  for (const auto& d : e["shape"]) {
    if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0) throw fail("shape entries must be positive integers");
    out.shape.push_back(d.get<std::size_t>());
    numel *= out.shape.back();
  }
  if (!e["byte_offset"].is_number_unsigned() || !e["byte_length"].is_number_unsigned()) {
    throw fail("byte_offset and byte_length must be non-negative integers");
  }
  out.offset = e["byte_offset"].get<std::size_t>();
  out.length = e["byte_length"].get<std::size_t>();
  if (out.length != numel * sizeof(float)) {
    throw fail("byte_length " + std::to_string(out.length) + " does not match shape " + shape_str(out.shape));
  }
  if (out.offset % kAlignment != 0) throw fail("byte_offset " + std::to_string(out.offset) + " is not 64-byte aligned");
  if (out.offset > payload_bytes || out.length > payload_bytes - out.offset) {
    throw fail("extends past the end of the payload (" + std::to_string(payload_bytes) + " bytes)");
  }
  return out;
}

}  // namespace

StoredTensor StoredTensor::from(std::string name, const Tensor& t) {
  StoredTensor s;
  s.name = std::move(name);
  s.shape = t.shape();
  auto d = t.data();
  s.values.resize(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) s.values[i] = static_cast<float>(d[i]);
  return s;
}

Tensor StoredTensor::to_tensor() const {
  return Tensor(shape, std::vector<double>(values.begin(), values.end()));
}

const StoredTensor* Container::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

const StoredTensor& Container::at(std::string_view name) const {
  const StoredTensor* t = find(name);
  if (!t) throw FormatError("container has no tensor '" + std::string(name) + "'");
  return *t;
}

std::vector<std::uint8_t> encode(const Container& c) {
  if (!c.meta.is_object()) throw ContractError("container metadata must be a JSON object");
  nlohmann::json manifest = c.meta;
  nlohmann::json dir = nlohmann::json::object();
  std::size_t cursor = 0;
  std::vector<std::size_t> offsets;
  for (const auto& t : c.tensors) {
    if (dir.contains(t.name)) throw ContractError("duplicate container tensor '" + t.name + "'");
    if (numel_of(t.shape) != t.values.size()) throw DimensionError("tensor '" + t.name + "' has inconsistent shape");
    cursor = align_up(cursor);
    offsets.push_back(cursor);
    dir[t.name] = {{"dtype", "float32"},
                   {"shape", t.shape},
                   {"byte_offset", cursor},
                   {"byte_length", t.values.size() * sizeof(float)}};
    cursor += t.values.size() * sizeof(float);
  }
  const std::size_t payload_bytes = align_up(cursor);
  manifest["format_version"] = version_string();
  manifest["payload_bytes"] = payload_bytes;
  manifest["tensors"] = std::move(dir);

  const std::string text = manifest.dump();
  const std::size_t payload_start = align_up(kHeaderBytes + text.size());
  std::vector<std::uint8_t> out(payload_start + payload_bytes, 0);
  std::memcpy(out.data(), kMagic, sizeof(kMagic));
  put_u64(out, 8, text.size());
  std::memcpy(out.data() + kHeaderBytes, text.data(), text.size());
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    std::uint8_t* dst = out.data() + payload_start + offsets[i];
    for (float v : c.tensors[i].values) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int b = 0; b < 4; ++b) *dst++ = static_cast<std::uint8_t>(bits >> (8 * b));
    }
  }
  return out;
}

Container decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a container (bad magic)");
  }
  const std::uint64_t manifest_len = get_u64(bytes, 8);
  if (manifest_len > bytes.size() - kHeaderBytes) throw FormatError("truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + kHeaderBytes,
                                     bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderBytes + manifest_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("corrupt manifest: ") + e.what());
  }
  if (!manifest.is_object()) throw FormatError("corrupt manifest: not a JSON object");

  if (!manifest.contains("format_version") || !manifest["format_version"].is_string()) {
    throw FormatError("manifest has no format_version");
  }
  const std::string version = manifest["format_version"].get<std::string>();
  int major = -1;
  try {
    major = std::stoi(version.substr(0, version.find('.')));
  } catch (const std::exception&) {
    throw FormatError("malformed format_version '" + version + "'");
  }
  if (major != kFormatMajor) {
    throw FormatError("unsupported container format version " + version + " (this build reads " +
                      std::to_string(kFormatMajor) + ".x)");
  }
  if (!manifest.contains("payload_bytes") || !manifest["payload_bytes"].is_number_unsigned()) {
    throw FormatError("manifest has no payload_bytes");
  }
  if (!manifest.contains("tensors") || !manifest["tensors"].is_object()) {
    throw FormatError("manifest has no tensor directory");
  }

  const std::size_t payload_start = align_up(kHeaderBytes + manifest_len);
  const std::size_t payload_bytes = manifest["payload_bytes"].get<std::size_t>();
  if (bytes.size() < payload_start || bytes.size() - payload_start < payload_bytes) {
    throw FormatError("truncated payload: expected " + std::to_string(payload_bytes) + " bytes");
  }
  if (bytes.size() - payload_start != payload_bytes) throw FormatError("unexpected trailing bytes after payload");

  std::vector<Entry> entries;
  for (const auto& [name, e] : manifest["tensors"].items()) entries.push_back(parse_entry(name, e, payload_bytes));
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return a.offset != b.offset ? a.offset < b.offset : a.name < b.name;
  });
  for (std::size_t i = 1; i < entries.size(); ++i) {
    const Entry& prev = entries[i - 1];
    if (entries[i].offset < prev.offset + prev.length) {
      throw FormatError("container tensors '" + prev.name + "' and '" + entries[i].name + "' overlap");
    }
  }

  Container c;
  for (const Entry& e : entries) {
    StoredTensor t;
    t.name = e.name;
    t.shape = e.shape;
    t.values.resize(e.length / sizeof(float));
    const std::uint8_t* src = bytes.data() + payload_start + e.offset;
    for (float& v : t.values) {
      std::uint32_t b = 0;
      for (int k = 0; k < 4; ++k) b |= static_cast<std::uint32_t>(*src++) << (8 * k);
      v = std::bit_cast<float>(b);
    }
    c.tensors.push_back(std::move(t));
  }
  for (const char* key : kReserved) manifest.erase(key);
  c.meta = std::move(manifest);
  return c;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw std::runtime_error("error reading " + path.string());
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("error writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_container(const Container& c, const std::filesystem::path& path) { write_file_atomic(path, encode(c)); }

Container load_container(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace vitptq::io
