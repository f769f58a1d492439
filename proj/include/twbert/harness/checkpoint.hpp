#pragma once

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>
#include <zlib.h>

#include "twbert/core/errors.hpp"
#include "twbert/core/tensor.hpp"

namespace twbert {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "twbert-checkpoint";

template <Scalar Real>
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<Real> values;
};

/// Values read back from a checkpoint, converted to the caller's precision.
template <Scalar Real>
struct CheckpointData {
  nlohmann::ordered_json manifest;
  std::map<std::string, NamedArray<Real>> arrays;

  const NamedArray<Real>& at(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw FormatError("checkpoint: missing array '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return arrays.count(name) != 0; }
};

namespace detail {

inline std::uint32_t crc32_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

template <typename T>
void append_le(std::string& out, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T read_le(const char* p) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_atomic(const std::filesystem::path& p, const std::string& bytes) {
  auto tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("checkpoint: cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("checkpoint: short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, p);
}

inline std::string manifest_text(const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; }

}  // namespace detail

/// Writes `dir/manifest.json` and `dir/tensors.bin`. The blob is the
/// concatenation of all arrays as little-endian IEEE-754 values; the manifest
/// lists each array's shape, dtype and byte range, a CRC-32 of the blob, and
/// a CRC-32 of the manifest body itself. The blob is written first so a
/// manifest never points at a missing blob.
template <Scalar Real>
void write_checkpoint(const std::filesystem::path& dir, nlohmann::ordered_json meta,
                      const std::vector<NamedArray<Real>>& arrays) {
  std::filesystem::create_directories(dir);
  const char* dtype = sizeof(Real) == 8 ? "f64" : "f32";
  std::string blob;
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  for (const auto& a : arrays) {
    if (shape_numel(a.shape) != a.values.size()) {
      throw DimensionError("write_checkpoint: '" + a.name + "' has " + std::to_string(a.values.size()) +
                           " values for shape " + shape_string(a.shape));
    }
    const std::size_t offset = blob.size();
    for (Real v : a.values) detail::append_le(blob, v);
    table.push_back({{"name", a.name}, {"shape", a.shape}, {"dtype", dtype}, {"offset", offset},
                     {"bytes", blob.size() - offset}});
  }
  nlohmann::ordered_json body;
  body["format"] = kCheckpointFormat;
  body["version"] = kCheckpointVersion;
  body["meta"] = std::move(meta);
  body["blob"] = "tensors.bin";
  body["blob_bytes"] = blob.size();
  body["blob_crc32"] = detail::crc32_of(blob);
  body["tensors"] = std::move(table);
  nlohmann::ordered_json full = body;
  full["manifest_crc32"] = detail::crc32_of(detail::manifest_text(body));
  detail::write_file_atomic(dir / "tensors.bin", blob);
  detail::write_file_atomic(dir / "manifest.json", detail::manifest_text(full));
}

/// Reads and verifies a checkpoint directory. Any corruption of either file,
/// a version mismatch, or a table that does not tile the blob is an error.
template <Scalar Real>
CheckpointData<Real> read_checkpoint(const std::filesystem::path& dir) {
  const std::string text = detail::read_file(dir / "manifest.json");
  nlohmann::ordered_json full;
  try {
    full = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: manifest is not valid JSON: ") + e.what());
  }
  try {
    if (!full.is_object() || full.value("format", "") != kCheckpointFormat) {
      throw FormatError("checkpoint: not a twbert checkpoint manifest");
    }
    const int version = full.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw FormatError("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
    if (detail::manifest_text(full) != text) throw FormatError("checkpoint: manifest has been modified");
    nlohmann::ordered_json body = full;
    const auto stored_manifest_crc = body.at("manifest_crc32").get<std::uint32_t>();
    body.erase("manifest_crc32");
    if (detail::crc32_of(detail::manifest_text(body)) != stored_manifest_crc) {
      throw FormatError("checkpoint: manifest checksum mismatch");
    }

    const std::string blob = detail::read_file(dir / body.at("blob").get<std::string>());
    const auto blob_bytes = body.at("blob_bytes").get<std::size_t>();
    if (blob.size() < blob_bytes) {
      throw FormatError("checkpoint: truncated blob, " + std::to_string(blob.size()) + " of " +
                        std::to_string(blob_bytes) + " bytes");
    }
    if (blob.size() > blob_bytes) {
      throw FormatError("checkpoint: blob holds " + std::to_string(blob.size()) + " bytes, manifest declares " +
                        std::to_string(blob_bytes));
    }
    if (detail::crc32_of(blob) != body.at("blob_crc32").get<std::uint32_t>()) {
      throw FormatError("checkpoint: blob checksum mismatch");
    }

    CheckpointData<Real> out;
    std::size_t cursor = 0;
    for (const auto& t : body.at("tensors")) {
      NamedArray<Real> a;
      a.name = t.at("name").get<std::string>();
      a.shape = t.at("shape").get<Shape>();
      const std::string dtype = t.at("dtype").get<std::string>();
      const std::size_t width = dtype == "f64" ? 8 : dtype == "f32" ? 4 : 0;
      if (width == 0) throw FormatError("checkpoint: unknown dtype '" + dtype + "' for " + a.name);
      const auto offset = t.at("offset").get<std::size_t>();
      const auto bytes = t.at("bytes").get<std::size_t>();
      if (offset != cursor || bytes != shape_numel(a.shape) * width || offset + bytes > blob.size()) {
        throw FormatError("checkpoint: tensor table entry '" + a.name + "' does not tile the blob");
      }
      a.values.resize(shape_numel(a.shape));
      for (std::size_t i = 0; i < a.values.size(); ++i) {
        const char* p = blob.data() + offset + i * width;
        a.values[i] = width == 8 ? static_cast<Real>(detail::read_le<double>(p))
                                 : static_cast<Real>(detail::read_le<float>(p));
      }
      cursor += bytes;
      if (!out.arrays.emplace(a.name, std::move(a)).second) {
        throw FormatError("checkpoint: duplicate tensor '" + t.at("name").get<std::string>() + "'");
      }
    }
    if (cursor != blob.size()) throw FormatError("checkpoint: tensor table leaves blob bytes unaccounted for");
    out.manifest = std::move(body);
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
}

}  // namespace twbert
