#pragma once

// Raw little-endian blob files shared by scene bundles, checkpoints and
// weight-table centroids. Layout: 8 magic bytes "S3DBLOB\0", a little-endian
// u32 version, then the packed element data.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

namespace sam3d {

enum class FormatErrorKind {
  io,
  malformed_header,
  magic_mismatch,
  truncated_blob,
  dimension_inconsistency,
};

inline const char* to_string(FormatErrorKind k) {
  switch (k) {
    case FormatErrorKind::io: return "io";
    case FormatErrorKind::malformed_header: return "malformed-header";
    case FormatErrorKind::magic_mismatch: return "magic-mismatch";
    case FormatErrorKind::truncated_blob: return "truncated-blob";
    case FormatErrorKind::dimension_inconsistency: return "dimension-inconsistency";
  }
  return "unknown";
}

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

inline constexpr std::array<char, 8> kBlobMagic = {'S', '3', 'D', 'B', 'L', 'O', 'B', '\0'};
inline constexpr std::uint32_t kBlobVersion = 1;
inline constexpr std::size_t kBlobHeaderSize = kBlobMagic.size() + sizeof(std::uint32_t);

namespace detail {

template <typename T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::array<unsigned char, sizeof(T)> b;
    std::memcpy(b.data(), &v, sizeof(T));
    std::reverse(b.begin(), b.end());
    std::memcpy(&v, b.data(), sizeof(T));
    return v;
  }
}

}  // namespace detail

template <typename T>
void write_blob(const std::filesystem::path& path, std::span<const T> values) {
  static_assert(std::is_arithmetic_v<T>);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::io, "cannot open for writing: " + path.string());
  out.write(kBlobMagic.data(), kBlobMagic.size());
  const std::uint32_t version = detail::byteswap_if_big(kBlobVersion);
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (T v : values) {
      v = detail::byteswap_if_big(v);
      out.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
  }
  if (!out) throw FormatError(FormatErrorKind::io, "write failed: " + path.string());
}

template <typename T>
void write_blob(const std::filesystem::path& path, const std::vector<T>& values) {
  write_blob(path, std::span<const T>(values));
}

// Reads a blob that must hold exactly `expected_count` elements.
template <typename T>
std::vector<T> read_blob(const std::filesystem::path& path, std::size_t expected_count) {
  static_assert(std::is_arithmetic_v<T>);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::io, "cannot open: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < kBlobMagic.size()) {
    throw FormatError(FormatErrorKind::truncated_blob, path.string() + " shorter than blob header");
  }
  if (!std::equal(kBlobMagic.begin(), kBlobMagic.end(), bytes.begin())) {
    throw FormatError(FormatErrorKind::magic_mismatch, path.string());
  }
  if (bytes.size() < kBlobHeaderSize) {
    throw FormatError(FormatErrorKind::truncated_blob, path.string() + " missing version field");
  }
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + kBlobMagic.size(), sizeof(version));
  version = detail::byteswap_if_big(version);
  if (version != kBlobVersion) {
    throw FormatError(FormatErrorKind::malformed_header,
                      path.string() + " unsupported blob version " + std::to_string(version));
  }
  const std::size_t payload = bytes.size() - kBlobHeaderSize;
  const std::size_t want = expected_count * sizeof(T);
  if (payload < want) {
    throw FormatError(FormatErrorKind::truncated_blob,
                      path.string() + ": " + std::to_string(payload) + " bytes, expected " +
                          std::to_string(want));
  }
  if (payload > want) {
    throw FormatError(FormatErrorKind::dimension_inconsistency,
                      path.string() + ": " + std::to_string(payload) + " bytes, expected " +
                          std::to_string(want));
  }
  std::vector<T> values(expected_count);
  std::memcpy(values.data(), bytes.data() + kBlobHeaderSize, want);
  if constexpr (std::endian::native != std::endian::little) {
    for (T& v : values) v = detail::byteswap_if_big(v);
  }
  return values;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatErrorKind::io, "cannot open: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::malformed_header, path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::io, "cannot open for writing: " + path.string());
  out << j.dump(2) << '\n';
}

// Field access that maps json type/key errors onto malformed-header.
template <typename T>
T json_field(const nlohmann::json& j, const char* key, const std::filesystem::path& where) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::malformed_header,
                      where.string() + ": field '" + key + "': " + e.what());
  }
}

}  // namespace sam3d
