#pragma once

#include "lhg/autograd.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace lhg::io {

using json = nlohmann::json;
using Bytes = std::vector<char>;

/// Named-tensor container shared by checkpoints and embedding records:
///   "LHGT" | u32 version | u64 header length | UTF-8 JSON header | payload
/// The header carries `meta` plus a tensor index (name, shape, offset,
/// bytes); payloads are row-major little-endian float32 in index order.
struct TensorFile {
  json meta = json::object();
  std::vector<std::pair<std::string, Matrix>> tensors;

  void add(std::string name, Matrix value);
  bool has(const std::string& name) const;
  const Matrix& tensor(const std::string& name) const;
};

inline constexpr std::uint32_t kTensorFileVersion = 1;

Bytes encode_tensor_file(const TensorFile& file);
TensorFile decode_tensor_file(std::span<const char> bytes);

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

Bytes read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const char> bytes);

std::uint32_t crc32(std::span<const char> bytes);

/// FNV-1a 64 of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const json& config);

void append_u32(Bytes& out, std::uint32_t v);
void append_u64(Bytes& out, std::uint64_t v);
/// Appends `m` row-major as little-endian float32.
void append_f32(Bytes& out, const Matrix& m);

std::uint32_t read_u32(std::span<const char> bytes, std::size_t offset);
std::uint64_t read_u64(std::span<const char> bytes, std::size_t offset);
Matrix read_f32(std::span<const char> bytes, std::size_t offset, Eigen::Index rows, Eigen::Index cols);

/// Rounds every entry to the nearest float32 value.
Matrix round_to_f32(const Matrix& m);

}  // namespace lhg::io
