#include "lhg/container.hpp"

#include "lhg/errors.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

namespace lhg::io {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {
constexpr char kMagic[4] = {'L', 'H', 'G', 'T'};
}

void TensorFile::add(std::string name, Matrix value) {
  if (has(name)) throw InvalidInput("duplicate tensor name: " + name);
  tensors.emplace_back(std::move(name), std::move(value));
}

bool TensorFile::has(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return true;
  }
  return false;
}

const Matrix& TensorFile::tensor(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return m;
  }
  throw InvalidInput("missing tensor: " + name);
}

void append_u32(Bytes& out, std::uint32_t v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  out.insert(out.end(), p, p + sizeof v);
}

void append_u64(Bytes& out, std::uint64_t v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  out.insert(out.end(), p, p + sizeof v);
}

void append_f32(Bytes& out, const Matrix& m) {
  const std::size_t start = out.size();
  out.resize(start + static_cast<std::size_t>(m.size()) * 4);
  char* dst = out.data() + start;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const float f = static_cast<float>(m(r, c));
      std::memcpy(dst, &f, 4);
      dst += 4;
    }
  }
}

std::uint32_t read_u32(std::span<const char> bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) throw FormatError("truncated u32", offset);
  std::uint32_t v;
  std::memcpy(&v, bytes.data() + offset, 4);
  return v;
}

std::uint64_t read_u64(std::span<const char> bytes, std::size_t offset) {
  if (offset + 8 > bytes.size()) throw FormatError("truncated u64", offset);
  std::uint64_t v;
  std::memcpy(&v, bytes.data() + offset, 8);
  return v;
}

Matrix read_f32(std::span<const char> bytes, std::size_t offset, Eigen::Index rows, Eigen::Index cols) {
  const std::size_t n = static_cast<std::size_t>(rows * cols) * 4;
  if (offset + n > bytes.size()) throw FormatError("truncated float payload", offset);
  Matrix m(rows, cols);
  const char* src = bytes.data() + offset;
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      float f;
      std::memcpy(&f, src, 4);
      m(r, c) = f;
      src += 4;
    }
  }
  return m;
}

Matrix round_to_f32(const Matrix& m) {
  return m.unaryExpr([](double x) { return static_cast<double>(static_cast<float>(x)); });
}

Bytes encode_tensor_file(const TensorFile& file) {
  json header;
  header["version"] = kTensorFileVersion;
  header["meta"] = file.meta;
  json index = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : file.tensors) {
    const std::uint64_t nbytes = static_cast<std::uint64_t>(m.size()) * 4;
    index.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}, {"bytes", nbytes}});
    offset += nbytes;
  }
  header["tensors"] = index;
  Bytes payload;
  payload.reserve(offset);
  for (const auto& [name, m] : file.tensors) append_f32(payload, m);
  header["payload_crc32"] = crc32(payload);
  const std::string text = header.dump();

  Bytes out(kMagic, kMagic + 4);
  append_u32(out, kTensorFileVersion);
  append_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

TensorFile decode_tensor_file(std::span<const char> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("not a tensor container (bad magic)", 0);
  }
  const std::uint32_t version = read_u32(bytes, 4);
  if (version != kTensorFileVersion) {
    throw FormatError("unsupported tensor container version " + std::to_string(version), 4);
  }
  const std::uint64_t hlen = read_u64(bytes, 8);
  if (16 + hlen > bytes.size()) throw FormatError("truncated header", 16);
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed header JSON: ") + e.what(), 16);
  }
  const std::size_t base = 16 + hlen;
  TensorFile file;
  file.meta = header.value("meta", json::object());
  std::uint64_t expected = 0;
  for (const auto& entry : header.at("tensors")) {
    const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
    const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
    const auto off = entry.at("offset").get<std::uint64_t>();
    file.tensors.emplace_back(entry.at("name").get<std::string>(), read_f32(bytes, base + off, rows, cols));
    expected = std::max<std::uint64_t>(expected, off + entry.at("bytes").get<std::uint64_t>());
  }
  if (base + expected != bytes.size()) throw FormatError("payload size disagrees with index", base);
  if (header.contains("payload_crc32")) {
    const auto crc = crc32(bytes.subspan(base));
    if (crc != header["payload_crc32"].get<std::uint32_t>()) throw FormatError("payload checksum mismatch", base);
  }
  return file;
}

Bytes read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_bytes(const std::filesystem::path& path, std::span<const char> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  write_bytes(path, encode_tensor_file(file));
}

TensorFile read_tensor_file(const std::filesystem::path& path) { return decode_tensor_file(read_bytes(path)); }

std::uint32_t crc32(std::span<const char> bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  c = ::crc32(c, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(c);
}

std::string config_hash(const json& config) {
  const std::string s = config.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace lhg::io
