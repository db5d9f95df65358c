#include "sima/common.hpp"

#include <fstream>
#include <iterator>

namespace sima {

std::string_view decode_error_kind_name(DecodeErrorKind kind) {
  switch (kind) {
    case DecodeErrorKind::kTruncated: return "truncated";
    case DecodeErrorKind::kBadMagic: return "bad magic";
    case DecodeErrorKind::kBadVersion: return "bad version";
    case DecodeErrorKind::kUnknownVariant: return "unknown variant";
    case DecodeErrorKind::kMalformed: return "malformed";
  }
  return "unknown";
}

DecodeError::DecodeError(DecodeErrorKind kind, std::size_t offset, const std::string& detail)
    : Error(std::string(decode_error_kind_name(kind)) + " at offset " + std::to_string(offset) +
            (detail.empty() ? "" : ": " + detail)),
      kind_(kind),
      offset_(offset) {}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(std::string_view text) {
  return fnv1a64(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void ByteWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  raw(s);
}

void ByteWriter::bytes(std::span<const std::uint8_t> b) {
  u32(static_cast<std::uint32_t>(b.size()));
  raw(b);
}

void ByteWriter::patch_u32(std::size_t at, std::uint32_t v) {
  for (std::size_t i = 0; i < 4; ++i) buf_.at(at + i) = static_cast<std::uint8_t>((v >> (8 * i)) & 0xff);
}

void ByteReader::need(std::size_t n) const {
  if (remaining() < n) {
    fail(DecodeErrorKind::kTruncated,
         "need " + std::to_string(n) + " bytes, have " + std::to_string(remaining()));
  }
}

void ByteReader::fail(DecodeErrorKind kind, const std::string& detail) const {
  throw DecodeError(kind, offset(), detail);
}

std::uint64_t ByteReader::get(std::size_t n) {
  need(n);
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
  pos_ += n;
  return v;
}

std::uint8_t ByteReader::u8() {
  need(1);
  return data_[pos_++];
}

double ByteReader::f64() {
  std::uint64_t bits = u64();
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

bool ByteReader::boolean() {
  std::uint8_t v = u8();
  if (v > 1) fail(DecodeErrorKind::kMalformed, "boolean byte " + std::to_string(v));
  return v == 1;
}

std::string ByteReader::str() {
  std::uint32_t n = u32();
  auto b = raw(n);
  return std::string(b.begin(), b.end());
}

std::vector<std::uint8_t> ByteReader::bytes() {
  std::uint32_t n = u32();
  auto b = raw(n);
  return {b.begin(), b.end()};
}

std::span<const std::uint8_t> ByteReader::raw(std::size_t n) {
  need(n);
  auto out = data_.subspan(pos_, n);
  pos_ += n;
  return out;
}

void ByteReader::expect_done() const {
  if (!done()) fail(DecodeErrorKind::kMalformed, std::to_string(remaining()) + " trailing bytes");
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace sima
