#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace chainae {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

enum class ErrorCode {
  MalformedHeader,
  TruncatedSection,
  LayoutOverflow,
  InapplicableAction,
  DegenerateCorpus,
  PositionOutOfRange,
  SkippedOutOfWindow,
  EmptyAfterScreening,
  ZeroTotal,
  ZeroBaseline,
  DigestMismatch,
  MissingFile,
  UnsupportedVersion,
  Unreachable,
  ProtocolError,
  MissingArtifacts,
  ConfigError,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries one of the codes above so that
/// callers (and the Python layer) can branch on the kind without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Little-endian field access. Callers check bounds first.
inline std::uint16_t read_u16(ByteView b, std::size_t off) {
  return static_cast<std::uint16_t>(b[off] | (b[off + 1] << 8));
}

inline std::uint32_t read_u32(ByteView b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
         (static_cast<std::uint32_t>(b[off + 2]) << 16) |
         (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

inline void write_u16(std::span<std::uint8_t> b, std::size_t off, std::uint16_t v) {
  b[off] = static_cast<std::uint8_t>(v);
  b[off + 1] = static_cast<std::uint8_t>(v >> 8);
}

inline void write_u32(std::span<std::uint8_t> b, std::size_t off, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[off + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

inline std::uint64_t align_up(std::uint64_t v, std::uint64_t a) { return (v + a - 1) / a * a; }

/// Lower-case hex SHA-256 of `data`.
std::string sha256_hex(ByteView data);
std::string base64_encode(ByteView data);
Bytes base64_decode(std::string_view text);

/// Doubles are stored as little-endian IEEE-754 bit patterns so that model
/// files reload bit-exactly.
std::string encode_f64(std::span<const double> values);
std::vector<double> decode_f64(std::string_view text);

Bytes read_file(const std::string& path);
void write_file(const std::string& path, ByteView data);

}  // namespace chainae
