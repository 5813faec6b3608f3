#include "chainae/common.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace chainae {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::TruncatedSection: return "TruncatedSection";
    case ErrorCode::LayoutOverflow: return "LayoutOverflow";
    case ErrorCode::InapplicableAction: return "InapplicableAction";
    case ErrorCode::DegenerateCorpus: return "DegenerateCorpus";
    case ErrorCode::PositionOutOfRange: return "PositionOutOfRange";
    case ErrorCode::SkippedOutOfWindow: return "SkippedOutOfWindow";
    case ErrorCode::EmptyAfterScreening: return "EmptyAfterScreening";
    case ErrorCode::ZeroTotal: return "ZeroTotal";
    case ErrorCode::ZeroBaseline: return "ZeroBaseline";
    case ErrorCode::DigestMismatch: return "DigestMismatch";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::Unreachable: return "Unreachable";
    case ErrorCode::ProtocolError: return "ProtocolError";
    case ErrorCode::MissingArtifacts: return "MissingArtifacts";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

std::string sha256_hex(ByteView data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xF]);
  }
  return out;
}

std::string base64_encode(ByteView data) {
  std::string out(4 * ((data.size() + 2) / 3), '\0');
  int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), data.data(),
                          static_cast<int>(data.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

Bytes base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw Error(ErrorCode::ProtocolError, "base64 length not a multiple of 4");
  Bytes out(3 * (text.size() / 4));
  int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                          static_cast<int>(text.size()));
  if (n < 0) throw Error(ErrorCode::ProtocolError, "invalid base64");
  // EVP_DecodeBlock counts '=' padding as zero bytes.
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

std::string encode_f64(std::span<const double> values) {
  Bytes raw(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int k = 0; k < 8; ++k) raw[8 * i + k] = static_cast<std::uint8_t>(bits >> (8 * k));
  }
  return base64_encode(raw);
}

std::vector<double> decode_f64(std::string_view text) {
  Bytes raw = base64_decode(text);
  if (raw.size() % 8 != 0) throw Error(ErrorCode::ProtocolError, "f64 payload not a multiple of 8 bytes");
  std::vector<double> out(raw.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(raw[8 * i + k]) << (8 * k);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

Bytes read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingFile, path);
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, ByteView data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

}  // namespace chainae
