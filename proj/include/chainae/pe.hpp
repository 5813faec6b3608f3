#pragma once

// Minimal PE32 image model: DOS header and stub, COFF header, optional header,
// section table, section data and overlay. Enough to rewrite headers,
// sections and overlay while keeping unmodified files byte-identical.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "chainae/common.hpp"

namespace chainae::pe {

inline constexpr std::uint32_t kFileAlignment = 512;
inline constexpr std::uint32_t kSectionAlignment = 4096;
inline constexpr std::size_t kDosHeaderSize = 64;
inline constexpr std::size_t kCoffHeaderSize = 20;
inline constexpr std::size_t kOptionalHeaderFixedSize = 96;  // PE32, before data directories
inline constexpr std::size_t kSectionHeaderSize = 40;
inline constexpr std::uint16_t kPe32Magic = 0x10B;
inline constexpr std::size_t kLfanewOffset = 0x3C;

inline constexpr std::uint32_t kScnCntCode = 0x00000020;
inline constexpr std::uint32_t kScnCntInitializedData = 0x00000040;
inline constexpr std::uint32_t kScnMemExecute = 0x20000000;
inline constexpr std::uint32_t kScnMemRead = 0x40000000;
inline constexpr std::uint32_t kScnMemWrite = 0x80000000;

struct DosHeader {
  /// The full 64-byte header as stored; e_magic and e_lfanew live inside it.
  std::array<std::uint8_t, kDosHeaderSize> raw{};
  /// Bytes between the header and the PE signature (the DOS stub program).
  Bytes stub;

  std::uint16_t e_magic() const { return read_u16(raw, 0); }
  std::uint32_t e_lfanew() const { return read_u32(raw, kLfanewOffset); }
  void set_e_lfanew(std::uint32_t v) { write_u32(raw, kLfanewOffset, v); }
};

struct CoffHeader {
  std::uint16_t machine = 0x14C;
  std::uint16_t number_of_sections = 0;
  std::uint32_t timestamp = 0;
  std::uint32_t pointer_to_symbol_table = 0;
  std::uint32_t number_of_symbols = 0;
  std::uint16_t size_of_optional_header = 0;
  std::uint16_t characteristics = 0;
};

/// The structured fields are overlaid onto `raw` on serialization; every other
/// byte (versions, subsystem, data directories, ...) is carried verbatim.
struct OptionalHeader {
  Bytes raw;
  std::uint32_t entry_point = 0;
  std::uint32_t image_base = 0;
  std::uint32_t section_alignment = kSectionAlignment;
  std::uint32_t file_alignment = kFileAlignment;
  std::uint32_t size_of_image = 0;
  std::uint32_t size_of_headers = 0;
  std::uint32_t checksum = 0;
  std::uint32_t number_of_rva_and_sizes = 0;
};

struct Section {
  std::array<std::uint8_t, 8> name{};
  std::uint32_t virtual_size = 0;
  std::uint32_t virtual_address = 0;
  std::uint32_t raw_size = 0;
  std::uint32_t raw_offset = 0;
  std::uint32_t pointer_to_relocations = 0;
  std::uint32_t pointer_to_linenumbers = 0;
  std::uint16_t number_of_relocations = 0;
  std::uint16_t number_of_linenumbers = 0;
  std::uint32_t characteristics = 0;
  /// Exactly raw_size bytes once laid out (file-alignment padding included).
  Bytes data;

  std::string name_string() const;
  void set_name(std::string_view n);
  bool executable() const { return (characteristics & (kScnMemExecute | kScnCntCode)) != 0; }
};

struct Image {
  DosHeader dos;
  std::array<std::uint8_t, 4> signature{'P', 'E', 0, 0};
  CoffHeader coff;
  OptionalHeader optional;
  std::vector<Section> sections;
  /// Bytes from the end of the section table up to the first section's data.
  Bytes header_padding;
  Bytes overlay;

  /// File offset one past the section table.
  std::size_t section_table_end() const;
  std::size_t file_size() const;
};

struct Violation {
  std::string field;
  std::string message;
};

Image parse(ByteView bytes);
Bytes serialize(const Image& img);
std::vector<Violation> validate(const Image& img);

/// Recomputes section count, header size, raw offsets/sizes and image size
/// after a structural edit. Virtual addresses of existing sections are kept.
void relayout(Image& img);

/// SHA-256 over the entry-point RVA and the mapped bytes of every executable
/// section. Headers, non-executable sections, section slack and overlay are
/// excluded.
std::string code_fingerprint(const Image& img);

/// Standard PE checksum (16-bit folded sum plus file length), skipping the
/// checksum field itself.
std::uint32_t compute_checksum(ByteView file);

}  // namespace chainae::pe
