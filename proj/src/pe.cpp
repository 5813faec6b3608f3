#include "chainae/pe.hpp"

#include <algorithm>
#include <cstring>

namespace chainae::pe {

namespace {

// Optional-header field offsets (PE32).
constexpr std::size_t kOptMagic = 0;
constexpr std::size_t kOptEntryPoint = 16;
constexpr std::size_t kOptImageBase = 28;
constexpr std::size_t kOptSectionAlignment = 32;
constexpr std::size_t kOptFileAlignment = 36;
constexpr std::size_t kOptSizeOfImage = 56;
constexpr std::size_t kOptSizeOfHeaders = 60;
constexpr std::size_t kOptChecksum = 64;
constexpr std::size_t kOptNumberOfRvaAndSizes = 92;

[[noreturn]] void malformed(const std::string& what) { throw Error(ErrorCode::MalformedHeader, what); }

void append(Bytes& out, ByteView b) { out.insert(out.end(), b.begin(), b.end()); }

bool has_raw_data(const Section& s) { return s.raw_size > 0; }

}  // namespace

std::string Section::name_string() const {
  std::size_t len = 0;
  while (len < name.size() && name[len] != 0) ++len;
  return std::string(reinterpret_cast<const char*>(name.data()), len);
}

void Section::set_name(std::string_view n) {
  name.fill(0);
  std::memcpy(name.data(), n.data(), std::min(n.size(), name.size()));
}

std::size_t Image::section_table_end() const {
  return dos.e_lfanew() + signature.size() + kCoffHeaderSize + optional.raw.size() +
         kSectionHeaderSize * sections.size();
}

std::size_t Image::file_size() const {
  std::size_t end = section_table_end() + header_padding.size();
  for (const auto& s : sections)
    if (has_raw_data(s)) end = std::max<std::size_t>(end, std::size_t{s.raw_offset} + s.raw_size);
  return end + overlay.size();
}

Image parse(ByteView bytes) {
  if (bytes.size() < kDosHeaderSize) malformed("file shorter than the 64-byte DOS header");
  Image img;
  std::copy_n(bytes.begin(), kDosHeaderSize, img.dos.raw.begin());
  if (img.dos.e_magic() != 0x5A4D) malformed("e_magic is not 'MZ'");

  const std::uint64_t lfanew = img.dos.e_lfanew();
  if (lfanew < kDosHeaderSize) malformed("e_lfanew points inside the DOS header");
  if (lfanew + 4 + kCoffHeaderSize > bytes.size()) malformed("e_lfanew beyond end of file");
  img.dos.stub.assign(bytes.begin() + kDosHeaderSize, bytes.begin() + static_cast<std::ptrdiff_t>(lfanew));

  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(lfanew), 4, img.signature.begin());
  if (img.signature != std::array<std::uint8_t, 4>{'P', 'E', 0, 0}) malformed("missing PE signature");

  const std::size_t coff = lfanew + 4;
  img.coff.machine = read_u16(bytes, coff + 0);
  img.coff.number_of_sections = read_u16(bytes, coff + 2);
  img.coff.timestamp = read_u32(bytes, coff + 4);
  img.coff.pointer_to_symbol_table = read_u32(bytes, coff + 8);
  img.coff.number_of_symbols = read_u32(bytes, coff + 12);
  img.coff.size_of_optional_header = read_u16(bytes, coff + 16);
  img.coff.characteristics = read_u16(bytes, coff + 18);

  const std::size_t opt = coff + kCoffHeaderSize;
  const std::size_t opt_size = img.coff.size_of_optional_header;
  if (opt_size < kOptionalHeaderFixedSize) malformed("optional header too small for PE32");
  if (opt + opt_size > bytes.size()) malformed("optional header beyond end of file");
  auto& oh = img.optional;
  oh.raw.assign(bytes.begin() + static_cast<std::ptrdiff_t>(opt),
                bytes.begin() + static_cast<std::ptrdiff_t>(opt + opt_size));
  if (read_u16(oh.raw, kOptMagic) != kPe32Magic) malformed("optional header magic is not PE32");
  oh.entry_point = read_u32(oh.raw, kOptEntryPoint);
  oh.image_base = read_u32(oh.raw, kOptImageBase);
  oh.section_alignment = read_u32(oh.raw, kOptSectionAlignment);
  oh.file_alignment = read_u32(oh.raw, kOptFileAlignment);
  oh.size_of_image = read_u32(oh.raw, kOptSizeOfImage);
  oh.size_of_headers = read_u32(oh.raw, kOptSizeOfHeaders);
  oh.checksum = read_u32(oh.raw, kOptChecksum);
  oh.number_of_rva_and_sizes = read_u32(oh.raw, kOptNumberOfRvaAndSizes);

  const std::size_t table = opt + opt_size;
  const std::size_t table_end = table + kSectionHeaderSize * std::size_t{img.coff.number_of_sections};
  if (table_end > bytes.size()) malformed("section table beyond end of file");

  img.sections.resize(img.coff.number_of_sections);
  std::size_t cursor = 0;  // end of the previous section's raw data
  std::size_t first_raw = 0;
  for (std::size_t i = 0; i < img.sections.size(); ++i) {
    const std::size_t h = table + kSectionHeaderSize * i;
    auto& s = img.sections[i];
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(h), 8, s.name.begin());
    s.virtual_size = read_u32(bytes, h + 8);
    s.virtual_address = read_u32(bytes, h + 12);
    s.raw_size = read_u32(bytes, h + 16);
    s.raw_offset = read_u32(bytes, h + 20);
    s.pointer_to_relocations = read_u32(bytes, h + 24);
    s.pointer_to_linenumbers = read_u32(bytes, h + 28);
    s.number_of_relocations = read_u16(bytes, h + 32);
    s.number_of_linenumbers = read_u16(bytes, h + 34);
    s.characteristics = read_u32(bytes, h + 36);
    if (!has_raw_data(s)) continue;

    const std::uint64_t begin = s.raw_offset;
    const std::uint64_t end = begin + s.raw_size;
    if (end > bytes.size())
      throw Error(ErrorCode::TruncatedSection, "section " + std::to_string(i) + " extends beyond end of file");
    if (begin < table_end) malformed("section " + std::to_string(i) + " overlaps the headers");
    if (cursor != 0 && begin < cursor) malformed("section " + std::to_string(i) + " overlaps or precedes its predecessor");
    if (cursor == 0) first_raw = begin;
    s.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(begin), bytes.begin() + static_cast<std::ptrdiff_t>(end));
    cursor = end;
  }

  std::size_t header_end;
  if (cursor != 0) {
    header_end = first_raw;
  } else {
    header_end = std::max(table_end, std::min<std::size_t>(oh.size_of_headers, bytes.size()));
    cursor = header_end;
  }
  img.header_padding.assign(bytes.begin() + static_cast<std::ptrdiff_t>(table_end),
                            bytes.begin() + static_cast<std::ptrdiff_t>(header_end));
  img.overlay.assign(bytes.begin() + static_cast<std::ptrdiff_t>(cursor), bytes.end());
  return img;
}

Bytes serialize(const Image& img) {
  Bytes out;
  out.reserve(img.file_size());
  append(out, img.dos.raw);
  append(out, img.dos.stub);
  append(out, img.signature);

  std::array<std::uint8_t, kCoffHeaderSize> coff{};
  write_u16(coff, 0, img.coff.machine);
  write_u16(coff, 2, img.coff.number_of_sections);
  write_u32(coff, 4, img.coff.timestamp);
  write_u32(coff, 8, img.coff.pointer_to_symbol_table);
  write_u32(coff, 12, img.coff.number_of_symbols);
  write_u16(coff, 16, img.coff.size_of_optional_header);
  write_u16(coff, 18, img.coff.characteristics);
  append(out, coff);

  const auto& oh = img.optional;
  if (oh.raw.size() < kOptionalHeaderFixedSize)
    throw Error(ErrorCode::LayoutOverflow, "optional header shorter than the PE32 fixed part");
  Bytes opt = oh.raw;
  write_u32(opt, kOptEntryPoint, oh.entry_point);
  write_u32(opt, kOptImageBase, oh.image_base);
  write_u32(opt, kOptSectionAlignment, oh.section_alignment);
  write_u32(opt, kOptFileAlignment, oh.file_alignment);
  write_u32(opt, kOptSizeOfImage, oh.size_of_image);
  write_u32(opt, kOptSizeOfHeaders, oh.size_of_headers);
  write_u32(opt, kOptChecksum, oh.checksum);
  write_u32(opt, kOptNumberOfRvaAndSizes, oh.number_of_rva_and_sizes);
  append(out, opt);

  for (const auto& s : img.sections) {
    std::array<std::uint8_t, kSectionHeaderSize> h{};
    std::copy(s.name.begin(), s.name.end(), h.begin());
    write_u32(h, 8, s.virtual_size);
    write_u32(h, 12, s.virtual_address);
    write_u32(h, 16, s.raw_size);
    write_u32(h, 20, s.raw_offset);
    write_u32(h, 24, s.pointer_to_relocations);
    write_u32(h, 28, s.pointer_to_linenumbers);
    write_u16(h, 32, s.number_of_relocations);
    write_u16(h, 34, s.number_of_linenumbers);
    write_u32(h, 36, s.characteristics);
    append(out, h);
  }
  append(out, img.header_padding);

  for (std::size_t i = 0; i < img.sections.size(); ++i) {
    const auto& s = img.sections[i];
    if (!has_raw_data(s)) continue;
    if (s.data.size() != s.raw_size)
      throw Error(ErrorCode::LayoutOverflow, "section " + std::to_string(i) + " data length differs from raw_size");
    if (s.raw_offset < out.size())
      throw Error(ErrorCode::LayoutOverflow, "section " + std::to_string(i) + " overlaps preceding content");
    out.resize(s.raw_offset, 0);
    append(out, s.data);
  }
  append(out, img.overlay);
  return out;
}

std::vector<Violation> validate(const Image& img) {
  std::vector<Violation> v;
  auto add = [&](std::string field, std::string msg) { v.push_back({std::move(field), std::move(msg)}); };

  if (img.dos.e_magic() != 0x5A4D) add("dos_header.e_magic", "e_magic is not 'MZ'");
  const std::uint32_t lfanew = img.dos.e_lfanew();
  if (lfanew < kDosHeaderSize) add("dos_header.e_lfanew", "e_lfanew < 64");
  else if (lfanew != kDosHeaderSize + img.dos.stub.size())
    add("dos_header.e_lfanew", "e_lfanew does not point at the PE signature");
  if (img.signature != std::array<std::uint8_t, 4>{'P', 'E', 0, 0}) add("signature", "signature is not 'PE\\0\\0'");

  if (img.coff.number_of_sections != img.sections.size())
    add("coff_header.number_of_sections", "section count does not match the section table");
  if (img.coff.size_of_optional_header != img.optional.raw.size())
    add("coff_header.size_of_optional_header", "does not match optional header length");
  if (img.optional.raw.size() < kOptionalHeaderFixedSize || read_u16(img.optional.raw, kOptMagic) != kPe32Magic)
    add("optional_header.magic", "not a PE32 optional header");

  const std::uint32_t falign = img.optional.file_alignment;
  const std::uint32_t salign = img.optional.section_alignment;
  if (falign != kFileAlignment) add("optional_header.file_alignment", "file alignment is not 512");
  if (salign != kSectionAlignment) add("optional_header.section_alignment", "section alignment is not 4096");

  const std::size_t header_end = img.section_table_end() + img.header_padding.size();
  if (img.optional.size_of_headers < img.section_table_end())
    add("optional_header.size_of_headers", "headers do not cover the section table");

  std::uint64_t cursor = header_end;
  std::uint64_t va_cursor = 0;
  bool entry_found = img.optional.entry_point == 0;
  for (std::size_t i = 0; i < img.sections.size(); ++i) {
    const auto& s = img.sections[i];
    const std::string field = "sections[" + std::to_string(i) + "]";
    if (has_raw_data(s)) {
      if (s.data.size() != s.raw_size) add(field + ".data", "data length differs from raw_size");
      if (falign != 0 && (s.raw_offset % falign != 0 || s.raw_size % falign != 0))
        add(field + ".raw_offset", "raw extent not aligned to file alignment");
      if (s.raw_offset < cursor) add(field + ".raw_offset", "raw extent overlaps headers or preceding section");
      cursor = std::max<std::uint64_t>(cursor, std::uint64_t{s.raw_offset} + s.raw_size);
    }
    if (salign != 0 && s.virtual_address % salign != 0)
      add(field + ".virtual_address", "not aligned to section alignment");
    if (s.virtual_address < va_cursor) add(field + ".virtual_address", "virtual ranges overlap or are out of order");
    va_cursor = std::uint64_t{s.virtual_address} + std::max(s.virtual_size, s.raw_size);
    if (s.executable() && img.optional.entry_point >= s.virtual_address &&
        img.optional.entry_point < std::uint64_t{s.virtual_address} + s.virtual_size)
      entry_found = true;
  }
  if (!entry_found) add("optional_header.entry_point", "entry point outside every executable section");
  if (salign != 0 && img.optional.size_of_image < align_up(va_cursor, salign))
    add("optional_header.size_of_image", "image size smaller than the mapped sections");
  return v;
}

void relayout(Image& img) {
  auto& oh = img.optional;
  img.coff.number_of_sections = static_cast<std::uint16_t>(img.sections.size());
  img.coff.size_of_optional_header = static_cast<std::uint16_t>(oh.raw.size());
  img.dos.set_e_lfanew(static_cast<std::uint32_t>(kDosHeaderSize + img.dos.stub.size()));

  const std::size_t table_end = img.section_table_end();
  const std::size_t headers = std::max<std::size_t>(oh.size_of_headers, align_up(table_end, kFileAlignment));
  oh.size_of_headers = static_cast<std::uint32_t>(headers);
  img.header_padding.resize(headers - table_end, 0);

  std::uint64_t cursor = headers;
  std::uint64_t va_end = align_up(headers, kSectionAlignment);
  for (auto& s : img.sections) {
    if (!s.data.empty()) {
      s.data.resize(align_up(s.data.size(), kFileAlignment), 0);
      s.raw_size = static_cast<std::uint32_t>(s.data.size());
      s.raw_offset = static_cast<std::uint32_t>(cursor);
      cursor += s.raw_size;
    } else {
      s.raw_size = 0;
      s.raw_offset = 0;
    }
    va_end = std::max<std::uint64_t>(va_end, std::uint64_t{s.virtual_address} + std::max(s.virtual_size, s.raw_size));
  }
  if (cursor > UINT32_MAX) throw Error(ErrorCode::LayoutOverflow, "section data exceeds 4 GiB");
  oh.size_of_image = static_cast<std::uint32_t>(align_up(va_end, kSectionAlignment));
}

std::string code_fingerprint(const Image& img) {
  Bytes buf(4);
  write_u32(buf, 0, img.optional.entry_point);
  for (const auto& s : img.sections) {
    if (!s.executable()) continue;
    std::array<std::uint8_t, 4> va{};
    write_u32(va, 0, s.virtual_address);
    append(buf, va);
    const std::size_t mapped = std::min<std::size_t>(s.virtual_size, s.data.size());
    buf.insert(buf.end(), s.data.begin(), s.data.begin() + static_cast<std::ptrdiff_t>(mapped));
  }
  return sha256_hex(buf);
}

std::uint32_t compute_checksum(ByteView file) {
  std::size_t checksum_off = SIZE_MAX;
  if (file.size() >= kDosHeaderSize) {
    const std::size_t lfanew = read_u32(file, kLfanewOffset);
    checksum_off = lfanew + 4 + kCoffHeaderSize + kOptChecksum;
  }
  std::uint64_t sum = 0;
  for (std::size_t i = 0; i < file.size(); i += 2) {
    if (i >= checksum_off && i < checksum_off + 4) continue;
    std::uint32_t word = file[i];
    if (i + 1 < file.size()) word |= static_cast<std::uint32_t>(file[i + 1]) << 8;
    sum += word;
    sum = (sum & 0xFFFF) + (sum >> 16);
  }
  sum = (sum & 0xFFFF) + (sum >> 16);
  return static_cast<std::uint32_t>(sum + file.size());
}

}  // namespace chainae::pe
