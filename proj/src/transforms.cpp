#include "chainae/transforms.hpp"

#include <algorithm>
#include <sstream>

#include "chainae/corpus.hpp"
#include "json.hpp"

namespace chainae::transforms {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, kActionKindCount> kKindNames = {
    "AppendOverlay", "AddSection",   "RenameSection",  "PadSectionSlack",
    "SetTimestamp",  "ZeroChecksum", "PerturbDosStub", "AppendBenignBytes"};

constexpr std::array<const char*, 8> kNewSectionNames = {".rsrc", ".reloc", ".pdata", ".idata",
                                                         ".tls",  ".bss2",  ".newx",  ".crt"};
constexpr std::array<const char*, 8> kRenameNames = {".text", ".data",  ".rdata", ".rsrc",
                                                     ".reloc", ".idata", ".pdata", ".edata"};

[[noreturn]] void inapplicable(const std::string& why) { throw Error(ErrorCode::InapplicableAction, why); }

void check_length(const Action& a, std::uint32_t max) {
  if (a.length < 1 || a.length > max)
    inapplicable(std::string(to_string(a.kind)) + " length outside [1, " + std::to_string(max) + "]");
}

void check_name(const std::string& name) {
  if (name.empty() || name.size() > 8) inapplicable("section name must be 1..8 bytes");
}

}  // namespace

std::string_view to_string(ActionKind k) { return kKindNames[static_cast<std::size_t>(k)]; }

ActionKind action_kind_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i)
    if (kKindNames[i] == s) return static_cast<ActionKind>(i);
  throw Error(ErrorCode::ProtocolError, "unknown action kind '" + std::string(s) + "'");
}

pe::Image apply(const pe::Image& img, const Action& a, const ApplyLimits& limits) {
  const auto& content = corpus::ContentModel::standard();
  pe::Image out = img;
  Rng rng(a.seed);

  switch (a.kind) {
    case ActionKind::AppendOverlay: {
      check_length(a, kMaxAppendLength);
      const std::size_t old = out.overlay.size();
      out.overlay.resize(old + a.length);
      for (std::size_t i = old; i < out.overlay.size(); ++i) out.overlay[i] = static_cast<std::uint8_t>(rng());
      break;
    }
    case ActionKind::AppendBenignBytes: {
      check_length(a, kMaxAppendLength);
      Bytes extra = content.benign_bytes(rng, a.length);
      out.overlay.insert(out.overlay.end(), extra.begin(), extra.end());
      break;
    }
    case ActionKind::AddSection: {
      check_length(a, kMaxSectionLength);
      check_name(a.name);
      if (out.sections.size() >= kMaxSections) inapplicable("section limit reached");
      std::uint64_t va = pe::kSectionAlignment;
      for (const auto& s : out.sections)
        va = std::max<std::uint64_t>(va, align_up(std::uint64_t{s.virtual_address} + std::max(s.virtual_size, s.raw_size),
                                                  pe::kSectionAlignment));
      pe::Section s;
      s.set_name(a.name);
      s.characteristics = pe::kScnCntInitializedData | pe::kScnMemRead;
      s.virtual_address = static_cast<std::uint32_t>(va);
      s.virtual_size = a.length;
      s.data = content.benign_bytes(rng, a.length);
      out.sections.push_back(std::move(s));
      break;
    }
    case ActionKind::RenameSection: {
      check_name(a.name);
      if (a.index >= out.sections.size())
        inapplicable("section index " + std::to_string(a.index) + " out of range");
      auto& s = out.sections[a.index];
      if (s.name_string() == a.name) inapplicable("section already has that name");
      s.set_name(a.name);
      break;
    }
    case ActionKind::PadSectionSlack: {
      if (a.index >= out.sections.size())
        inapplicable("section index " + std::to_string(a.index) + " out of range");
      auto& s = out.sections[a.index];
      if (s.data.size() <= s.virtual_size) inapplicable("section has no slack");
      content.fill_benign(rng, std::span<std::uint8_t>(s.data).subspan(s.virtual_size));
      break;
    }
    case ActionKind::SetTimestamp:
      if (out.coff.timestamp == a.value) inapplicable("timestamp unchanged");
      out.coff.timestamp = a.value;
      break;
    case ActionKind::ZeroChecksum:
      if (out.optional.checksum == 0) inapplicable("checksum already zero");
      out.optional.checksum = 0;
      break;
    case ActionKind::PerturbDosStub: {
      // e_magic (0..1) and e_lfanew (60..63) are left alone.
      content.fill_benign(rng, std::span<std::uint8_t>(out.dos.raw).subspan(2, pe::kLfanewOffset - 2));
      content.fill_benign(rng, out.dos.stub);
      break;
    }
  }

  pe::relayout(out);
  if (limits.max_file_size != 0 && out.file_size() > limits.max_file_size)
    inapplicable("size cap of " + std::to_string(limits.max_file_size) + " bytes reached");
  return out;
}

Bytes replay(ByteView bytes, const ActionTrace& trace, const ApplyLimits& limits, std::vector<std::size_t>* skipped) {
  if (trace.actions.empty()) return Bytes(bytes.begin(), bytes.end());
  pe::Image img = pe::parse(bytes);
  for (std::size_t i = 0; i < trace.actions.size(); ++i) {
    try {
      img = apply(img, trace.actions[i], limits);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::InapplicableAction) throw;
      if (skipped) skipped->push_back(i);
    }
  }
  return pe::serialize(img);
}

ActionTrace minimize(ByteView bytes, const ActionTrace& trace, const Predicate& is_evasive, const ApplyLimits& limits) {
  ActionTrace current = trace;
  std::size_t i = 0;
  while (i < current.actions.size()) {
    ActionTrace candidate = current;
    candidate.actions.erase(candidate.actions.begin() + static_cast<std::ptrdiff_t>(i));
    if (is_evasive(replay(bytes, candidate, limits))) current = std::move(candidate);
    else ++i;
  }
  return current;
}

Action sample_action(ActionKind kind, const pe::Image& img, Rng& rng) {
  Action a;
  a.kind = kind;
  const std::size_t n = img.sections.size();
  switch (kind) {
    case ActionKind::AppendOverlay:
      a.length = static_cast<std::uint32_t>(uniform_int(rng, 256, 4096));
      break;
    case ActionKind::AppendBenignBytes:
      a.length = static_cast<std::uint32_t>(uniform_int(rng, 512, 8192));
      break;
    case ActionKind::AddSection:
      a.length = static_cast<std::uint32_t>(uniform_int(rng, 512, 8192));
      a.name = kNewSectionNames[rng() % kNewSectionNames.size()];
      break;
    case ActionKind::RenameSection:
      a.index = n == 0 ? 0 : static_cast<std::uint32_t>(rng() % n);
      a.name = kRenameNames[rng() % kRenameNames.size()];
      break;
    case ActionKind::PadSectionSlack:
      a.index = n == 0 ? 0 : static_cast<std::uint32_t>(rng() % n);
      break;
    case ActionKind::SetTimestamp:
      // 2015..2023, the benign build era of the corpus.
      a.value = static_cast<std::uint32_t>((45.0 + 9.0 * uniform01(rng)) * 31557600.0);
      break;
    case ActionKind::ZeroChecksum:
    case ActionKind::PerturbDosStub:
      break;
  }
  a.seed = rng();
  return a;
}

namespace {

json action_to_json(const Action& a, const std::string& source) {
  json params = json::object();
  switch (a.kind) {
    case ActionKind::AppendOverlay:
    case ActionKind::AppendBenignBytes: params["length"] = a.length; break;
    case ActionKind::AddSection: params = {{"length", a.length}, {"name", a.name}}; break;
    case ActionKind::RenameSection: params = {{"index", a.index}, {"name", a.name}}; break;
    case ActionKind::PadSectionSlack: params["index"] = a.index; break;
    case ActionKind::SetTimestamp: params["value"] = a.value; break;
    case ActionKind::ZeroChecksum:
    case ActionKind::PerturbDosStub: break;
  }
  return {{"source", source}, {"kind", to_string(a.kind)}, {"params", params}, {"seed", a.seed}};
}

}  // namespace

std::string trace_to_jsonl(const ActionTrace& trace) {
  std::string out;
  for (const auto& a : trace.actions) {
    out += action_to_json(a, trace.source_id).dump();
    out += '\n';
  }
  return out;
}

ActionTrace trace_from_jsonl(std::string_view text) {
  ActionTrace trace;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ProtocolError, std::string("bad trace line: ") + e.what());
    }
    Action a;
    a.kind = action_kind_from_string(j.at("kind").get<std::string>());
    const auto& p = j.at("params");
    a.length = p.value("length", 0u);
    a.index = p.value("index", 0u);
    a.name = p.value("name", std::string{});
    a.value = p.value("value", 0u);
    a.seed = j.at("seed").get<std::uint64_t>();
    trace.source_id = j.value("source", trace.source_id);
    trace.actions.push_back(std::move(a));
  }
  return trace;
}

}  // namespace chainae::transforms
