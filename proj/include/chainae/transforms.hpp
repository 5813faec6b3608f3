#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "chainae/common.hpp"
#include "chainae/pe.hpp"
#include "chainae/rng.hpp"

namespace chainae::transforms {

enum class ActionKind : std::uint8_t {
  AppendOverlay,
  AddSection,
  RenameSection,
  PadSectionSlack,
  SetTimestamp,
  ZeroChecksum,
  PerturbDosStub,
  AppendBenignBytes,
};

inline constexpr std::size_t kActionKindCount = 8;
inline constexpr std::array<ActionKind, kActionKindCount> kAllActionKinds = {
    ActionKind::AppendOverlay, ActionKind::AddSection,   ActionKind::RenameSection,  ActionKind::PadSectionSlack,
    ActionKind::SetTimestamp,  ActionKind::ZeroChecksum, ActionKind::PerturbDosStub, ActionKind::AppendBenignBytes};

std::string_view to_string(ActionKind k);
ActionKind action_kind_from_string(std::string_view s);

// Parameter bounds.
inline constexpr std::uint32_t kMaxAppendLength = 65536;
inline constexpr std::uint32_t kMaxSectionLength = 65536;
inline constexpr std::size_t kMaxSections = 16;

/// One parameterized transformation. Unused parameters stay at their defaults
/// and are omitted from the JSON form.
struct Action {
  ActionKind kind = ActionKind::AppendOverlay;
  std::uint32_t length = 0;   // AppendOverlay, AddSection, AppendBenignBytes
  std::uint32_t index = 0;    // RenameSection, PadSectionSlack
  std::string name;           // AddSection, RenameSection (at most 8 bytes)
  std::uint32_t value = 0;    // SetTimestamp
  std::uint64_t seed = 0;     // content stream for every byte-generating kind

  bool operator==(const Action&) const = default;
};

struct ActionTrace {
  std::string source_id;
  std::vector<Action> actions;

  bool operator==(const ActionTrace&) const = default;
};

/// Limits shared by every application in one run.
struct ApplyLimits {
  /// Output size may not exceed this many bytes (0 = unlimited).
  std::size_t max_file_size = 0;
};

/// Throws Error(InapplicableAction) when the action cannot be applied to
/// this image (index out of range, nothing to change, size cap reached).
pe::Image apply(const pe::Image& img, const Action& action, const ApplyLimits& limits = {});

/// Applies each action in order; inapplicable ones are skipped and their
/// positions reported through `skipped` when non-null.
Bytes replay(ByteView bytes, const ActionTrace& trace, const ApplyLimits& limits = {},
             std::vector<std::size_t>* skipped = nullptr);

using Predicate = std::function<bool(ByteView)>;

/// Greedy single-pass minimization: for each action in order, drop it if the
/// remaining trace still satisfies `is_evasive`.
ActionTrace minimize(ByteView bytes, const ActionTrace& trace, const Predicate& is_evasive,
                     const ApplyLimits& limits = {});

/// Draws an action of the given kind with parameters suited to `img`.
Action sample_action(ActionKind kind, const pe::Image& img, Rng& rng);

/// Line-delimited JSON: one action per line.
std::string trace_to_jsonl(const ActionTrace& trace);
ActionTrace trace_from_jsonl(std::string_view text);

}  // namespace chainae::transforms
