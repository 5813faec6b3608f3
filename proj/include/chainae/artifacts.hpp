#pragma once

// Report files: CSV tables, JSON documents, SVG heatmaps and the markdown
// summary. Everything here is a pure function of its inputs so reruns are
// byte-identical.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chainae/chain.hpp"
#include "json.hpp"

namespace chainae::artifacts {

/// Single-pass evasion rates, one row per (generator, oracle).
struct BaselineTable {
  std::vector<std::string> generators;
  std::vector<std::string> oracles;
  std::vector<std::size_t> screened;  // per oracle
  std::vector<std::size_t> evasive;   // [g * oracles + o]
  std::vector<double> rate;           // [g * oracles + o], percent
};

/// Runs (or reuses) stage 1 of every generator and tabulates it per oracle.
BaselineTable baseline_table(chain::ChainRunner& runner);
std::string baseline_csv(const BaselineTable& t);
nlohmann::json to_json(const BaselineTable& t);

/// Square matrix with generator labels; undefined cells are left empty.
std::string matrix_csv(std::span<const std::string> generators, std::span<const std::optional<double>> values);
/// One row per oracle plus "averaged": absolute and relative min/avg/max.
std::string stats_csv(const chain::EvasionReport& report);
/// Every cell of every oracle with its partition counts.
std::string cells_csv(const chain::EvasionReport& report);

/// Color scale: linear from white (#ffffff) at `lo` to #08306b at `hi`,
/// clamped; undefined cells are grey (#d9d9d9) and print "n/a".
struct HeatScale {
  double lo = 0.0;
  double hi = 100.0;
};
std::string heatmap_svg(const std::string& title, std::span<const std::string> generators,
                        std::span<const std::optional<double>> values, const HeatScale& scale);
/// "#rrggbb" for a value under the scale; exposed for tests.
std::string heat_color(double value, const HeatScale& scale);

/// Headline numbers of a matrix run, stored in matrix.json so the markdown
/// summary never recomputes anything.
nlohmann::json matrix_summary(const chain::EvasionReport& report);

/// Markdown from the matrix document (and the baseline document if given).
/// Throws MissingArtifacts when the matrix document lacks a summary.
std::string summary_markdown(const nlohmann::json& matrix_doc, const nlohmann::json* baseline_doc);

/// Fixed "%.2f" rendering used by every human-readable artifact.
std::string fmt2(double v);

void write_text(const std::string& path, const std::string& text);

}  // namespace chainae::artifacts
