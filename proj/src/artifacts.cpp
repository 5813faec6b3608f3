#include "chainae/artifacts.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace chainae::artifacts {

using nlohmann::json;

std::string fmt2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

namespace {

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

json pick_json(const std::string& g1, const std::string& g2, double rate) {
  return {{"g1", g1}, {"g2", g2}, {"rate", rate}};
}

json improvement(double combined, double baseline) {
  return baseline > 0.0 ? json(chain::relative_improvement(combined, baseline)) : json(nullptr);
}

// Headline picks over one matrix and its baseline row. First maximum in
// row-major order wins ties.
json picks(std::span<const std::string> gens, std::span<const double> matrix, std::span<const double> baseline) {
  const std::size_t n = gens.size();
  if (n == 0) return {{"best_cell", nullptr}, {"best_pair", nullptr}, {"best_single", nullptr}};
  std::size_t best = 0, best_off = n * n, single = 0;
  for (std::size_t c = 0; c < n * n; ++c) {
    if (matrix[c] > matrix[best]) best = c;
    if (c / n != c % n && (best_off == n * n || matrix[c] > matrix[best_off])) best_off = c;
  }
  for (std::size_t g = 1; g < n; ++g)
    if (baseline[g] > baseline[single]) single = g;
  json out;
  out["best_cell"] = pick_json(gens[best / n], gens[best % n], matrix[best]);
  out["best_single"] = {{"generator", gens[single]}, {"rate", baseline[single]}};
  out["best_cell_vs_best_single"] = improvement(matrix[best], baseline[single]);
  if (best_off < n * n) {
    out["best_pair"] = pick_json(gens[best_off / n], gens[best_off % n], matrix[best_off]);
    out["best_pair_vs_best_single"] = improvement(matrix[best_off], baseline[single]);
  } else {
    out["best_pair"] = nullptr;
    out["best_pair_vs_best_single"] = nullptr;
  }
  return out;
}

}  // namespace

BaselineTable baseline_table(chain::ChainRunner& runner) {
  BaselineTable t;
  for (const auto& s : runner.generators()) t.generators.push_back(s.id());
  for (std::size_t o = 0; o < runner.oracle_count(); ++o) {
    t.oracles.push_back(runner.oracle_id(o));
    t.screened.push_back(runner.screening(o).kept.size());
  }
  for (std::size_t g = 0; g < t.generators.size(); ++g)
    for (std::size_t o = 0; o < t.oracles.size(); ++o) {
      const auto [evasive, total] = runner.baseline_counts(g, o);
      t.evasive.push_back(evasive);
      t.rate.push_back(chain::evasion_rate(evasive, total));
    }
  return t;
}

std::string baseline_csv(const BaselineTable& t) {
  std::ostringstream os;
  os << "generator,oracle,screened,evasive,rate\n";
  for (std::size_t g = 0; g < t.generators.size(); ++g)
    for (std::size_t o = 0; o < t.oracles.size(); ++o) {
      const std::size_t k = g * t.oracles.size() + o;
      os << csv_field(t.generators[g]) << ',' << csv_field(t.oracles[o]) << ',' << t.screened[o] << ','
         << t.evasive[k] << ',' << fmt6(t.rate[k]) << '\n';
    }
  return os.str();
}

json to_json(const BaselineTable& t) {
  json rows = json::array();
  for (std::size_t g = 0; g < t.generators.size(); ++g)
    for (std::size_t o = 0; o < t.oracles.size(); ++o) {
      const std::size_t k = g * t.oracles.size() + o;
      rows.push_back({{"generator", t.generators[g]},
                      {"oracle", t.oracles[o]},
                      {"screened", t.screened[o]},
                      {"evasive", t.evasive[k]},
                      {"rate", t.rate[k]}});
    }
  return {{"generators", t.generators}, {"oracles", t.oracles}, {"rows", std::move(rows)}};
}

std::string matrix_csv(std::span<const std::string> generators, std::span<const std::optional<double>> values) {
  const std::size_t n = generators.size();
  std::ostringstream os;
  os << "g1\\g2";
  for (const auto& g : generators) os << ',' << csv_field(g);
  os << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    os << csv_field(generators[i]);
    for (std::size_t j = 0; j < n; ++j) {
      os << ',';
      if (values[i * n + j]) os << fmt6(*values[i * n + j]);
    }
    os << '\n';
  }
  return os.str();
}

std::string stats_csv(const chain::EvasionReport& r) {
  std::ostringstream os;
  os << "oracle,abs_min,abs_avg,abs_max,rel_min,rel_avg,rel_max,rel_cells\n";
  auto row = [&](const std::string& name, const chain::Stats& a, const chain::Stats& rel) {
    os << csv_field(name) << ',' << fmt6(a.min) << ',' << fmt6(a.avg) << ',' << fmt6(a.max) << ',' << fmt6(rel.min)
       << ',' << fmt6(rel.avg) << ',' << fmt6(rel.max) << ',' << rel.count << '\n';
  };
  for (const auto& o : r.oracles) row(o.oracle, o.absolute, o.relative);
  row("averaged", r.averaged_absolute, r.averaged_relative_stats);
  return os.str();
}

std::string cells_csv(const chain::EvasionReport& r) {
  std::ostringstream os;
  os << "oracle,g1,g2,evasive_1,evasive_2,failed_2,total,rate,baseline,relative\n";
  for (const auto& o : r.oracles)
    for (const auto& c : o.cells) {
      os << csv_field(o.oracle) << ',' << csv_field(c.g1) << ',' << csv_field(c.g2) << ',' << c.evasive_1 << ','
         << c.evasive_2 << ',' << c.failed_2 << ',' << c.total << ',' << fmt6(c.rate) << ',' << fmt6(c.baseline) << ',';
      if (c.relative) os << fmt6(*c.relative);
      os << '\n';
    }
  return os.str();
}

std::string heat_color(double value, const HeatScale& scale) {
  double t = scale.hi > scale.lo ? (value - scale.lo) / (scale.hi - scale.lo) : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const int lo[3] = {0xff, 0xff, 0xff};
  const int hi[3] = {0x08, 0x30, 0x6b};
  char buf[8];
  int c[3];
  for (int k = 0; k < 3; ++k) c[k] = static_cast<int>(std::lround(lo[k] + (hi[k] - lo[k]) * t));
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c[0], c[1], c[2]);
  return buf;
}

std::string heatmap_svg(const std::string& title, std::span<const std::string> generators,
                        std::span<const std::optional<double>> values, const HeatScale& scale) {
  const std::size_t n = generators.size();
  const int cell = 72, left = 120, top = 60;
  const int width = left + static_cast<int>(n) * cell + 20;
  const int height = top + static_cast<int>(n) * cell + 60;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  os << "<text x=\"" << left << "\" y=\"38\" fill=\"#555\">rows: first generator, columns: second generator; scale "
     << fmt2(scale.lo) << " (white) to " << fmt2(scale.hi) << " (dark blue)</text>\n";
  for (std::size_t j = 0; j < n; ++j)
    os << "<text x=\"" << left + static_cast<int>(j) * cell + cell / 2 << "\" y=\"" << top - 6
       << "\" text-anchor=\"middle\">" << xml_escape(generators[j]) << "</text>\n";
  for (std::size_t i = 0; i < n; ++i) {
    const int y = top + static_cast<int>(i) * cell;
    os << "<text x=\"" << left - 8 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"end\">"
       << xml_escape(generators[i]) << "</text>\n";
    for (std::size_t j = 0; j < n; ++j) {
      const int x = left + static_cast<int>(j) * cell;
      const auto& v = values[i * n + j];
      const std::string fill = v ? heat_color(*v, scale) : "#d9d9d9";
      const double t = v && scale.hi > scale.lo ? (*v - scale.lo) / (scale.hi - scale.lo) : 0.0;
      os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\""
         << fill << "\" stroke=\"#ffffff\"/>";
      os << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"middle\" fill=\""
         << (t > 0.55 ? "#ffffff" : "#000000") << "\">" << (v ? fmt2(*v) : "n/a") << "</text>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

json matrix_summary(const chain::EvasionReport& r) {
  json out = picks(r.generators, r.averaged, r.averaged_baseline);
  json per = json::array();
  for (const auto& o : r.oracles) {
    std::vector<double> m;
    for (const auto& c : o.cells) m.push_back(c.rate);
    json p = picks(r.generators, m, o.baseline);
    p["oracle"] = o.oracle;
    per.push_back(std::move(p));
  }
  out["per_oracle"] = std::move(per);
  return out;
}

namespace {

std::string num(const json& v) { return v.is_number() ? fmt2(v.get<double>()) : std::string("n/a"); }

}  // namespace

std::string summary_markdown(const json& m, const json* baseline) {
  if (!m.is_object() || !m.contains("summary") || !m.contains("report"))
    throw Error(ErrorCode::MissingArtifacts, "matrix document has no summary; run `matrix` first");
  const json& s = m.at("summary");
  const json& rep = m.at("report");
  const auto gens = rep.at("generators").get<std::vector<std::string>>();
  std::ostringstream os;
  os << "# Generator chaining results\n\n";
  os << "Rates are percentages of screened samples whose final adversarial example the oracle labels benign. "
        "Relative numbers are (combined - single) / single * 100.\n\n";
  std::vector<std::string> oracles;
  for (const auto& o : rep.at("oracles")) oracles.push_back(o.at("oracle").get<std::string>());
  os << "Oracles: ";
  for (std::size_t i = 0; i < oracles.size(); ++i) os << (i ? ", " : "") << '`' << oracles[i] << '`';
  os << "\n\n## Headline (averaged over oracles)\n\n";
  if (s.at("best_cell").is_null()) {
    os << "No generators were configured.\n";
    return os.str();
  }
  const json& bc = s.at("best_cell");
  const json& bs = s.at("best_single");
  os << "- Best cell: `" << bc.at("g1").get<std::string>() << " -> " << bc.at("g2").get<std::string>() << "` at "
     << num(bc.at("rate")) << "%\n";
  if (!s.at("best_pair").is_null()) {
    const json& bp = s.at("best_pair");
    os << "- Best pair of distinct generators: `" << bp.at("g1").get<std::string>() << " -> "
       << bp.at("g2").get<std::string>() << "` at " << num(bp.at("rate")) << "%\n";
  }
  os << "- Best single generator: `" << bs.at("generator").get<std::string>() << "` at " << num(bs.at("rate"))
     << "%\n";
  os << "- Best cell vs best single: " << num(s.at("best_cell_vs_best_single")) << "% relative\n";
  if (!s.at("best_pair").is_null())
    os << "- Best distinct pair vs best single: " << num(s.at("best_pair_vs_best_single")) << "% relative\n";
  const json& st = rep.at("averaged").at("stats");
  os << "- Absolute rate over all cells: min " << num(st.at("absolute").at("min")) << ", avg "
     << num(st.at("absolute").at("avg")) << ", max " << num(st.at("absolute").at("max")) << "\n";
  os << "- Relative increase over the row's single pass: min " << num(st.at("relative").at("min")) << ", avg "
     << num(st.at("relative").at("avg")) << ", max " << num(st.at("relative").at("max")) << " ("
     << st.at("relative").at("count").get<std::size_t>() << " defined cells)\n\n";

  os << "## Averaged matrix (rows: first generator)\n\n| |";
  for (const auto& g : gens) os << ' ' << g << " |";
  os << " single |\n|---|";
  for (std::size_t j = 0; j <= gens.size(); ++j) os << "---|";
  os << '\n';
  const json& mat = rep.at("averaged").at("matrix");
  const json& base = rep.at("averaged").at("baseline");
  for (std::size_t i = 0; i < gens.size(); ++i) {
    os << "| " << gens[i] << " |";
    for (std::size_t j = 0; j < gens.size(); ++j) os << ' ' << num(mat.at(i * gens.size() + j)) << " |";
    os << ' ' << num(base.at(i)) << " |\n";
  }

  os << "\n## Per oracle\n\n| oracle | screened | best cell | rate | best single | rate | relative |\n"
        "|---|---|---|---|---|---|---|\n";
  const json& per = s.at("per_oracle");
  for (std::size_t o = 0; o < per.size(); ++o) {
    const json& p = per.at(o);
    os << "| " << p.at("oracle").get<std::string>() << " | " << rep.at("oracles").at(o).at("screened").get<std::size_t>()
       << " | " << p.at("best_cell").at("g1").get<std::string>() << " -> "
       << p.at("best_cell").at("g2").get<std::string>() << " | " << num(p.at("best_cell").at("rate")) << " | "
       << p.at("best_single").at("generator").get<std::string>() << " | " << num(p.at("best_single").at("rate"))
       << " | " << num(p.at("best_cell_vs_best_single")) << " |\n";
  }

  if (baseline && baseline->contains("rows")) {
    os << "\n## Single-pass rates\n\n| generator | oracle | screened | evasive | rate |\n|---|---|---|---|---|\n";
    for (const auto& r : baseline->at("rows"))
      os << "| " << r.at("generator").get<std::string>() << " | " << r.at("oracle").get<std::string>() << " | "
         << r.at("screened").get<std::size_t>() << " | " << r.at("evasive").get<std::size_t>() << " | "
         << num(r.at("rate")) << " |\n";
  }
  return os.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error(ErrorCode::MissingFile, "cannot write " + path);
}

}  // namespace chainae::artifacts
