#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "chainae/chain.hpp"
#include "chainae/corpus.hpp"
#include "chainae/experiment.hpp"
#include "chainae/pe.hpp"
#include "chainae/transforms.hpp"

namespace py = pybind11;
using namespace chainae;

namespace {

Bytes to_bytes(const py::bytes& b) {
  const std::string_view s = b;
  return Bytes(s.begin(), s.end());
}

py::bytes from_bytes(const Bytes& b) { return py::bytes(reinterpret_cast<const char*>(b.data()), b.size()); }

// JSON crosses the boundary as text; the Python side wraps it with json.loads.
nlohmann::json parse_json(const std::string& text) {
  try {
    return text.empty() ? nlohmann::json::object() : nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigError, e.what());
  }
}

py::dict describe(const py::bytes& data) {
  const pe::Image img = pe::parse(to_bytes(data));
  py::list sections;
  for (const auto& s : img.sections) {
    py::dict d;
    d["name"] = s.name_string();
    d["virtual_address"] = s.virtual_address;
    d["virtual_size"] = s.virtual_size;
    d["raw_offset"] = s.raw_offset;
    d["raw_size"] = s.raw_size;
    d["executable"] = s.executable();
    sections.append(d);
  }
  py::dict out;
  out["entry_point"] = img.optional.entry_point;
  out["timestamp"] = img.coff.timestamp;
  out["checksum"] = img.optional.checksum;
  out["e_lfanew"] = img.dos.e_lfanew();
  out["overlay_size"] = img.overlay.size();
  out["file_size"] = img.file_size();
  out["sections"] = sections;
  return out;
}

py::bytes apply_random(const py::bytes& data, const std::string& kind, std::uint64_t seed, std::size_t max_file_size) {
  const pe::Image img = pe::parse(to_bytes(data));
  Rng rng(seed);
  const auto action = transforms::sample_action(transforms::action_kind_from_string(kind), img, rng);
  return from_bytes(pe::serialize(transforms::apply(img, action, {max_file_size})));
}

std::string run(const std::string& verb, const std::string& config, const std::string& out) {
  auto cfg = experiment::experiment_from_json(parse_json(config));
  cfg.out = out;
  if (verb == "report") return experiment::cmd_report(out);
  experiment::Experiment exp(cfg);
  if (verb == "corpus") {
    exp.cmd_corpus();
    return "{}";
  }
  if (verb == "train") return exp.cmd_train().dump();
  if (verb == "baseline") return artifacts::to_json(exp.cmd_baseline()).dump();
  if (verb == "matrix") return chain::to_json(exp.cmd_matrix()).dump();
  throw Error(ErrorCode::ConfigError, "unknown verb '" + verb + "'");
}

}  // namespace

PYBIND11_MODULE(_chainae, m) {
  m.doc() = "Generator chaining for adversarial PE examples: core bindings.";

  // Messages start with the error code name, e.g. "MalformedHeader: ...".
  py::register_exception<Error>(m, "ChainaeError");

  m.def("sha256_hex", [](const py::bytes& b) { return sha256_hex(to_bytes(b)); });
  m.def("evasion_rate", &chain::evasion_rate, py::arg("misclassified"), py::arg("total"));
  m.def("relative_improvement", &chain::relative_improvement, py::arg("combined"), py::arg("baseline"));

  m.def("parse", &describe, py::arg("data"), "Header fields and section table of a PE32 file.");
  m.def("round_trip", [](const py::bytes& b) { return from_bytes(pe::serialize(pe::parse(to_bytes(b)))); });
  m.def("validate", [](const py::bytes& b) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& v : pe::validate(pe::parse(to_bytes(b)))) out.emplace_back(v.field, v.message);
    return out;
  });
  m.def("code_fingerprint", [](const py::bytes& b) { return pe::code_fingerprint(pe::parse(to_bytes(b))); });
  m.def("compute_checksum", [](const py::bytes& b) { return pe::compute_checksum(to_bytes(b)); });

  m.def("action_kinds", [] {
    std::vector<std::string> out;
    for (auto k : transforms::kAllActionKinds) out.emplace_back(transforms::to_string(k));
    return out;
  });
  m.def("apply_random", &apply_random, py::arg("data"), py::arg("kind"), py::arg("seed"),
        py::arg("max_file_size") = 0, "Draws one action of `kind` and applies it.");

  m.def("generate_sample", [](const std::string& label, std::uint64_t seed) {
    return from_bytes(corpus::generate_sample(corpus::ContentModel::standard(), corpus::label_from_string(label), seed));
  }, py::arg("label"), py::arg("seed"));

  m.def("default_config", [] { return experiment::to_json(experiment::default_experiment()).dump(); });
  m.def("run", &run, py::arg("verb"), py::arg("config"), py::arg("out"),
        py::call_guard<py::gil_scoped_release>(),
        "Runs one experiment verb; returns its JSON result as text (markdown for report).");
}
