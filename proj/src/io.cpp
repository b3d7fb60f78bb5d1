#include "swlp/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <ostream>
#include <set>
#include <utility>

namespace swlp {

std::string format_double(double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// Matrices

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json matrix_to_json(const Eigen::MatrixXcd& m) {
  return {{"re", matrix_to_json(Eigen::MatrixXd(m.real()))},
          {"im", matrix_to_json(Eigen::MatrixXd(m.imag()))}};
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  if (!j.is_array()) fail("bad-config", "matrix: expected an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  if (rows == 0) return Eigen::MatrixXd(0, 0);
  const auto cols = static_cast<Eigen::Index>(j.at(0).size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j.at(static_cast<size_t>(i));
    if (static_cast<Eigen::Index>(row.size()) != cols)
      fail("bad-config", "matrix: ragged rows");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row.at(static_cast<size_t>(c)).get<double>();
  }
  return m;
}

Eigen::MatrixXcd cmatrix_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("re") || !j.contains("im"))
    fail("bad-config", "complex matrix: expected {\"re\": .., \"im\": ..}");
  const Eigen::MatrixXd re = matrix_from_json(j.at("re"));
  const Eigen::MatrixXd im = matrix_from_json(j.at("im"));
  if (re.rows() != im.rows() || re.cols() != im.cols())
    fail("bad-config", "complex matrix: re/im shapes differ");
  Eigen::MatrixXcd m(re.rows(), re.cols());
  m.real() = re;
  m.imag() = im;
  return m;
}

// ---------------------------------------------------------------------------
// Systems

namespace {

template <class Scalar>
nlohmann::json any_matrix_to_json(const Matrix<Scalar>& m) {
  if constexpr (detail::is_complex<Scalar>::value)
    return matrix_to_json(Eigen::MatrixXcd(m));
  else
    return matrix_to_json(Eigen::MatrixXd(m));
}

template <class Scalar>
Matrix<Scalar> any_matrix_from_json(const nlohmann::json& j) {
  if constexpr (detail::is_complex<Scalar>::value)
    return cmatrix_from_json(j);
  else
    return matrix_from_json(j);
}

nlohmann::json space_to_json(const DiscreteSpace& sp) {
  return {{"label", sp.label()}, {"gram", matrix_to_json(sp.gram())}};
}

SpacePtr space_from_json(const nlohmann::json& j) {
  const Eigen::MatrixXd gram = matrix_from_json(j.at("gram"));
  return make_space(gram.rows(), gram, j.at("label").get<std::string>());
}

template <class Scalar>
nlohmann::json system_to_json_impl(const StochasticSystemRealization<Scalar>& sys,
                                   std::uint64_t seed) {
  if (sys.f1.adapted || sys.f2.adapted)
    fail("unsupported-regime", "system export: adapted coefficient hooks have no JSON form");
  nlohmann::json j;
  j["schema"] = "swlp-sys-v1";
  j["scalar"] = detail::is_complex<Scalar>::value ? "complex" : "real";
  j["label"] = sys.label;
  j["seed"] = seed;
  j["grid"] = {{"horizon", sys.grid.horizon}, {"steps", sys.grid.steps}};
  j["state"] = space_to_json(*sys.state);
  j["control"] = space_to_json(*sys.control);
  j["observation"] = space_to_json(*sys.observation);

  nlohmann::json gen;
  gen["matrix"] = any_matrix_to_json<Scalar>(sys.generator.matrix);
  gen["group"] = sys.generator.group;
  gen["shift"] = sys.generator.shift;
  if (sys.generator.spectral) {
    const auto& sp = *sys.generator.spectral;
    gen["spectral"] = {{"values", any_matrix_to_json<Scalar>(sp.values)},
                       {"vectors", any_matrix_to_json<Scalar>(sp.vectors)},
                       {"vectors_inv", any_matrix_to_json<Scalar>(sp.vectors_inv)}};
  } else {
    gen["spectral"] = nullptr;
  }
  j["generator"] = std::move(gen);

  j["input"] = any_matrix_to_json<Scalar>(sys.input.matrix);
  j["output"] = any_matrix_to_json<Scalar>(sys.output.matrix);
  for (const char* name : {"f1", "f2"}) {
    const auto& c = name[1] == '1' ? sys.f1 : sys.f2;
    nlohmann::json table = nlohmann::json::array();
    for (const auto& m : c.table) table.push_back(any_matrix_to_json<Scalar>(m));
    j[name] = {{"table", std::move(table)}};
  }
  j["f1_bound"] = sys.f1_bound;
  j["f2_bound"] = sys.f2_bound;
  return j;
}

template <class Scalar>
StochasticSystemRealization<Scalar> system_from_json_impl(const nlohmann::json& j) {
  if (j.value("schema", "") != std::string("swlp-sys-v1"))
    fail("bad-config", "system: expected schema swlp-sys-v1");
  const bool want_complex = detail::is_complex<Scalar>::value;
  if (system_json_is_complex(j) != want_complex)
    fail("bad-config", std::string("system: document stores a ") +
                           (want_complex ? "real" : "complex") + " system");

  StochasticSystemRealization<Scalar> sys;
  sys.label = j.value("label", "");
  sys.grid = TimeGrid(j.at("grid").at("horizon").get<double>(),
                      j.at("grid").at("steps").get<int>());
  sys.state = space_from_json(j.at("state"));
  sys.control = space_from_json(j.at("control"));
  sys.observation = space_from_json(j.at("observation"));

  const auto& gen = j.at("generator");
  sys.generator.space = sys.state;
  sys.generator.matrix = any_matrix_from_json<Scalar>(gen.at("matrix"));
  sys.generator.group = gen.at("group").get<bool>();
  sys.generator.shift = gen.at("shift").get<double>();
  if (gen.contains("spectral") && !gen.at("spectral").is_null()) {
    typename GeneratorRealization<Scalar>::Spectral sp;
    const auto& js = gen.at("spectral");
    sp.values = any_matrix_from_json<Scalar>(js.at("values"));
    sp.vectors = any_matrix_from_json<Scalar>(js.at("vectors"));
    sp.vectors_inv = any_matrix_from_json<Scalar>(js.at("vectors_inv"));
    sys.generator.spectral = std::move(sp);
  }

  sys.input = LinearMap<Scalar>(sys.control, sys.state, any_matrix_from_json<Scalar>(j.at("input")));
  sys.output =
      LinearMap<Scalar>(sys.state, sys.observation, any_matrix_from_json<Scalar>(j.at("output")));
  for (const auto& m : j.at("f1").at("table"))
    sys.f1.table.push_back(any_matrix_from_json<Scalar>(m));
  for (const auto& m : j.at("f2").at("table"))
    sys.f2.table.push_back(any_matrix_from_json<Scalar>(m));
  sys.f1_bound = j.at("f1_bound").get<double>();
  sys.f2_bound = j.at("f2_bound").get<double>();
  sys.validate();
  return sys;
}

}  // namespace

nlohmann::json system_to_json(const StochasticSystemRealization<double>& sys, std::uint64_t seed) {
  return system_to_json_impl(sys, seed);
}
nlohmann::json system_to_json(const StochasticSystemRealization<cdouble>& sys, std::uint64_t seed) {
  return system_to_json_impl(sys, seed);
}

bool system_json_is_complex(const nlohmann::json& j) {
  const std::string kind = j.value("scalar", "");
  if (kind != "real" && kind != "complex")
    fail("bad-config", "system: \"scalar\" must be \"real\" or \"complex\"");
  return kind == "complex";
}

StochasticSystemRealization<double> system_from_json_real(const nlohmann::json& j) {
  try {
    return system_from_json_impl<double>(j);
  } catch (const nlohmann::json::exception& e) {
    fail("bad-config", "system: " + std::string(e.what()));
  }
}
StochasticSystemRealization<cdouble> system_from_json_complex(const nlohmann::json& j) {
  try {
    return system_from_json_impl<cdouble>(j);
  } catch (const nlohmann::json::exception& e) {
    fail("bad-config", "system: " + std::string(e.what()));
  }
}

nlohmann::json heat_to_json(const HeatModel& model) {
  return {{"length", model.length},
          {"cells", model.cells},
          {"drift", matrix_to_json(model.drift)},
          {"noise", matrix_to_json(model.noise)}};
}

HeatModel heat_from_json(const nlohmann::json& block, const TimeGrid& grid) {
  HeatModel model;
  try {
    model.length = block.at("length").get<double>();
    model.cells = block.at("cells").get<int>();
    model.drift = matrix_from_json(block.at("drift"));
    model.noise = matrix_from_json(block.at("noise"));
  } catch (const nlohmann::json::exception& e) {
    fail("bad-config", "heat-v1: " + std::string(e.what()));
  }
  model.grid = grid;
  if (!(model.length > 0.0) || model.cells < 3)
    fail("bad-config", "heat-v1: need positive length and at least three cells");
  return model;
}

nlohmann::json schrodinger_to_json(const SchrodingerModel& model) {
  return {{"modes", model.modes},
          {"control_side", model.control_side},
          {"observation_side", model.observation_side},
          {"drift", matrix_to_json(model.drift)},
          {"noise", matrix_to_json(model.noise)}};
}

SchrodingerModel schrodinger_from_json(const nlohmann::json& block, const TimeGrid& grid) {
  SchrodingerModel model;
  try {
    model.modes = block.at("modes").get<int>();
    model.control_side = block.at("control_side").get<std::vector<int>>();
    model.observation_side = block.value("observation_side", std::vector<int>{});
    model.drift = matrix_from_json(block.at("drift"));
    model.noise = matrix_from_json(block.at("noise"));
  } catch (const nlohmann::json::exception& e) {
    fail("bad-config", "schrodinger-v1: " + std::string(e.what()));
  }
  model.grid = grid;
  return model;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

template <class Scalar>
void trajectory_csv_impl(std::ostream& os, const Trajectory<Scalar>& traj) {
  constexpr bool complex = detail::is_complex<Scalar>::value;
  os << (complex ? "path,node,time,component,value_re,value_im\n"
                 : "path,node,time,component,value\n");
  for (size_t p = 0; p < traj.states.size(); ++p) {
    const auto& y = traj.states[p];
    for (int n = 0; n <= traj.grid.steps; ++n) {
      const std::string t = format_double(traj.grid.node(n));
      for (Eigen::Index c = 0; c < y.rows(); ++c) {
        os << p << ',' << n << ',' << t << ',' << c << ',';
        if constexpr (complex)
          os << format_double(y(c, n).real()) << ',' << format_double(y(c, n).imag());
        else
          os << format_double(y(c, n));
        os << '\n';
      }
    }
  }
}

}  // namespace

void write_trajectory_csv(std::ostream& os, const Trajectory<double>& traj) {
  trajectory_csv_impl(os, traj);
}
void write_trajectory_csv(std::ostream& os, const Trajectory<cdouble>& traj) {
  trajectory_csv_impl(os, traj);
}

void write_csv(std::ostream& os, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
  for (size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << '\n';
  for (const auto& row : rows) {
    if (row.size() != header.size()) fail("bad-argument", "write_csv: ragged row");
    for (size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << format_double(row[i]);
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

const std::set<std::string> kInstances = {"scalar", "heat", "schrodinger", "custom-json"};
const std::set<std::string> kSuites = {"concatenation", "weak", "energy", "multiplier", "duality"};

[[noreturn]] void bad(const std::string& what) { fail("bad-config", what); }

int positive_int(const nlohmann::json& doc, const char* key, int fallback) {
  if (!doc.contains(key)) return fallback;
  const auto& v = doc.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 1)
    bad(std::string("config: \"") + key + "\" must be a positive integer");
  return v.get<int>();
}

ExperimentConfig parse_config_checked(const nlohmann::json& doc) {
  if (!doc.is_object()) bad("config: expected a JSON object");
  if (doc.value("schema", "") != std::string("swlp-config-v1"))
    bad("config: expected \"schema\": \"swlp-config-v1\"");

  static const std::set<std::string> known = {
      "schema", "instance", "grid",  "paths", "seed",   "trials", "refinement_levels",
      "cells",  "modes",    "nodes", "suites", "output_dir", "system"};
  for (const auto& item : doc.items())
    if (!known.count(item.key())) bad("config: unknown key \"" + item.key() + "\"");

  ExperimentConfig cfg;
  cfg.instance = doc.value("instance", std::string("scalar"));
  if (!kInstances.count(cfg.instance))
    bad("config: instance must be scalar, heat, schrodinger or custom-json");

  // Instance-appropriate grid defaults; explicit values win.
  if (cfg.instance == "heat")
    cfg.grid = TimeGrid(0.5, 128);
  else if (cfg.instance == "schrodinger")
    cfg.grid = TimeGrid(1.0, 64);
  if (doc.contains("grid")) {
    const auto& g = doc.at("grid");
    if (!g.is_object() || !g.contains("horizon") || !g.contains("steps"))
      bad("config: grid must be {\"horizon\": T, \"steps\": N}");
    const double horizon = g.at("horizon").get<double>();
    const int steps = positive_int(g, "steps", 0);
    if (!(horizon > 0.0)) bad("config: grid horizon must be positive");
    cfg.grid = TimeGrid(horizon, steps);
  }

  cfg.paths = positive_int(doc, "paths", cfg.paths);
  cfg.trials = positive_int(doc, "trials", cfg.trials);
  cfg.refinement_levels = positive_int(doc, "refinement_levels", cfg.refinement_levels);
  cfg.cells = positive_int(doc, "cells", cfg.cells);
  cfg.modes = positive_int(doc, "modes", cfg.modes);
  if (doc.contains("cells") && cfg.instance != "heat")
    bad("config: \"cells\" applies to the heat instance only");
  if (doc.contains("modes") && cfg.instance != "schrodinger")
    bad("config: \"modes\" applies to the schrodinger instance only");
  if (doc.contains("seed")) {
    if (!doc.at("seed").is_number_unsigned())
      bad("config: \"seed\" must be a nonnegative integer");
    cfg.seed = doc.at("seed").get<std::uint64_t>();
  }
  if (doc.contains("output_dir")) {
    if (!doc.at("output_dir").is_string()) bad("config: \"output_dir\" must be a string");
    cfg.output_dir = doc.at("output_dir").get<std::string>();
  }
  if (doc.contains("suites")) {
    if (!doc.at("suites").is_array()) bad("config: \"suites\" must be an array of names");
    for (const auto& s : doc.at("suites")) {
      if (!s.is_string() || !kSuites.count(s.get<std::string>()))
        bad("config: unknown suite \"" + s.dump() + "\"");
      cfg.suites.push_back(s.get<std::string>());
    }
  }
  if (doc.contains("nodes")) {
    if (!doc.at("nodes").is_array()) bad("config: \"nodes\" must be an array of node indices");
    for (const auto& v : doc.at("nodes")) {
      if (!v.is_number_integer()) bad("config: \"nodes\" entries must be integers");
      const int k = v.get<int>();
      if (k < 1 || k > cfg.grid.steps) bad("config: curve nodes must lie in [1, steps]");
      cfg.nodes.push_back(k);
    }
    if (!std::is_sorted(cfg.nodes.begin(), cfg.nodes.end()))
      bad("config: curve nodes must be nondecreasing");
  }
  if (cfg.instance == "custom-json") {
    if (!doc.contains("system")) bad("config: custom-json needs a \"system\" document");
    cfg.system = doc.at("system");
  } else if (doc.contains("system")) {
    bad("config: \"system\" is only read by the custom-json instance");
  }

  // Canonical image: every effective value, output location excluded.
  nlohmann::json canon;
  canon["schema"] = "swlp-config-v1";
  canon["instance"] = cfg.instance;
  canon["grid"] = {{"horizon", cfg.grid.horizon}, {"steps", cfg.grid.steps}};
  canon["paths"] = cfg.paths;
  canon["seed"] = cfg.seed;
  canon["trials"] = cfg.trials;
  canon["refinement_levels"] = cfg.refinement_levels;
  if (cfg.instance == "heat") canon["cells"] = cfg.cells;
  if (cfg.instance == "schrodinger") canon["modes"] = cfg.modes;
  if (!cfg.suites.empty()) canon["suites"] = cfg.suites;
  if (!cfg.nodes.empty()) canon["nodes"] = cfg.nodes;
  if (cfg.instance == "custom-json") canon["system"] = cfg.system;
  cfg.canonical = std::move(canon);
  return cfg;
}

}  // namespace

ExperimentConfig parse_config(const nlohmann::json& doc) {
  try {
    return parse_config_checked(doc);
  } catch (const nlohmann::json::exception& e) {
    bad("config: " + std::string(e.what()));
  }
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("io", "cannot open config file '" + path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    bad("config: " + std::string(e.what()));
  }
  return parse_config(doc);
}

std::string config_hash(const nlohmann::json& canonical) {
  const std::string text = canonical.dump();
  std::uint64_t h = 1469598103934665603ull;  // FNV offset basis
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;  // FNV prime
  }
  char buf[17];
  for (int i = 15; i >= 0; --i) {
    buf[i] = "0123456789abcdef"[h & 0xf];
    h >>= 4;
  }
  return "fnv1a64:" + std::string(buf, 16);
}

// ---------------------------------------------------------------------------
// Reports

bool RunReport::pass() const {
  return std::all_of(records.begin(), records.end(),
                     [](const SuiteRecord& r) { return r.pass; });
}

nlohmann::json report_to_json(const RunReport& report) {
  nlohmann::json j;
  j["schema"] = "swlp-report-v1";
  j["command"] = report.command;
  j["environment"] = {{"seed", report.seed},
                      {"version", kVersion},
                      {"config_hash", report.config_hash}};
  nlohmann::json suites = nlohmann::json::array();
  for (const auto& r : report.records) {
    // NaN sem serializes as null ("not applicable").
    suites.push_back({{"name", r.name},
                      {"value", r.value},
                      {"sem", r.sem},
                      {"tolerance", r.tolerance},
                      {"pass", r.pass},
                      {"wall_time", r.wall_time}});
  }
  j["suites"] = std::move(suites);
  j["pass"] = report.pass();
  return j;
}

void write_report(std::ostream& os, const RunReport& report) {
  os << report_to_json(report).dump(2) << '\n';
}

}  // namespace swlp
