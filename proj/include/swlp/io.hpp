#pragma once

/// Serialization and run reporting.
///
/// Three versioned formats cover everything the tools read or write:
///   - `swlp-sys-v1`: a system realization as JSON with explicit matrices,
///     Gram forms, grid and seed; instance parameters travel in extension
///     blocks (`heat-v1`, `schrodinger-v1`).
///   - trajectory CSV with header `path,node,time,component,value`
///     (complex states use paired `value_re,value_im` columns);
///   - `swlp-report-v1`: the summary of a run, one record per executed
///     check, with pass/fail recomputable as value <= tolerance.
///
/// All numbers are written in shortest exact decimal form, so identical
/// data produce identical bytes and every file round-trips bit for bit.

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "swlp/heat.hpp"
#include "swlp/schrodinger.hpp"
#include "swlp/system.hpp"

namespace swlp {

inline constexpr const char* kVersion = "0.1.0";

/// Shortest decimal string that parses back to exactly `x` (CSV cells).
std::string format_double(double x);

// ---------------------------------------------------------------------------
// Matrices as JSON

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m);
nlohmann::json matrix_to_json(const Eigen::MatrixXcd& m);  // {"re": .., "im": ..}
Eigen::MatrixXd matrix_from_json(const nlohmann::json& j);
Eigen::MatrixXcd cmatrix_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// System realizations (`swlp-sys-v1`)

/// Full JSON image of a realization.  Systems with adapted (path-dependent)
/// coefficient hooks have no JSON form and are rejected.
nlohmann::json system_to_json(const StochasticSystemRealization<double>& sys,
                              std::uint64_t seed = 0);
nlohmann::json system_to_json(const StochasticSystemRealization<cdouble>& sys,
                              std::uint64_t seed = 0);

/// True when the document stores a complex-scalar system.
bool system_json_is_complex(const nlohmann::json& j);
StochasticSystemRealization<double> system_from_json_real(const nlohmann::json& j);
StochasticSystemRealization<cdouble> system_from_json_complex(const nlohmann::json& j);

/// Instance extension blocks (the grid lives in the enclosing document).
nlohmann::json heat_to_json(const HeatModel& model);
HeatModel heat_from_json(const nlohmann::json& block, const TimeGrid& grid);
nlohmann::json schrodinger_to_json(const SchrodingerModel& model);
SchrodingerModel schrodinger_from_json(const nlohmann::json& block, const TimeGrid& grid);

// ---------------------------------------------------------------------------
// Trajectory CSV

void write_trajectory_csv(std::ostream& os, const Trajectory<double>& traj);
void write_trajectory_csv(std::ostream& os, const Trajectory<cdouble>& traj);

/// Generic curve/record CSV used by the study commands.
void write_csv(std::ostream& os, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows);

// ---------------------------------------------------------------------------
// Experiment configuration

/// Parsed run configuration (schema `swlp-config-v1`).  `canonical` holds
/// the normalized document with every default materialized and the output
/// directory removed; it is what the config hash covers, so a run is
/// identified by what it computes, not where it writes.
struct ExperimentConfig {
  std::string instance = "scalar";  // scalar | heat | schrodinger | custom-json
  TimeGrid grid{1.0, 256};
  int paths = 1000;
  std::uint64_t seed = 1;
  int trials = 8;
  int refinement_levels = 1;
  int cells = 24;   // heat spatial resolution
  int modes = 24;   // schrodinger mode count
  std::string output_dir = ".";
  std::vector<std::string> suites;  // verify selection; empty = all applicable
  std::vector<int> nodes;           // admissibility curve nodes; empty = every node
  nlohmann::json system;            // `swlp-sys-v1` payload for custom-json

  nlohmann::json canonical;
};

/// Strict parse: unknown keys, wrong types and out-of-range values are
/// "bad-config" errors; so is a missing or foreign "schema" tag.
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig load_config_file(const std::string& path);

/// 64-bit FNV-1a over the canonical serialization, as "fnv1a64:<hex>".
std::string config_hash(const nlohmann::json& canonical);

// ---------------------------------------------------------------------------
// Run reports (`swlp-report-v1`)

/// One executed check.  The convention for two-sided or compound checks is
/// to record the distance to the allowed region as `value` (0 when inside)
/// with tolerance 0, and to put the raw numbers in the suite CSV, so the
/// recorded pair always re-evaluates to the recorded verdict.
struct SuiteRecord {
  std::string name;
  double value = 0.0;
  double sem = std::numeric_limits<double>::quiet_NaN();  // NaN -> null
  double tolerance = 0.0;
  bool pass = false;
  double wall_time = 0.0;  // seconds; exempt from reproducibility
};

struct RunReport {
  std::string command;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<SuiteRecord> records;

  bool pass() const;
};

nlohmann::json report_to_json(const RunReport& report);
void write_report(std::ostream& os, const RunReport& report);

}  // namespace swlp
