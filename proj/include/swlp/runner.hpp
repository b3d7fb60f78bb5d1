#pragma once

#include <string>

#include "swlp/io.hpp"

namespace swlp {

/// Simulates the configured instance, writes trajectory/sample CSV files into
/// the output directory, and checks the closed-form and residual bands that
/// apply to the instance.
RunReport run_simulate(const ExperimentConfig& cfg);

/// Evaluates the control/observation admissibility curves over the configured
/// nodes, writes them to CSV, and checks monotonicity plus the per-instance
/// stability or closed-form records.
RunReport run_admissibility(const ExperimentConfig& cfg);

/// Runs the structural identity suites (concatenation, weak-residual halving,
/// and the per-instance energy, multiplier, or duality checks).
RunReport run_verify(const ExperimentConfig& cfg);

/// Estimates the well-posedness gain of a PDE instance and checks its
/// stability under one space refinement and one path doubling.
RunReport run_wellposed(const ExperimentConfig& cfg);

/// Dispatches on the command name; unknown names raise a "bad-config" error.
RunReport run_command(const std::string& command, const ExperimentConfig& cfg);

}  // namespace swlp
