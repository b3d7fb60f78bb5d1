#include "swlp/runner.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "swlp/error.hpp"
#include "swlp/heat.hpp"
#include "swlp/schrodinger.hpp"
#include "swlp/stochastics.hpp"
#include "swlp/system.hpp"

namespace swlp {
namespace {

namespace fs = std::filesystem;

constexpr double kPi = 3.141592653589793238462643383279502884;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Simulate writes at most this many paths to trajectory.csv; the statistics
// always use the full ensemble.  Counter-based sampling makes the capped
// ensemble an exact prefix of the full one.
constexpr int kTrajectoryPathCap = 64;

// Residual halving under one coupled time refinement must land in this
// ratio window (2 is the nominal first-order rate).
constexpr double kRatioLow = 1.3;
constexpr double kRatioHigh = 2.8;

// Dropping any term of the multiplier identity must inflate the residual
// at least this much.
constexpr double kAblationFactor = 10.0;

// Sampled gains may move at most 25% under one space refinement or one
// path doubling.
constexpr double kGainDrift = 0.25;

constexpr double kScalarNoise = 0.5;  // sigma of the scalar test equation

class Timer {
 public:
  Timer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

// Band checks compare |value| against 3 sem + width; a NaN sem (single
// path) contributes nothing instead of poisoning the comparison.
double band(double sem, double width) {
  return 3.0 * (std::isnan(sem) ? 0.0 : sem) + width;
}

SuiteRecord make_record(std::string name, double value, double sem, double tol, double secs) {
  SuiteRecord r;
  r.name = std::move(name);
  r.value = value;
  r.sem = sem;
  r.tolerance = tol;
  r.pass = value <= tol;
  r.wall_time = secs;
  return r;
}

// ---------------------------------------------------------------------------
// Output plumbing

fs::path prepare_output_dir(const std::string& dir) {
  const fs::path p = dir.empty() ? fs::path(".") : fs::path(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) fail("bad-config", "output directory '" + dir + "' cannot be created: " + ec.message());
  const fs::path probe = p / ".swlp-write-probe";
  {
    std::ofstream f(probe, std::ios::binary | std::ios::trunc);
    if (!f || !(f << "ok\n")) fail("bad-config", "output directory '" + dir + "' is not writable");
  }
  fs::remove(probe, ec);
  return p;
}

std::ofstream open_output(const fs::path& file) {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) fail("io", "cannot open '" + file.string() + "' for writing");
  return os;
}

void save_csv(const fs::path& file, const std::vector<std::string>& header,
              const std::vector<std::vector<double>>& rows) {
  auto os = open_output(file);
  write_csv(os, header, rows);
}

RunReport begin_report(const std::string& command, const ExperimentConfig& cfg) {
  RunReport rep;
  rep.command = command;
  rep.seed = cfg.seed;
  rep.config_hash = config_hash(cfg.canonical);
  return rep;
}

void finish_report(const fs::path& out, const RunReport& rep) {
  auto os = open_output(out / "summary.json");
  write_report(os, rep);
}

// ---------------------------------------------------------------------------
// Refinement couplings shared by the halving suites

template <class Scalar>
InputSignal<Scalar> refine_input(const InputSignal<Scalar>& u) {
  if (u.is_zero()) return u;
  Matrix<Scalar> fine(u.values.rows(), 2 * u.values.cols());
  for (Index n = 0; n < u.values.cols(); ++n) {
    fine.col(2 * n) = u.values.col(n);
    fine.col(2 * n + 1) = u.values.col(n);
  }
  return {u.space, std::move(fine)};
}

template <class Scalar>
std::vector<Matrix<Scalar>> refine_table(const std::vector<Matrix<Scalar>>& table, int steps) {
  if (table.size() != static_cast<size_t>(steps)) return table;  // empty or constant
  std::vector<Matrix<Scalar>> fine;
  fine.reserve(2 * table.size());
  for (const auto& m : table) {
    fine.push_back(m);
    fine.push_back(m);
  }
  return fine;
}

/// Same spatial data on the halved time step; per-step coefficient tables
/// stay piecewise constant over the original intervals.
template <class Scalar>
StochasticSystemRealization<Scalar> refine_time(const StochasticSystemRealization<Scalar>& sys) {
  StochasticSystemRealization<Scalar> fine = sys;
  fine.grid = sys.grid.refined();
  fine.f1.table = refine_table(fine.f1.table, sys.grid.steps);
  fine.f2.table = refine_table(fine.f2.table, sys.grid.steps);
  return fine;
}

// Dimensional scale of one weak-residual band: the residual aggregates
// <y, A* psi> and coefficient terms, so the O(dt) constant rides on these
// norms rather than on the raw state size.
template <class Scalar>
double weak_scale(const StochasticSystemRealization<Scalar>& sys, const Vector<Scalar>& psi) {
  const LinearMap<Scalar> a_map(sys.state, sys.state, sys.generator.matrix);
  const Vector<Scalar> astar_psi = adjoint(a_map).matrix * psi;
  return 1.0 + norm<Scalar>(*sys.state, astar_psi) / norm<Scalar>(*sys.state, psi) +
         sys.f1_bound + sys.f2_bound;
}

// ---------------------------------------------------------------------------
// Instance presets

StochasticSystemRealization<double> scalar_system(const TimeGrid& grid) {
  StochasticSystemRealization<double> sys;
  sys.state = make_euclidean(1, "scalar-state");
  sys.control = make_euclidean(1, "scalar-control");
  sys.observation = make_euclidean(1, "scalar-observation");
  sys.generator.space = sys.state;
  sys.generator.matrix = Eigen::MatrixXd::Constant(1, 1, -1.0);
  GeneratorRealization<double>::Spectral sp;
  sp.values = Eigen::VectorXd::Constant(1, -1.0);
  sp.vectors = Eigen::MatrixXd::Identity(1, 1);
  sp.vectors_inv = sp.vectors;
  sys.generator.spectral = std::move(sp);
  sys.generator.group = true;
  sys.input = LinearMap<double>(sys.control, sys.state, Eigen::MatrixXd::Identity(1, 1));
  sys.output = LinearMap<double>(sys.state, sys.observation, Eigen::MatrixXd::Identity(1, 1));
  sys.f2 = CoefficientProcess<double>::constant(Eigen::MatrixXd::Constant(1, 1, kScalarNoise));
  sys.f2_bound = kScalarNoise;
  sys.grid = grid;
  sys.label = "scalar-ou";
  return sys;
}

HeatModel heat_preset(const TimeGrid& grid, int cells, bool with_coeffs) {
  const std::function<double(double)> a =
      with_coeffs ? std::function<double(double)>([](double) { return 1.0; })
                  : std::function<double(double)>();
  const std::function<double(double)> b =
      with_coeffs ? std::function<double(double)>([](double) { return 0.3; })
                  : std::function<double(double)>();
  return make_heat_model(1.0, cells, grid, a, b);
}

Eigen::VectorXd heat_initial(const HeatModel& model) {
  const Eigen::VectorXd x = model.centers();
  return (0.8 + 0.3 * (kPi * x.array()).sin()).matrix();
}

InputSignal<double> heat_drive(const StochasticSystemRealization<double>& sys) {
  Eigen::MatrixXd vals(2, sys.grid.steps);
  vals.row(0).setConstant(0.3);
  vals.row(1).setConstant(-0.2);
  return {sys.control, std::move(vals)};
}

SchrodingerModel schrodinger_preset(const TimeGrid& grid, int modes, bool with_noise) {
  const std::function<double(double)> b =
      with_noise ? std::function<double(double)>([](double x) { return 0.3 * std::sin(x); })
                 : std::function<double(double)>();
  return make_schrodinger_model(modes, grid, {0}, {}, b);
}

Eigen::VectorXcd schrodinger_initial(int modes) {
  Eigen::VectorXcd y0 = Eigen::VectorXcd::Zero(modes);
  y0(0) = cdouble(1.0, 0.0);
  y0(1) = cdouble(0.5, 0.0);
  return y0;
}

InputSignal<cdouble> schrodinger_drive(const StochasticSystemRealization<cdouble>& sys) {
  Matrix<cdouble> vals(sys.control->dim(), sys.grid.steps);
  for (int n = 0; n < sys.grid.steps; ++n)
    vals.col(n).setConstant(0.2 * std::exp(cdouble(0.0, sys.grid.node(n))));
  return {sys.control, std::move(vals)};
}

Eigen::VectorXcd schrodinger_test_vector(int modes) {
  Eigen::VectorXcd psi = Eigen::VectorXcd::Zero(modes);
  psi(0) = cdouble(1.0, 0.0);
  psi(1) = cdouble(1.0, 0.0);
  return psi;
}

template <class Scalar>
StochasticSystemRealization<Scalar> custom_system(const ExperimentConfig& cfg);

template <>
StochasticSystemRealization<double> custom_system<double>(const ExperimentConfig& cfg) {
  auto sys = system_from_json_real(cfg.system);
  sys.grid = cfg.grid;
  sys.validate();
  return sys;
}

template <>
StochasticSystemRealization<cdouble> custom_system<cdouble>(const ExperimentConfig& cfg) {
  auto sys = system_from_json_complex(cfg.system);
  sys.grid = cfg.grid;
  sys.validate();
  return sys;
}

template <class Scalar>
Vector<Scalar> custom_initial(const StochasticSystemRealization<Scalar>& sys,
                              const ExperimentConfig& cfg) {
  return detail::unit_state_draw<Scalar>(*sys.state, cfg.seed, streams::kAuxiliaryFirst + 5, 0);
}

template <class Scalar>
Vector<Scalar> custom_test_vector(const StochasticSystemRealization<Scalar>& sys,
                                  const ExperimentConfig& cfg) {
  return detail::unit_state_draw<Scalar>(*sys.state, cfg.seed, streams::kAuxiliaryFirst + 6, 0);
}

// Deterministic nonzero probe signal for the concatenation identity.
template <class Scalar>
InputSignal<Scalar> probe_input(const StochasticSystemRealization<Scalar>& sys) {
  Matrix<Scalar> vals(sys.control->dim(), sys.grid.steps);
  for (Index i = 0; i < vals.rows(); ++i)
    for (int n = 0; n < sys.grid.steps; ++n)
      vals(i, n) = Scalar(0.7 * std::cos(sys.grid.node(n) * double(i + 1)) + 0.2);
  return {sys.control, std::move(vals)};
}

// ---------------------------------------------------------------------------
// simulate

template <class Scalar>
void write_capped_trajectory(const fs::path& out, const StochasticSystemRealization<Scalar>& sys,
                             const Vector<Scalar>& y0, const InputSignal<Scalar>& u,
                             const ExperimentConfig& cfg) {
  const int csv_paths = std::min(cfg.paths, kTrajectoryPathCap);
  const auto ens = sample_brownian(sys.grid, csv_paths, cfg.seed);
  const auto traj = mild_solve_stepping(sys, y0, u, ens);
  auto os = open_output(out / "trajectory.csv");
  write_trajectory_csv(os, traj);
}

/// Weak-residual band shared by every instance: E|R(T)| within
/// 3 sem + 5 dt scale.  Returns the per-path moduli for the sample export.
template <class Scalar>
Eigen::VectorXd weak_record(RunReport& rep, const StochasticSystemRealization<Scalar>& sys,
                            const Vector<Scalar>& y0, const InputSignal<Scalar>& u,
                            const Vector<Scalar>& psi, const BrownianEnsemble& ens) {
  Timer tm;
  const Vector<Scalar> r = weak_residual_terminal(sys, y0, u, ens, psi);
  const Eigen::VectorXd samples = r.cwiseAbs();
  const McEstimate est = mc_estimate(samples);
  const double width = 5.0 * sys.grid.dt() * weak_scale(sys, psi);
  rep.records.push_back(
      make_record("weak-residual", est.mean, est.sem, band(est.sem, width), tm.seconds()));
  return samples;
}

void simulate_scalar(RunReport& rep, const fs::path& out, const ExperimentConfig& cfg) {
  const auto sys = scalar_system(cfg.grid);
  const Eigen::VectorXd y0 = Eigen::VectorXd::Ones(1);
  const InputSignal<double> u{sys.control, {}};
  write_capped_trajectory(out, sys, y0, u, cfg);

  const auto ens = sample_brownian(cfg.grid, cfg.paths, cfg.seed);

  // Terminal second moment against the closed form E Y(T)^2 =
  // exp((-2 + sigma^2) T) of the linear test equation.
  Timer tm;
  Eigen::VectorXd terminal_sq(cfg.paths);
  detail::stepping_walk(
      sys, [&](Index) { return y0; }, u, ens,
      [&](Index p, int n, const Eigen::VectorXd& y) {
        if (n == cfg.grid.steps) terminal_sq(p) = y.squaredNorm();
      });
  const McEstimate m2 = mc_estimate(terminal_sq);
  const double exact = std::exp((-2.0 + kScalarNoise * kScalarNoise) * cfg.grid.horizon);
  rep.records.push_back(make_record("ou-second-moment", std::abs(m2.mean - exact), m2.sem,
                                    band(m2.sem, 5.0 * cfg.grid.dt()), tm.seconds()));

  const Eigen::VectorXd psi = Eigen::VectorXd::Ones(1);
  const Eigen::VectorXd weak_abs = weak_record(rep, sys, y0, u, psi, ens);

  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<size_t>(cfg.paths));
  for (int p = 0; p < cfg.paths; ++p)
    rows.push_back({double(p), terminal_sq(p), weak_abs(p)});
  save_csv(out / "samples.csv", {"path", "terminal_sq", "weak_abs"}, rows);
}

void simulate_heat(RunReport& rep, const fs::path& out, const ExperimentConfig& cfg) {
  const HeatModel model = heat_preset(cfg.grid, cfg.cells, true);
  const auto sys = build_heat_system(model);
  const Eigen::VectorXd y0 = heat_initial(model);
  const InputSignal<double> u = heat_drive(sys);
  write_capped_trajectory(out, sys, y0, u, cfg);

  const auto ens = sample_brownian(cfg.grid, cfg.paths, cfg.seed);

  const Eigen::VectorXd x = model.centers();
  const Eigen::VectorXd psi = (kPi * x.array()).cos().matrix();
  const Eigen::VectorXd weak_abs = weak_record(rep, sys, y0, u, psi, ens);

  Timer tm;
  const EnergyBalance bal = energy_identity_residual(model, y0, u, ens);
  rep.records.push_back(make_record("energy-identity", std::abs(bal.residual.mean),
                                    bal.residual.sem,
                                    band(bal.residual.sem, 5.0 * cfg.grid.dt()), tm.seconds()));

  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<size_t>(cfg.paths));
  for (int p = 0; p < cfg.paths; ++p)
    rows.push_back({double(p), weak_abs(p), bal.per_path(p)});
  save_csv(out / "samples.csv", {"path", "weak_abs", "energy_gap"}, rows);
}

void simulate_schrodinger(RunReport& rep, const fs::path& out, const ExperimentConfig& cfg) {
  const SchrodingerModel model = schrodinger_preset(cfg.grid, cfg.modes, true);
  const auto sys = build_schrodinger_system(model);
  const Eigen::VectorXcd y0 = schrodinger_initial(cfg.modes);
  const InputSignal<cdouble> u = schrodinger_drive(sys);
  write_capped_trajectory(out, sys, y0, u, cfg);

  const auto ens = sample_brownian(cfg.grid, cfg.paths, cfg.seed);
  const Eigen::VectorXcd psi = schrodinger_test_vector(cfg.modes);
  const Eigen::VectorXd weak_abs = weak_record(rep, sys, y0, u, psi, ens);

  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<size_t>(cfg.paths));
  for (int p = 0; p < cfg.paths; ++p) rows.push_back({double(p), weak_abs(p)});
  save_csv(out / "samples.csv", {"path", "weak_abs"}, rows);
}

template <class Scalar>
void simulate_custom(RunReport& rep, const fs::path& out, const ExperimentConfig& cfg) {
  const auto sys = custom_system<Scalar>(cfg);
  const Vector<Scalar> y0 = custom_initial(sys, cfg);
  const InputSignal<Scalar> u{sys.control, {}};
  write_capped_trajectory(out, sys, y0, u, cfg);

  const auto ens = sample_brownian(cfg.grid, cfg.paths, cfg.seed);
  const Vector<Scalar> psi = custom_test_vector(sys, cfg);
  const Eigen::VectorXd weak_abs = weak_record(rep, sys, y0, u, psi, ens);

  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<size_t>(cfg.paths));
  for (int p = 0; p < cfg.paths; ++p) rows.push_back({double(p), weak_abs(p)});
  save_csv(out / "samples.csv", {"path", "weak_abs"}, rows);
}

// ---------------------------------------------------------------------------
// admissibility

template <class Scalar>
void admissibility_records(RunReport& rep, std::vector<std::vector<double>>& rows,
                           const ExperimentConfig& cfg,
                           const StochasticSystemRealization<Scalar>& sys) {
  Timer tm;
  std::vector<int> nodes = cfg.nodes;
  if (nodes.empty()) {
    nodes.resize(static_cast<size_t>(sys.grid.steps));
    std::iota(nodes.begin(), nodes.end(), 1);
  }
  std::vector<double> cb, cc;
  cb.reserve(nodes.size());
  cc.reserve(nodes.size());
  for (int k : nodes) {
    cb.push_back(control_admissibility_constant(sys, k));
    cc.push_back(observation_admissibility_constant(sys, k));
    rows.push_back({0.0, double(k), sys.grid.node(k), cb.back(), cc.back()});
  }
  double worst_b = 0.0, worst_c = 0.0;
  for (size_t i = 0; i + 1 < nodes.size(); ++i) {
    worst_b = std::max(worst_b, cb[i] - cb[i + 1]);
    worst_c = std::max(worst_c, cc[i] - cc[i + 1]);
  }
  const double secs = tm.seconds();
  rep.records.push_back(make_record("control-monotone", worst_b, kNaN, 1e-12, secs));
  rep.records.push_back(make_record("observation-monotone", worst_c, kNaN, 1e-12, 0.0));

  if (cfg.instance == "scalar") {
    Timer ts;
    double worst = 0.0;
    for (size_t i = 0; i < nodes.size(); ++i) {
      const double exact = 0.5 * (1.0 - std::exp(-2.0 * sys.grid.node(nodes[i])));
      worst = std::max({worst, std::abs(cb[i] - exact), std::abs(cc[i] - exact)});
    }
    rep.records.push_back(
        make_record("scalar-closed-form", worst, kNaN, 5.0 * sys.grid.dt(), ts.seconds()));
  }
}

/// Terminal admissibility constants on a refined realization must stay
/// within 25% of the base values (discretization independence; the heat
/// instance refines space, the boundary-spectral one refines time, where
/// its quadrature error lives).
template <class Scalar>
void admissibility_refinement(RunReport& rep, std::vector<std::vector<double>>& rows,
                              const StochasticSystemRealization<Scalar>& base,
                              const StochasticSystemRealization<Scalar>& fine) {
  Timer tm;
  const int n = base.grid.steps;
  const int nf = fine.grid.steps;
  const double cb0 = control_admissibility_constant(base, n);
  const double cc0 = observation_admissibility_constant(base, n);
  const double cb1 = control_admissibility_constant(fine, nf);
  const double cc1 = observation_admissibility_constant(fine, nf);
  rows.push_back({1.0, double(nf), fine.grid.node(nf), cb1, cc1});
  const double drift = std::max(std::abs(cb1 / cb0 - 1.0), std::abs(cc1 / cc0 - 1.0));
  rep.records.push_back(make_record("refinement-stable", drift, kNaN, kGainDrift, tm.seconds()));
}

// ---------------------------------------------------------------------------
// verify suites

std::vector<std::string> select_suites(const ExperimentConfig& cfg,
                                       const std::vector<std::string>& applicable) {
  if (cfg.suites.empty()) return applicable;
  for (const auto& s : cfg.suites)
    if (std::find(applicable.begin(), applicable.end(), s) == applicable.end())
      fail("bad-config", "suite '" + s + "' does not apply to instance '" + cfg.instance + "'");
  return cfg.suites;
}

template <class Scalar>
void concatenation_suite(RunReport& rep, const fs::path& out,
                         const StochasticSystemRealization<Scalar>& sys) {
  Timer tm;
  const int steps = sys.grid.steps;
  if (steps < 4) fail("bad-config", "concatenation suite needs at least 4 time steps");
  const InputSignal<Scalar> u = probe_input(sys);
  const std::array<std::pair<int, int>, 4> pairs{
      {{steps / 4, steps / 2}, {steps / 4, steps}, {steps / 2, steps}, {3 * steps / 4, steps}}};
  std::vector<std::vector<double>> rows;
  double worst = 0.0;
  for (const auto& [m, k] : pairs) {
    const double gap = concatenation_check(sys, m, k, u);
    worst = std::max(worst, gap);
    rows.push_back({double(m), double(k), gap});
  }
  save_csv(out / "concatenation.csv", {"m", "k", "gap"}, rows);
  rep.records.push_back(make_record("concatenation", worst, kNaN, 1e-10, tm.seconds()));
}

template <class Scalar>
void weak_suite(RunReport& rep, const fs::path& out, const ExperimentConfig& cfg,
                StochasticSystemRealization<Scalar> sys, const Vector<Scalar>& y0,
                InputSignal<Scalar> u, const Vector<Scalar>& psi) {
  Timer tm;
  const int levels = std::max(1, cfg.refinement_levels) + 1;
  BrownianEnsemble ens = sample_brownian(sys.grid, cfg.paths, cfg.seed);
  std::vector<double> resid;
  std::vector<std::vector<double>> rows;
  for (int l = 0; l < levels; ++l) {
    const Vector<Scalar> r = weak_residual_terminal(sys, y0, u, ens, psi);
    const McEstimate est = mc_estimate(r.cwiseAbs());
    resid.push_back(est.mean);
    rows.push_back({double(l), sys.grid.dt(), est.mean, est.sem});
    if (l + 1 < levels) {
      sys = refine_time(sys);
      ens = refine_brownian(ens);
      u = refine_input(u);
    }
  }
  save_csv(out / "weak.csv", {"level", "dt", "residual", "sem"}, rows);
  double worst = 0.0;
  for (size_t i = 0; i + 1 < resid.size(); ++i) {
    const double ratio = resid[i] / resid[i + 1];
    worst = std::max({worst, kRatioLow - ratio, ratio - kRatioHigh});
  }
  rep.records.push_back(make_record("weak-halving", std::max(0.0, worst), kNaN, 0.0, tm.seconds()));
}

void energy_suite(RunReport& rep, const fs::path& out, const ExperimentConfig& cfg) {
  std::vector<std::vector<double>> rows;
  const double dt = cfg.grid.dt();

  // Coefficient-free sub-case: the balance is deterministic, so one path
  // suffices and the residual must halve along the time-refinement chain.
  Timer t_det;
  const int levels = std::max(1, cfg.refinement_levels) + 1;
  std::vector<double> dres;
  TimeGrid g = cfg.grid;
  for (int l = 0; l < levels; ++l) {
    const HeatModel m = heat_preset(g, cfg.cells, false);
    const auto sys = build_heat_system(m);
    const EnergyBalance bal =
        energy_identity_residual(m, heat_initial(m), heat_drive(sys), sample_brownian(g, 1, cfg.seed));
    dres.push_back(std::abs(bal.residual.mean));
    rows.push_back({0.0, double(l), g.dt(), dres.back(), 0.0, bal.mean_lhs, bal.mean_rhs});
    g = g.refined();
  }
  rep.records.push_back(make_record("energy-band-det", dres[0], kNaN, 5.0 * dt, t_det.seconds()));
  double worst = 0.0;
  for (size_t i = 0; i + 1 < dres.size(); ++i)
    worst = std::max(worst, kRatioLow - dres[i] / dres[i + 1]);
  rep.records.push_back(make_record("energy-halving", std::max(0.0, worst), kNaN, 0.0, 0.0));

  // Reaction + noise sub-case: Monte Carlo band at the base resolution.
  Timer t_noise;
  const HeatModel noisy = heat_preset(cfg.grid, cfg.cells, true);
  const auto sys = build_heat_system(noisy);
  const auto ens = sample_brownian(cfg.grid, cfg.paths, cfg.seed);
  const EnergyBalance bal = energy_identity_residual(noisy, heat_initial(noisy), heat_drive(sys), ens);
  rows.push_back(
      {1.0, 0.0, dt, std::abs(bal.residual.mean), bal.residual.sem, bal.mean_lhs, bal.mean_rhs});
  rep.records.push_back(make_record("energy-band-noise", std::abs(bal.residual.mean),
                                    bal.residual.sem, band(bal.residual.sem, 5.0 * dt),
                                    t_noise.seconds()));
  save_csv(out / "energy.csv",
           {"noise_case", "level", "dt", "residual", "sem", "mean_lhs", "mean_rhs"}, rows);
}

void multiplier_suite(RunReport& rep, const fs::path& out, const ExperimentConfig& cfg) {
  std::vector<std::vector<double>> rows;

  // Closed-form two-mode field: the residual must decay with at least
  // first order across two coupled refinements.
  Timer t_det;
  MultiplierFieldSpec det;
  det.points = 257;
  det.deterministic = [](double x, double t) {
    return std::exp(cdouble(0.0, x - t)) + 0.5 * std::exp(cdouble(0.0, 2.0 * x - 4.0 * t));
  };
  det.mu = [](double x) { return x / kPi; };
  const MultiplierStudy dstudy = multiplier_identity_residual(det, cfg.grid, nullptr);
  for (int l = 0; l < 3; ++l) {
    const int pts = ((det.points - 1) << l) + 1;
    const int steps = cfg.grid.steps << l;
    rows.push_back({0.0, double(l), double(pts), double(steps), dstudy.residuals[size_t(l)], 0.0});
  }
  rep.records.push_back(make_record("multiplier-det-order", std::max(0.0, 1.0 - dstudy.order),
                                    kNaN, 0.0, t_det.seconds()));

  // Dropping any single term must inflate the residual by 10x or more.
  Timer t_abl;
  const double base_res = dstudy.base.residual();
  double min_ratio = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 6; ++i)
    min_ratio = std::min(min_ratio, dstudy.base.ablated_residual(i) / base_res);
  rep.records.push_back(make_record("multiplier-ablation",
                                    std::max(0.0, kAblationFactor - min_ratio), kNaN, 0.0,
                                    t_abl.seconds()));

  // Semimartingale field f(x) W(t) + g(x) t: Monte Carlo band.
  Timer t_st;
  MultiplierFieldSpec st;
  st.points = 193;
  st.brownian_profile = [](double x) { return std::exp(cdouble(0.0, x)); };
  st.drift_profile = [](double x) { return cdouble(0.3 * std::sin(2.0 * x), 0.0); };
  st.mu = [](double x) { return x / kPi; };
  const auto ens = sample_brownian(cfg.grid, cfg.paths, cfg.seed);
  const MultiplierStudy sstudy = multiplier_identity_residual(st, cfg.grid, &ens);
  for (int l = 0; l < 3; ++l) {
    const int pts = ((st.points - 1) << l) + 1;
    const int steps = cfg.grid.steps << l;
    rows.push_back({1.0, double(l), double(pts), double(steps), sstudy.residuals[size_t(l)],
                    l == 0 ? sstudy.sem : 0.0});
  }
  rep.records.push_back(make_record("multiplier-stoch-band", sstudy.residual, sstudy.sem,
                                    band(sstudy.sem, 5.0 * cfg.grid.dt()), t_st.seconds()));
  save_csv(out / "multiplier.csv", {"kind", "level", "points", "steps", "residual", "sem"}, rows);
}

void duality_suite(RunReport& rep, const fs::path& out, const ExperimentConfig& cfg) {
  std::vector<std::vector<double>> rows;
  const double dt = cfg.grid.dt();
  const Eigen::VectorXcd y0 = schrodinger_initial(cfg.modes);
  Eigen::VectorXcd vT = Eigen::VectorXcd::Zero(cfg.modes);
  vT(0) = cdouble(0.3, 0.4);
  vT(1) = cdouble(1.0, 0.0);
  vT(2) = cdouble(0.0, -0.5);

  // Coefficient-free flow is unitary: the pairing gap must vanish pathwise.
  Timer t_u;
  const SchrodingerModel unit = schrodinger_preset(cfg.grid, cfg.modes, false);
  const InputSignal<cdouble> u = schrodinger_drive(build_schrodinger_system(unit));
  const auto ens_u = sample_brownian(cfg.grid, std::min(cfg.paths, 16), cfg.seed);
  const DualityEstimate du = duality_residual(unit, y0, u, vT, ens_u);
  rows.push_back({0.0, 0.0, dt, du.residual, du.sem, du.max_pathwise});
  rep.records.push_back(make_record("duality-unitary", du.max_pathwise, kNaN, 1e-9, t_u.seconds()));

  // With multiplicative noise the gap is zero in expectation; check the
  // Monte Carlo band at the base resolution and after one coupled
  // refinement (the band itself shrinks with dt).
  Timer t_n;
  const SchrodingerModel noisy = schrodinger_preset(cfg.grid, cfg.modes, true);
  const auto ens = sample_brownian(cfg.grid, cfg.paths, cfg.seed);
  const DualityEstimate d0 = duality_residual(noisy, y0, u, vT, ens);
  rows.push_back({1.0, 0.0, dt, d0.residual, d0.sem, d0.max_pathwise});
  rep.records.push_back(
      make_record("duality-noise-band", d0.residual, d0.sem, band(d0.sem, 5.0 * dt), t_n.seconds()));

  Timer t_r;
  const TimeGrid fine_grid = cfg.grid.refined();
  const SchrodingerModel fine = schrodinger_preset(fine_grid, cfg.modes, true);
  const DualityEstimate d1 =
      duality_residual(fine, y0, refine_input(u), vT, refine_brownian(ens));
  rows.push_back({1.0, 1.0, fine_grid.dt(), d1.residual, d1.sem, d1.max_pathwise});
  rep.records.push_back(make_record("duality-refined", d1.residual, d1.sem,
                                    band(d1.sem, 5.0 * fine_grid.dt()), t_r.seconds()));
  save_csv(out / "duality.csv",
           {"noise_case", "level", "dt", "residual", "sem", "max_pathwise"}, rows);
}

template <class Scalar>
void verify_generic(RunReport& rep, const fs::path& out, const ExperimentConfig& cfg,
                    const StochasticSystemRealization<Scalar>& sys, const Vector<Scalar>& y0,
                    const InputSignal<Scalar>& u, const Vector<Scalar>& psi,
                    const std::string& suite) {
  if (suite == "concatenation")
    concatenation_suite(rep, out, sys);
  else if (suite == "weak")
    weak_suite(rep, out, cfg, sys, y0, u, psi);
  else
    fail("bad-config", "unknown suite '" + suite + "'");
}

// ---------------------------------------------------------------------------
// wellposed

void push_gain_study(RunReport& rep, const fs::path& out, const WellposednessStudy& st,
                     double secs) {
  std::vector<std::vector<double>> rows;
  const GainEstimate* levels[3] = {&st.base, &st.space_refined, &st.paths_doubled};
  for (int l = 0; l < 3; ++l)
    rows.push_back({double(l), levels[l]->max_ratio, levels[l]->q90, levels[l]->sem_at_max});
  save_csv(out / "wellposed.csv", {"level", "max_ratio", "q90", "sem_at_max"}, rows);
  rep.records.push_back(make_record("gain-space-stable",
                                    std::abs(st.space_refined.max_ratio / st.base.max_ratio - 1.0),
                                    st.space_refined.sem_at_max, kGainDrift, secs));
  rep.records.push_back(make_record("gain-paths-stable",
                                    std::abs(st.paths_doubled.max_ratio / st.base.max_ratio - 1.0),
                                    st.paths_doubled.sem_at_max, kGainDrift, 0.0));
}

template <class Scalar>
void gain_curve_csv(const fs::path& out, const StochasticSystemRealization<Scalar>& sys,
                    const ExperimentConfig& cfg) {
  const int n = sys.grid.steps;
  std::vector<int> nodes;
  const int stride = std::max(1, n / 8);
  for (int k = stride; k < n; k += stride) nodes.push_back(k);
  nodes.push_back(n);
  const auto ens = sample_brownian(sys.grid, cfg.paths, cfg.seed);
  const auto curve = gain_extension_curve(sys, nodes, cfg.trials, ens, cfg.seed);
  std::vector<std::vector<double>> rows;
  for (const auto& pt : curve)
    rows.push_back({double(pt.node), pt.time, pt.estimate.max_ratio, pt.estimate.q90,
                    pt.estimate.sem_at_max});
  save_csv(out / "gain_curve.csv", {"node", "t", "max_ratio", "q90", "sem_at_max"}, rows);
}

}  // namespace

// ---------------------------------------------------------------------------
// commands

RunReport run_simulate(const ExperimentConfig& cfg) {
  const fs::path out = prepare_output_dir(cfg.output_dir);
  RunReport rep = begin_report("simulate", cfg);
  if (cfg.instance == "scalar")
    simulate_scalar(rep, out, cfg);
  else if (cfg.instance == "heat")
    simulate_heat(rep, out, cfg);
  else if (cfg.instance == "schrodinger")
    simulate_schrodinger(rep, out, cfg);
  else if (system_json_is_complex(cfg.system))
    simulate_custom<cdouble>(rep, out, cfg);
  else
    simulate_custom<double>(rep, out, cfg);
  finish_report(out, rep);
  return rep;
}

RunReport run_admissibility(const ExperimentConfig& cfg) {
  const fs::path out = prepare_output_dir(cfg.output_dir);
  RunReport rep = begin_report("admissibility", cfg);
  std::vector<std::vector<double>> rows;
  if (cfg.instance == "scalar") {
    admissibility_records(rep, rows, cfg, scalar_system(cfg.grid));
  } else if (cfg.instance == "heat") {
    const HeatModel model = heat_preset(cfg.grid, cfg.cells, true);
    const auto sys = build_heat_system(model);
    admissibility_records(rep, rows, cfg, sys);
    admissibility_refinement(rep, rows, sys, build_heat_system(model.refined()));
  } else if (cfg.instance == "schrodinger") {
    const auto sys = build_schrodinger_system(schrodinger_preset(cfg.grid, cfg.modes, true));
    const auto fine =
        build_schrodinger_system(schrodinger_preset(cfg.grid.refined(), cfg.modes, true));
    admissibility_records(rep, rows, cfg, sys);
    admissibility_refinement(rep, rows, sys, fine);
  } else if (system_json_is_complex(cfg.system)) {
    admissibility_records(rep, rows, cfg, custom_system<cdouble>(cfg));
  } else {
    admissibility_records(rep, rows, cfg, custom_system<double>(cfg));
  }
  save_csv(out / "admissibility.csv", {"level", "node", "t", "c_b", "c_c"}, rows);
  finish_report(out, rep);
  return rep;
}

RunReport run_verify(const ExperimentConfig& cfg) {
  const fs::path out = prepare_output_dir(cfg.output_dir);
  RunReport rep = begin_report("verify", cfg);

  std::vector<std::string> applicable;
  if (cfg.instance == "heat")
    applicable = {"concatenation", "weak", "energy"};
  else if (cfg.instance == "schrodinger")
    applicable = {"concatenation", "weak", "multiplier", "duality"};
  else
    applicable = {"concatenation", "weak"};
  const std::vector<std::string> suites = select_suites(cfg, applicable);

  for (const auto& suite : suites) {
    if (cfg.instance == "scalar") {
      const auto sys = scalar_system(cfg.grid);
      verify_generic<double>(rep, out, cfg, sys, Eigen::VectorXd::Ones(1),
                             InputSignal<double>{sys.control, {}}, Eigen::VectorXd::Ones(1),
                             suite);
    } else if (cfg.instance == "heat") {
      if (suite == "energy") {
        energy_suite(rep, out, cfg);
      } else {
        const HeatModel model = heat_preset(cfg.grid, cfg.cells, true);
        const auto sys = build_heat_system(model);
        const Eigen::VectorXd psi = (kPi * model.centers().array()).cos().matrix();
        verify_generic<double>(rep, out, cfg, sys, heat_initial(model), heat_drive(sys), psi,
                               suite);
      }
    } else if (cfg.instance == "schrodinger") {
      if (suite == "multiplier") {
        multiplier_suite(rep, out, cfg);
      } else if (suite == "duality") {
        duality_suite(rep, out, cfg);
      } else {
        const auto sys = build_schrodinger_system(schrodinger_preset(cfg.grid, cfg.modes, true));
        verify_generic<cdouble>(rep, out, cfg, sys, schrodinger_initial(cfg.modes),
                                schrodinger_drive(sys), schrodinger_test_vector(cfg.modes),
                                suite);
      }
    } else if (system_json_is_complex(cfg.system)) {
      const auto sys = custom_system<cdouble>(cfg);
      verify_generic<cdouble>(rep, out, cfg, sys, custom_initial(sys, cfg),
                              InputSignal<cdouble>{sys.control, {}},
                              custom_test_vector(sys, cfg), suite);
    } else {
      const auto sys = custom_system<double>(cfg);
      verify_generic<double>(rep, out, cfg, sys, custom_initial(sys, cfg),
                             InputSignal<double>{sys.control, {}}, custom_test_vector(sys, cfg),
                             suite);
    }
  }
  finish_report(out, rep);
  return rep;
}

RunReport run_wellposed(const ExperimentConfig& cfg) {
  const fs::path out = prepare_output_dir(cfg.output_dir);
  RunReport rep = begin_report("wellposed", cfg);
  if (cfg.instance == "heat") {
    Timer tm;
    const HeatModel model = heat_preset(cfg.grid, cfg.cells, true);
    const WellposednessStudy st = heat_wellposed_constant(model, cfg.trials, cfg.paths, cfg.seed);
    push_gain_study(rep, out, st, tm.seconds());
    gain_curve_csv(out, build_heat_system(model), cfg);
  } else if (cfg.instance == "schrodinger") {
    Timer tm;
    const SchrodingerModel model = schrodinger_preset(cfg.grid, cfg.modes, true);
    const SchrodingerModel fine = schrodinger_preset(cfg.grid, 2 * cfg.modes, true);
    const WellposednessStudy st =
        schrodinger_wellposed_constant(model, cfg.trials, cfg.paths, cfg.seed, &fine);
    push_gain_study(rep, out, st, tm.seconds());
    gain_curve_csv(out, build_schrodinger_system(model), cfg);
  } else {
    fail("bad-config", "wellposed requires the heat or schrodinger instance");
  }
  finish_report(out, rep);
  return rep;
}

RunReport run_command(const std::string& command, const ExperimentConfig& cfg) {
  if (command == "simulate") return run_simulate(cfg);
  if (command == "admissibility") return run_admissibility(cfg);
  if (command == "verify") return run_verify(cfg);
  if (command == "wellposed") return run_wellposed(cfg);
  fail("bad-config", "unknown command '" + command + "'");
}

}  // namespace swlp
