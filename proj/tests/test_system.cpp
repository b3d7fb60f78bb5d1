#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "swlp/error.hpp"
#include "swlp/spaces.hpp"
#include "swlp/stochastics.hpp"
#include "swlp/system.hpp"

using namespace swlp;
using cdouble = std::complex<double>;

namespace {

// Deterministic pseudo-random data keyed off the library's own counter RNG,
// so failures reproduce exactly.
Eigen::MatrixXd random_matrix(Index rows, Index cols, std::uint64_t stream) {
  Eigen::MatrixXd m(rows, cols);
  for (Index j = 0; j < cols; ++j) m.col(j) = gaussian_vector(42, stream, j, rows);
  return m;
}

Eigen::MatrixXcd random_cmatrix(Index rows, Index cols, std::uint64_t stream) {
  Eigen::MatrixXcd m(rows, cols);
  for (Index j = 0; j < cols; ++j) m.col(j) = gaussian_cvector(42, stream, j, rows);
  return m;
}

template <class Fn>
std::string error_code(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

// Real test system: dense (non-spectral) dissipative generator, weighted
// grams everywhere, nontrivial B, C, F1 and F2.  Using the dense matrix
// exponential here keeps that code path covered by every system-level test.
StochasticSystemRealization<double> real_system(const TimeGrid& grid, bool with_noise,
                                                bool with_drift) {
  StochasticSystemRealization<double> sys;
  Eigen::VectorXd wh(4);
  wh << 1.5, 0.5, 2.0, 1.0;
  Eigen::VectorXd wu(2);
  wu << 2.0, 0.5;
  sys.state = make_weighted(wh, "state");
  sys.control = make_weighted(wu, "control");
  sys.observation = make_euclidean(2, "observation");

  sys.generator.space = sys.state;
  sys.generator.matrix =
      -1.2 * Eigen::MatrixXd::Identity(4, 4) + 0.3 * random_matrix(4, 4, 11);
  sys.input = LinearMap<double>(sys.control, sys.state, random_matrix(4, 2, 12));
  sys.output = LinearMap<double>(sys.state, sys.observation, random_matrix(2, 4, 13));
  if (with_drift) {
    const Eigen::MatrixXd f1m = 0.25 * random_matrix(4, 4, 14);
    sys.f1 = CoefficientProcess<double>::constant(f1m);
    sys.f1_bound = op_norm(LinearMap<double>(sys.state, sys.state, f1m));
  }
  if (with_noise) {
    const Eigen::MatrixXd f2m = 0.3 * random_matrix(4, 4, 15);
    sys.f2 = CoefficientProcess<double>::constant(f2m);
    sys.f2_bound = op_norm(LinearMap<double>(sys.state, sys.state, f2m));
  }
  sys.grid = grid;
  sys.label = "dense-real-test";
  sys.validate();
  return sys;
}

// Complex test system: spectral group generator with mildly damped
// oscillatory eigenvalues and a unitary eigenbasis.
StochasticSystemRealization<cdouble> complex_system(const TimeGrid& grid, bool with_noise) {
  StochasticSystemRealization<cdouble> sys;
  Eigen::VectorXd wh(3);
  wh << 1.0, 0.5, 2.0;
  sys.state = make_weighted(wh, "cstate");
  sys.control = make_euclidean(2, "ccontrol");
  sys.observation = make_euclidean(2, "cobservation");

  GeneratorRealization<cdouble>::Spectral s;
  s.values = Vector<cdouble>(3);
  s.values << cdouble(-0.1, 1.0), cdouble(-0.3, -2.0), cdouble(-0.05, 3.0);
  const Eigen::MatrixXcd q =
      Eigen::HouseholderQR<Eigen::MatrixXcd>(random_cmatrix(3, 3, 21)).householderQ();
  s.vectors = q;
  s.vectors_inv = q.adjoint();
  sys.generator.space = sys.state;
  sys.generator.matrix = s.vectors * s.values.asDiagonal() * s.vectors_inv;
  sys.generator.spectral = std::move(s);
  sys.generator.group = true;

  sys.input = LinearMap<cdouble>(sys.control, sys.state, random_cmatrix(3, 2, 22));
  sys.output = LinearMap<cdouble>(sys.state, sys.observation, random_cmatrix(2, 3, 23));
  if (with_noise) {
    const Matrix<cdouble> f2m = 0.25 * random_cmatrix(3, 3, 24);
    sys.f2 = CoefficientProcess<cdouble>::constant(f2m);
    sys.f2_bound = op_norm(LinearMap<cdouble>(sys.state, sys.state, f2m));
  }
  sys.grid = grid;
  sys.label = "spectral-complex-test";
  sys.validate();
  return sys;
}

// Scalar exponential system dY = -Y dt + u dt on trivial grams; every
// admissibility constant has an elementary closed form.
StochasticSystemRealization<double> scalar_system(const TimeGrid& grid) {
  StochasticSystemRealization<double> sys;
  sys.state = make_euclidean(1, "h");
  sys.control = make_euclidean(1, "u");
  sys.observation = make_euclidean(1, "z");
  sys.generator.space = sys.state;
  sys.generator.matrix = -Eigen::MatrixXd::Identity(1, 1);
  GeneratorRealization<double>::Spectral s;
  s.values = -Eigen::VectorXd::Ones(1);
  s.vectors = Eigen::MatrixXd::Identity(1, 1);
  s.vectors_inv = s.vectors;
  sys.generator.spectral = std::move(s);
  sys.input = LinearMap<double>(sys.control, sys.state, Eigen::MatrixXd::Identity(1, 1));
  sys.output = LinearMap<double>(sys.state, sys.observation, Eigen::MatrixXd::Identity(1, 1));
  sys.grid = grid;
  sys.label = "scalar-exp";
  sys.validate();
  return sys;
}

template <class Scalar>
InputSignal<Scalar> random_input(const StochasticSystemRealization<Scalar>& sys,
                                 std::uint64_t stream) {
  Matrix<Scalar> vals(sys.control->dim(), sys.grid.steps);
  if constexpr (std::is_same_v<Scalar, cdouble>) {
    vals = random_cmatrix(sys.control->dim(), sys.grid.steps, stream);
  } else {
    vals = random_matrix(sys.control->dim(), sys.grid.steps, stream);
  }
  return {sys.control, std::move(vals)};
}

// Largest Gram-norm distance between two trajectories over all paths/nodes.
template <class Scalar>
double trajectory_gap(const DiscreteSpace& sp, const Trajectory<Scalar>& a,
                      const Trajectory<Scalar>& b) {
  double gap = 0.0;
  for (size_t p = 0; p < a.states.size(); ++p)
    for (int n = 0; n < a.states[p].cols(); ++n)
      gap = std::max(gap, norm<Scalar>(sp, Vector<Scalar>(a.states[p].col(n) - b.states[p].col(n))));
  return gap;
}

}  // namespace

TEST_CASE("system validation rejects malformed assemblies") {
  const TimeGrid grid(1.0, 8);
  auto sys = real_system(grid, true, true);

  auto broken = sys;
  broken.state = nullptr;
  CHECK(error_code([&] { broken.validate(); }) == "bad-argument");

  broken = sys;
  broken.input.matrix = Eigen::MatrixXd::Zero(3, 2);
  CHECK(error_code([&] { broken.validate(); }) == "dim-mismatch");

  broken = sys;
  broken.output.matrix = Eigen::MatrixXd::Zero(2, 5);
  CHECK(error_code([&] { broken.validate(); }) == "dim-mismatch");

  broken = sys;
  broken.f1.table.assign(3, Eigen::MatrixXd::Zero(4, 4));  // neither 1 nor steps entries
  CHECK(error_code([&] { broken.validate(); }) == "bad-argument");

  broken = sys;
  broken.f2.table.assign(1, Eigen::MatrixXd::Zero(2, 2));
  CHECK(error_code([&] { broken.validate(); }) == "dim-mismatch");
}

TEST_CASE("zero noise collapses the ensemble and zero data gives the zero path") {
  const TimeGrid grid(1.0, 32);
  const auto sys = real_system(grid, /*with_noise=*/false, /*with_drift=*/true);
  const auto ens = sample_brownian(grid, 6, 2024);
  Eigen::VectorXd y0(4);
  y0 << 1.0, -0.5, 0.25, 2.0;
  const auto u = random_input(sys, 31);

  const auto traj = mild_solve_stepping(sys, y0, u, ens);
  CHECK(traj.scheme == "stepping");
  CHECK(traj.seed == 2024);
  CHECK(traj.ensemble_level == 0);
  REQUIRE(traj.states.size() == 6);
  // Without a noise coefficient the increments never enter, so every path
  // must be bit-identical, not merely close.
  for (Index p = 1; p < 6; ++p)
    CHECK((traj.path(p).array() == traj.path(0).array()).all());

  // Zero data with noise present: the zero state is invariant exactly.
  const auto noisy = real_system(grid, true, true);
  const InputSignal<double> no_input{noisy.control, {}};
  const auto zero_traj =
      mild_solve_stepping(noisy, Eigen::VectorXd::Zero(4).eval(), no_input, ens);
  for (const auto& path : zero_traj.states) CHECK(path.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("solutions are linear in the data on a fixed ensemble") {
  const TimeGrid grid(1.0, 24);
  const auto ens = sample_brownian(grid, 5, 7);

  // Real case.
  {
    const auto sys = real_system(grid, true, true);
    const Eigen::VectorXd y0a = gaussian_vector(1, 50, 0, 4);
    const Eigen::VectorXd y0b = gaussian_vector(1, 50, 1, 4);
    const auto ua = random_input(sys, 51);
    const auto ub = random_input(sys, 52);
    const double alpha = -1.75;

    const auto ta = mild_solve_stepping(sys, y0a, ua, ens);
    const auto tb = mild_solve_stepping(sys, y0b, ub, ens);
    const InputSignal<double> uc{sys.control,
                                 Eigen::MatrixXd(ua.values + alpha * ub.values)};
    const auto tc =
        mild_solve_stepping(sys, Eigen::VectorXd(y0a + alpha * y0b), uc, ens);
    double gap = 0.0, scale = 0.0;
    for (Index p = 0; p < ens.paths; ++p) {
      gap = std::max(gap,
                     (tc.path(p) - ta.path(p) - alpha * tb.path(p)).cwiseAbs().maxCoeff());
      scale = std::max(scale, tc.path(p).cwiseAbs().maxCoeff());
    }
    CHECK(gap <= 1e-10 * (1.0 + scale));
  }

  // Complex case with a complex combination coefficient.
  {
    const auto sys = complex_system(grid, true);
    const Vector<cdouble> y0a = gaussian_cvector(2, 60, 0, 3);
    const Vector<cdouble> y0b = gaussian_cvector(2, 60, 1, 3);
    const auto ua = random_input(sys, 61);
    const auto ub = random_input(sys, 62);
    const cdouble alpha(0.5, 1.5);

    const auto ta = mild_solve_stepping(sys, y0a, ua, ens);
    const auto tb = mild_solve_stepping(sys, y0b, ub, ens);
    const InputSignal<cdouble> uc{sys.control,
                                  Matrix<cdouble>(ua.values + alpha * ub.values)};
    const auto tc =
        mild_solve_stepping(sys, Vector<cdouble>(y0a + alpha * y0b), uc, ens);
    double gap = 0.0, scale = 0.0;
    for (Index p = 0; p < ens.paths; ++p) {
      gap = std::max(gap,
                     (tc.path(p) - ta.path(p) - alpha * tb.path(p)).cwiseAbs().maxCoeff());
      scale = std::max(scale, tc.path(p).cwiseAbs().maxCoeff());
    }
    CHECK(gap <= 1e-10 * (1.0 + scale));
  }
}

TEST_CASE("one step reproduces the documented exponential-Euler update") {
  const TimeGrid grid(0.25, 1);
  const auto sys = real_system(grid, true, true);
  const auto ens = sample_brownian(grid, 3, 99);
  const Eigen::VectorXd y0 = gaussian_vector(3, 70, 0, 4);
  const auto u = random_input(sys, 71);

  const auto traj = mild_solve_stepping(sys, y0, u, ens);
  const double dt = grid.dt();
  const Eigen::MatrixXd sdt = semigroup_matrix(sys.generator, dt);
  for (Index p = 0; p < 3; ++p) {
    const double dw = ens.increments(p, 0);
    const Eigen::VectorXd expected =
        sdt * (y0 + dt * (sys.f1.table[0] * y0) + dt * (sys.input.matrix * u.values.col(0)) +
               dw * (sys.f2.table[0] * y0));
    CHECK((traj.path(p).col(1) - expected).cwiseAbs().maxCoeff() <=
          1e-13 * (1.0 + expected.cwiseAbs().maxCoeff()));
    CHECK((traj.path(p).col(0).array() == y0.array()).all());
  }
}

TEST_CASE("deterministic input map matches the driven flow and concatenates exactly") {
  const TimeGrid grid(1.0, 16);
  const auto ens = sample_brownian(grid, 1, 1);

  // With f1 = f2 = 0 the stepping recursion unrolls to the discrete
  // variation-of-constants sum that input_map_phi evaluates directly.
  auto sys = real_system(grid, false, false);
  const auto u = random_input(sys, 80);
  const auto traj =
      mild_solve_stepping(sys, Eigen::VectorXd::Zero(4).eval(), u, ens);
  for (int k : {0, 1, 5, 16}) {
    const Eigen::VectorXd phi = input_map_phi(sys, k, u);
    CHECK(norm<double>(*sys.state, Vector<double>(phi - traj.path(0).col(k))) <=
          1e-10 * (1.0 + norm<double>(*sys.state, phi)));
  }

  // Concatenation defect at intermediate nodes, real and complex.
  for (int m : {0, 4, 8, 13, 16})
    CHECK(concatenation_check(sys, m, 16, u) <= 1e-10);
  const auto csys = complex_system(grid, false);
  const auto cu = random_input(csys, 81);
  for (int m : {0, 3, 8, 12})
    CHECK(concatenation_check(csys, m, 12, cu) <= 1e-10);

  // Out-of-order nodes are rejected.
  CHECK(error_code([&] { concatenation_check(sys, 9, 4, u); }) == "bad-argument");
}

TEST_CASE("input and output maps are gram adjoints of each other") {
  const TimeGrid grid(1.0, 12);
  const double dt = grid.dt();

  // <Phi_k u, x>_H == sum_n dt <u_n, B* S*((k-n) dt) x>_U, the discrete
  // duality that makes the observation map the adjoint of the input map up
  // to time reversal.
  {
    const auto sys = real_system(grid, false, false);
    const auto bstar = adjoint(sys.input);
    const int k = 12;
    for (int trial = 0; trial < 100; ++trial) {
      const InputSignal<double> u{sys.control, random_matrix(2, grid.steps, 300 + trial)};
      const Eigen::VectorXd x = gaussian_vector(9, 90, trial, 4);
      const double lhs = inner<double>(*sys.state, input_map_phi(sys, k, u), x);
      double rhs = 0.0;
      for (int n = 0; n < k; ++n) {
        const LinearMap<double> s_t(sys.state, sys.state,
                                    semigroup_matrix(sys.generator, double(k - n) * dt));
        rhs += dt * inner<double>(*sys.control, u.values.col(n), bstar(adjoint(s_t)(x)));
      }
      CHECK(std::abs(lhs - rhs) <= 1e-10 * (1.0 + std::abs(lhs)));
    }
  }
  {
    const auto sys = complex_system(grid, false);
    const auto bstar = adjoint(sys.input);
    const int k = 9;
    for (int trial = 0; trial < 50; ++trial) {
      const InputSignal<cdouble> u{sys.control, random_cmatrix(2, grid.steps, 400 + trial)};
      const Vector<cdouble> x = gaussian_cvector(9, 91, trial, 3);
      const cdouble lhs = inner<cdouble>(*sys.state, input_map_phi(sys, k, u), x);
      cdouble rhs = 0.0;
      for (int n = 0; n < k; ++n) {
        const LinearMap<cdouble> s_t(sys.state, sys.state,
                                     semigroup_matrix(sys.generator, double(k - n) * dt));
        rhs += dt * inner<cdouble>(*sys.control, u.values.col(n), bstar(adjoint(s_t)(x)));
      }
      CHECK(std::abs(lhs - rhs) <= 1e-10 * (1.0 + std::abs(lhs)));
    }
  }

  // Output map columns are exactly C S(s dt) eta and vanish past the node.
  {
    const auto sys = complex_system(grid, false);
    const Vector<cdouble> eta = gaussian_cvector(9, 92, 0, 3);
    const int k = 7;
    const Matrix<cdouble> psi = output_map_psi(sys, k, eta);
    REQUIRE(psi.cols() == grid.steps + 1);
    for (int s = 0; s <= k; ++s) {
      const Vector<cdouble> expected =
          sys.output.matrix * semigroup_apply(sys.generator, double(s) * dt, eta);
      CHECK((psi.col(s) - expected).cwiseAbs().maxCoeff() <= 1e-12);
    }
    for (int s = k + 1; s <= grid.steps; ++s)
      CHECK(psi.col(s).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("weak residual vanishes on zero data and the streaming terminal agrees bitwise") {
  const TimeGrid grid(1.0, 20);
  const auto ens = sample_brownian(grid, 7, 123);

  // Zero data: the residual is identically zero, exactly.
  {
    const auto sys = real_system(grid, true, true);
    const InputSignal<double> no_input{sys.control, {}};
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(4);
    const auto traj = mild_solve_stepping(sys, zero, no_input, ens);
    const Eigen::VectorXd psi = gaussian_vector(5, 100, 0, 4);
    const Eigen::MatrixXd r = weak_residual(sys, traj, psi, no_input, ens);
    CHECK(r.cwiseAbs().maxCoeff() == 0.0);
  }

  // Stored-trajectory residual and the streaming terminal variant perform
  // the same arithmetic in the same order, so they agree to the bit.
  {
    const auto sys = real_system(grid, true, true);
    const auto u = random_input(sys, 101);
    const Eigen::VectorXd y0 = gaussian_vector(5, 102, 0, 4);
    const Eigen::VectorXd psi = gaussian_vector(5, 103, 0, 4);
    const auto traj = mild_solve_stepping(sys, y0, u, ens);
    const Eigen::MatrixXd r = weak_residual(sys, traj, psi, u, ens);
    const Eigen::VectorXd rt = weak_residual_terminal(sys, y0, u, ens, psi);
    REQUIRE(rt.size() == ens.paths);
    CHECK((rt.array() == r.col(grid.steps).array()).all());
    // The residual of an actual mild solution is small but not zero.
    CHECK(r.col(grid.steps).cwiseAbs().maxCoeff() > 0.0);
    CHECK(r.col(0).cwiseAbs().maxCoeff() == 0.0);
  }
  {
    const auto sys = complex_system(grid, true);
    const auto u = random_input(sys, 104);
    const Vector<cdouble> y0 = gaussian_cvector(5, 105, 0, 3);
    const Vector<cdouble> psi = gaussian_cvector(5, 106, 0, 3);
    const auto traj = mild_solve_stepping(sys, y0, u, ens);
    const Matrix<cdouble> r = weak_residual(sys, traj, psi, u, ens);
    const Vector<cdouble> rt = weak_residual_terminal(sys, y0, u, ens, psi);
    CHECK((rt.array() == r.col(grid.steps).array()).all());
  }

  // Grid mismatch between trajectory and ensemble is rejected.
  {
    const auto sys = real_system(grid, true, true);
    const auto u = random_input(sys, 107);
    const Eigen::VectorXd y0 = gaussian_vector(5, 108, 0, 4);
    const auto traj = mild_solve_stepping(sys, y0, u, ens);
    const auto other = sample_brownian(grid, 3, 123);
    const Eigen::VectorXd psi = Eigen::VectorXd::Ones(4);
    CHECK(error_code([&] { weak_residual(sys, traj, psi, u, other); }) == "dim-mismatch");
  }
}

TEST_CASE("picard construction converges to the stepping solution and contracts") {
  const TimeGrid grid(1.0, 32);
  const auto ens = sample_brownian(grid, 16, 5150);
  const double tol = 1e-6;

  struct Case {
    bool noise;
    bool drift;
  };
  for (const Case c : {Case{false, false}, Case{false, true}, Case{true, false},
                       Case{true, true}}) {
    const auto sys = real_system(grid, c.noise, c.drift);
    const Eigen::VectorXd y0 = gaussian_vector(6, 110, 0, 4);
    const auto u = random_input(sys, 111);
    const auto stepped = mild_solve_stepping(sys, y0, u, ens);
    const auto picard = mild_solve_picard(sys, y0, u, ens, tol);

    CHECK(picard.report.converged);
    CHECK(picard.report.window_nodes >= 1);
    CHECK(picard.report.gamma <= 0.25 + 1e-12);
    CHECK(picard.trajectory.scheme == "picard");
    for (const double rho : picard.report.contraction_ratio) CHECK(rho < 0.5);
    CHECK(trajectory_gap(*sys.state, picard.trajectory, stepped) <= 5.0 * tol);
  }

  // Complex system with noise.
  {
    const auto sys = complex_system(grid, true);
    const Vector<cdouble> y0 = gaussian_cvector(6, 112, 0, 3);
    const auto u = random_input(sys, 113);
    const auto stepped = mild_solve_stepping(sys, y0, u, ens);
    const auto picard = mild_solve_picard(sys, y0, u, ens, tol);
    CHECK(picard.report.converged);
    for (const double rho : picard.report.contraction_ratio) CHECK(rho < 0.5);
    CHECK(trajectory_gap(*sys.state, picard.trajectory, stepped) <= 5.0 * tol);
  }

  // Invalid tolerance is rejected.
  {
    const auto sys = real_system(grid, false, false);
    const Eigen::VectorXd y0 = Eigen::VectorXd::Zero(4);
    const InputSignal<double> no_input{sys.control, {}};
    CHECK(error_code([&] { mild_solve_picard(sys, y0, no_input, ens, 0.0); }) ==
          "bad-argument");
  }
}

TEST_CASE("admissibility constants are monotone and match the scalar geometric sums") {
  // Monotonicity on a generic weighted system: node-k blocks nest into
  // node k+1, so both constants are nondecreasing up to rounding.
  {
    const TimeGrid grid(1.0, 24);
    const auto sys = real_system(grid, false, false);
    double prev_b = 0.0, prev_c = 0.0;
    for (int k = 0; k <= grid.steps; ++k) {
      const double cb = control_admissibility_constant(sys, k);
      const double cc = observation_admissibility_constant(sys, k);
      CHECK(cb >= prev_b - 1e-12 * std::max(1.0, prev_b));
      CHECK(cc >= prev_c - 1e-12 * std::max(1.0, prev_c));
      prev_b = cb;
      prev_c = cc;
    }
    CHECK(control_admissibility_constant(sys, 0) == 0.0);
    CHECK(observation_admissibility_constant(sys, 0) == 0.0);
  }
  {
    const TimeGrid grid(1.0, 12);
    const auto sys = complex_system(grid, false);
    double prev_b = 0.0, prev_c = 0.0;
    for (int k = 0; k <= grid.steps; ++k) {
      const double cb = control_admissibility_constant(sys, k);
      const double cc = observation_admissibility_constant(sys, k);
      CHECK(cb >= prev_b - 1e-12 * std::max(1.0, prev_b));
      CHECK(cc >= prev_c - 1e-12 * std::max(1.0, prev_c));
      prev_b = cb;
      prev_c = cc;
    }
  }

  // Scalar system dY = -Y dt + u dt: the constants are plain geometric
  // sums, and both converge to (1 - e^{-2t})/2 at O(dt).
  {
    const TimeGrid grid(1.0, 64);
    const auto sys = scalar_system(grid);
    const double dt = grid.dt();
    for (int k : {1, 16, 32, 48, 64}) {
      double sum_b = 0.0, sum_c = 0.0;
      for (int m = 1; m <= k; ++m) sum_b += dt * std::exp(-2.0 * m * dt);
      for (int n = 0; n < k; ++n) sum_c += dt * std::exp(-2.0 * n * dt);
      const double cb = control_admissibility_constant(sys, k);
      const double cc = observation_admissibility_constant(sys, k);
      CHECK(std::abs(cb - sum_b) <= 1e-12 * std::max(1.0, sum_b));
      CHECK(std::abs(cc - sum_c) <= 1e-12 * std::max(1.0, sum_c));
      const double limit = 0.5 * (1.0 - std::exp(-2.0 * grid.node(k)));
      CHECK(std::abs(cb - limit) <= 5.0 * dt);
      CHECK(std::abs(cc - limit) <= 5.0 * dt);
    }
  }

  // Out-of-range nodes are rejected.
  {
    const TimeGrid grid(1.0, 8);
    const auto sys = scalar_system(grid);
    CHECK(error_code([&] { control_admissibility_constant(sys, 9); }) == "bad-argument");
    CHECK(error_code([&] { observation_admissibility_constant(sys, -1); }) ==
          "bad-argument");
  }
}

TEST_CASE("stochastic convolution matches its direct sum") {
  const TimeGrid grid(1.0, 10);
  const auto ens = sample_brownian(grid, 4, 246);
  const auto sys = real_system(grid, false, false);
  const auto& gen = sys.generator;
  const double dt = grid.dt();

  std::vector<Eigen::MatrixXd> integrand;
  for (int p = 0; p < 4; ++p) integrand.push_back(random_matrix(4, grid.steps, 500 + p));

  for (int k : {0, 1, 7, 10}) {
    const auto conv = stochastic_convolution(gen, integrand, ens, k);
    REQUIRE(static_cast<int>(conv.size()) == ens.paths);
    for (Index p = 0; p < ens.paths; ++p) {
      Eigen::VectorXd manual = Eigen::VectorXd::Zero(4);
      for (int n = 0; n < k; ++n)
        manual += semigroup_matrix(gen, double(k - n) * dt) *
                  (integrand[static_cast<size_t>(p)].col(n) * ens.increments(p, n));
      CHECK((conv[static_cast<size_t>(p)] - manual).cwiseAbs().maxCoeff() <=
            1e-12 * (1.0 + manual.cwiseAbs().maxCoeff()));
    }
  }

  std::vector<Eigen::MatrixXd> short_integrand(integrand.begin(), integrand.begin() + 2);
  CHECK(error_code([&] { stochastic_convolution(gen, short_integrand, ens, 5); }) ==
        "dim-mismatch");
}

TEST_CASE("sampled gain estimators are deterministic in their seeds") {
  const TimeGrid grid(1.0, 16);
  const auto ens = sample_brownian(grid, 32, 888);
  const auto sys = real_system(grid, true, true);

  const GainEstimate h1 = hidden_regularity_ratio(sys, 16, 5, ens, 777);
  const GainEstimate h2 = hidden_regularity_ratio(sys, 16, 5, ens, 777);
  CHECK(h1.max_ratio == h2.max_ratio);
  CHECK(h1.q90 == h2.q90);
  CHECK(h1.sem_at_max == h2.sem_at_max);
  CHECK(h1.per_trial == h2.per_trial);
  CHECK(h1.max_ratio > 0.0);
  CHECK(h1.q90 <= h1.max_ratio + 1e-15);

  const GainEstimate g1 = io_gain(sys, 16, 4, ens, 777);
  const GainEstimate g2 = io_gain(sys, 16, 4, ens, 777);
  CHECK(g1.max_ratio == g2.max_ratio);
  CHECK(g1.per_trial == g2.per_trial);
  CHECK(g1.max_ratio > 0.0);

  // A different draw seed must actually change the sampled data.
  const GainEstimate g3 = io_gain(sys, 16, 4, ens, 778);
  CHECK(g3.max_ratio != g1.max_ratio);

  // The extension curve evaluates io_gain with shared draws at each node.
  const std::vector<int> nodes{8, 12, 16};
  const auto curve = gain_extension_curve(sys, nodes, 4, ens, 777);
  REQUIRE(curve.size() == 3);
  for (size_t i = 0; i < nodes.size(); ++i) {
    CHECK(curve[i].node == nodes[i]);
    CHECK(curve[i].time == doctest::Approx(grid.node(nodes[i])).epsilon(1e-15));
    const GainEstimate direct = io_gain(sys, nodes[i], 4, ens, 777);
    CHECK(curve[i].estimate.max_ratio == direct.max_ratio);
  }
  CHECK(curve[2].estimate.max_ratio == g1.max_ratio);

  CHECK(error_code([&] { hidden_regularity_ratio(sys, 16, 0, ens, 1); }) == "bad-argument");
  CHECK(error_code([&] { io_gain(sys, 16, 0, ens, 1); }) == "bad-argument");
}

TEST_CASE("solvers reject mismatched grids and report divergence") {
  const TimeGrid grid(1.0, 16);
  const auto sys = real_system(grid, true, true);
  const InputSignal<double> no_input{sys.control, {}};
  const Eigen::VectorXd y0 = Eigen::VectorXd::Ones(4);

  const auto wrong_ens = sample_brownian(TimeGrid(1.0, 8), 2, 1);
  CHECK(error_code([&] { mild_solve_stepping(sys, y0, no_input, wrong_ens); }) ==
        "bad-argument");
  const auto ens = sample_brownian(grid, 2, 1);
  const Eigen::VectorXd bad_y0 = Eigen::VectorXd::Ones(3);
  CHECK(error_code([&] { mild_solve_stepping(sys, bad_y0, no_input, ens); }) ==
        "dim-mismatch");

  // A strongly expanding generator overflows within the horizon; the solver
  // must convert that into a structured divergence error, not NaN output.
  StochasticSystemRealization<double> blow = scalar_system(TimeGrid(1.0, 10));
  blow.generator.matrix = 1000.0 * Eigen::MatrixXd::Identity(1, 1);
  blow.generator.spectral->values = 1000.0 * Eigen::VectorXd::Ones(1);
  const auto bens = sample_brownian(blow.grid, 1, 1);
  const InputSignal<double> bu{blow.control, {}};
  CHECK(error_code([&] {
          mild_solve_stepping(blow, Eigen::VectorXd::Ones(1).eval(), bu, bens);
        }) == "divergence");
}
