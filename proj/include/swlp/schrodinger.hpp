#pragma once

/// Stochastic Schrödinger equation on (0, pi) with Dirichlet boundary
/// control and normal-derivative observation of the preimage field,
/// realized spectrally in the sine basis e_k = sqrt(2/pi) sin(kx):
///
///   dy = (i Lam y + a(x,t) y + B u) dt + b(x,t) y dW,
///   z  = B* y,
///
/// where Lam = diag(k^2) and the state space carries the diag(1/k^2) Gram
/// (an H^{-1}-type metric, under which the generator is skew-adjoint and
/// the flow a unitary group).  The control map absorbs Dirichlet boundary
/// data through the harmonic-extension (Dirichlet) map, B g = -i Lam (Ext g),
/// and the observation is its adjoint, a weighted trace of the Laplacian
/// preimage.  Multiplication by the coefficient fields a, b uses the exact
/// sine collocation transform.
///
/// The module also carries the two verification workhorses of this
/// instance: the space-time multiplier identity (with its Itô covariation
/// term) on an independent finite-difference grid, and the deterministic
/// backward adjoint flow with the forward-backward duality pairing.

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "swlp/system.hpp"

namespace swlp {

/// Modes, grids and coefficient tables of one Schrödinger run.
///
/// Coefficient fields live on the closed collocation grid x_j = j pi/(K+1),
/// j = 0 .. K+1 (endpoints included so the required endpoint vanishing is
/// checkable); the interior K values feed the multiplication transform.
/// Tables hold 0 columns (absent), 1 (time-constant) or `steps` columns.
struct SchrodingerModel {
  int modes = 24;  // K
  TimeGrid grid;
  std::vector<int> control_side = {0};      // subset of {0, 1}: x = 0, x = pi
  std::vector<int> observation_side;        // empty: same as control_side
  Eigen::MatrixXd drift;  // field a, (modes + 2) x cols
  Eigen::MatrixXd noise;  // field b, (modes + 2) x cols

  Eigen::VectorXd collocation_points() const;
  const std::vector<int>& observed_sides() const {
    return observation_side.empty() ? control_side : observation_side;
  }

  /// Model with doubled mode count; coefficient tables are linearly
  /// interpolated onto the finer collocation grid.  Callers holding the
  /// analytic fields should resample via make_schrodinger_model instead.
  SchrodingerModel refined() const;
};

/// Model with time-constant fields a(x), b(x) sampled on the collocation
/// grid (pass null functions for absent coefficients; fields must vanish
/// at the endpoints).
SchrodingerModel make_schrodinger_model(int modes, const TimeGrid& grid,
                                        std::vector<int> control_side,
                                        const std::function<double(double)>& a,
                                        const std::function<double(double)>& b);

/// Assembles the complex system realization.  Requires modes >= 8 (the
/// trace formulas need mode headroom) and endpoint-vanishing fields.
StochasticSystemRealization<cdouble> build_schrodinger_system(const SchrodingerModel& model);

/// Sine coefficients of the harmonic (here: affine) extension of the
/// boundary datum pair (value at 0, value at pi):
///   Ext(1, 0) = 1 - x/pi  ->  sqrt(2/pi)/k,
///   Ext(0, 1) = x/pi      ->  sqrt(2/pi)(-1)^{k+1}/k.
Eigen::VectorXcd dirichlet_map(const SchrodingerModel& model, const Eigen::Vector2cd& datum);

/// Observation trace at the selected sides: for f in the state space,
///   (B* f)(0)  = +i sqrt(2/pi) sum_k f_k / k,
///   (B* f)(pi) = -i sqrt(2/pi) sum_k (-1)^k f_k / k,
/// the negative normal derivative of the Laplacian preimage, times -i.
/// Coincides with adjoint(B) applied to f.
Eigen::VectorXcd bstar_trace(const SchrodingerModel& model, const Eigen::VectorXcd& f);

// ---------------------------------------------------------------------------
// Multiplier identity

/// A multiplier field mu and a space-time test field phi on (0, pi), given
/// either in closed deterministic form phi(x, t) or in the semimartingale
/// class phi = f(x) W(t) + g(x) t.  `brownian_time_shift` declares the
/// evaluation time of the Brownian factor relative to the node; any
/// nonzero value makes the field anticipating and is rejected.
struct MultiplierFieldSpec {
  int points = 257;  // collocation points on [0, pi], endpoints included
  std::function<cdouble(double, double)> deterministic;  // phi(x, t)
  std::function<cdouble(double)> brownian_profile;       // f
  std::function<cdouble(double)> drift_profile;          // g
  double brownian_time_shift = 0.0;
  std::function<double(double)> mu;
};

/// Per-path integrals of the identity: the left side and the six right-side
/// terms (boundary flux, boundary pairing, endpoint-in-time pairing, two
/// interior mu_x terms, quadratic covariation), integrated over
/// (0, pi) x (0, T) with trapezoid x second-order finite differences in
/// space and left-endpoint Itô differences in time.
struct MultiplierSamples {
  Eigen::VectorXcd lhs;
  Eigen::MatrixXcd terms;  // paths x 6
  double dt = 0.0;

  /// |mean over paths of (lhs - sum of terms)|.
  double residual() const;
  /// Combined re/im standard error of that mean.
  double sem() const;
  /// Residual with term `index` (0-based) removed from the right side.
  double ablated_residual(int index) const;
};

/// Residual study at the given resolution and two coupled refinements
/// (space points and time steps both doubled; the Brownian ensemble is
/// bridge-refined so all levels see the same paths).
struct MultiplierStudy {
  MultiplierSamples base;
  double residual = 0.0;
  double sem = 0.0;
  std::array<double, 3> residuals{};  // per level
  double order = 0.0;                 // mean dyadic rate across the two refinements
};

/// Evaluates the identity; pass ens = nullptr for deterministic fields
/// (one path, no noise).  Errors: anticipating field specs, missing mu,
/// grid mismatches.
MultiplierStudy multiplier_identity_residual(const MultiplierFieldSpec& spec, const TimeGrid& grid,
                                             const BrownianEnsemble* ens);

// ---------------------------------------------------------------------------
// Backward adjoint and duality

/// Backward solution pair: node values of v, and the martingale term V,
/// identically zero in the supported regime (deterministic terminal data
/// and deterministic coefficients force it).
struct BackwardSolution {
  Eigen::MatrixXcd v;     // modes x (steps + 1); v.col(steps) = v_T exactly
  Eigen::MatrixXcd mart;  // modes x (steps + 1), zero
};

/// Terminal-value backward flow dv = -i Lam v dt - conj(a) v dt (backward
/// from v_T), integrated by the reversed exponential scheme
///   v_n = (I + dt conj(a)·) S*(dt) v_{n+1}.
/// The grid must match the model grid; random terminal data are not
/// supported (that regime needs a martingale-representation solver).
BackwardSolution backward_adjoint_solve(const SchrodingerModel& model,
                                        const Eigen::VectorXcd& v_terminal, const TimeGrid& grid);

/// Forward-backward pairing gap
///   E<y_N, v_T> - <y_0, v_0> - sum_n dt <u_n, B* v_n>
/// (state pairings in the diag(1/k^2) Gram, control pairing on the
/// boundary).  For a = b = 0 the gap vanishes pathwise at machine
/// precision; with noise its expectation is zero and only the Monte Carlo
/// error remains.
struct DualityEstimate {
  double residual = 0.0;      // |mean pairing gap|
  double sem = 0.0;           // combined re/im sem
  double max_pathwise = 0.0;  // worst single-path |gap|
};
DualityEstimate duality_residual(const SchrodingerModel& model, const Eigen::VectorXcd& y0,
                                 const InputSignal<cdouble>& u, const Eigen::VectorXcd& v_terminal,
                                 const BrownianEnsemble& ens);

/// Hidden-regularity quotient of the backward flow:
///   sum_{n<N} dt |B* v_n|^2 / ||v_T||^2,
/// the boundary observation energy of the adjoint state per unit terminal
/// data.  Finite and stable under mode refinement.
double backward_hidden_regularity(const SchrodingerModel& model, const Eigen::VectorXcd& v_terminal);

/// Sampled well-posedness study, as in the heat instance: worst and
/// 0.9-quantile over trials of
///   (max_n sqrt(E|y_n|^2) + sqrt(E sum dt |B* y_n|^2)) / (|y0| + |u|),
/// at the base mode count, with modes doubled (same paths, data extended
/// by zero-padding), and with the path count doubled.  A caller holding
/// analytic coefficient fields can pass the exactly resampled fine model;
/// otherwise the interpolating refined() is used.
WellposednessStudy schrodinger_wellposed_constant(const SchrodingerModel& model, int trials,
                                                  int paths, std::uint64_t seed,
                                                  const SchrodingerModel* fine_model = nullptr);

}  // namespace swlp
