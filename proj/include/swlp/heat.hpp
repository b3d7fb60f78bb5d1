#pragma once

/// Stochastic heat equation on (0, L) with Neumann flux control at both
/// ends and boundary-trace observation:
///
///   dy = (y_xx + a(x,t) y) dt + u_0(t) delta-flux at 0 + u_L(t) at L
///        + b(x,t) y dW,
///   z(t) = (y(0, t), y(L, t)).
///
/// Discretization: n cell-centered unknowns, spacing h = L/n, standard
/// three-point Laplacian with Neumann closures (corner diagonal entries
/// -1/h^2), flux control entering the boundary cells with weight 1/h and
/// traces read by second-order extrapolation.  The state space carries the
/// Gram h*I, so coefficient vectors behave like L^2(0, L) functions; the
/// Laplacian eigenpairs are the discrete cosine modes and are used to
/// evaluate the semigroup spectrally.

#include <cstdint>
#include <functional>

#include <Eigen/Dense>

#include "swlp/system.hpp"

namespace swlp {

/// Geometry, grids and coefficient tables of one heat run.
///
/// The coefficient tables hold cell values per time node: 0 columns mean
/// the coefficient is absent, 1 column a time-constant field, `steps`
/// columns a piecewise-constant-in-time field (value on [t_n, t_{n+1})).
struct HeatModel {
  double length = 1.0;
  int cells = 24;
  TimeGrid grid;
  Eigen::MatrixXd drift;  // reaction coefficient a
  Eigen::MatrixXd noise;  // noise coefficient b

  double spacing() const { return length / cells; }
  Eigen::VectorXd centers() const;

  /// Model on the doubled grid: every cell splits in two, coefficient
  /// tables prolonged piecewise-constantly (callers sampling smooth fields
  /// should resample instead; constant tables are reproduced exactly).
  HeatModel refined() const;
};

/// Model with time-constant coefficient fields a(x), b(x) sampled at the
/// cell centers.  Pass a null function for an absent coefficient.
HeatModel make_heat_model(double length, int cells, const TimeGrid& grid,
                          const std::function<double(double)>& a,
                          const std::function<double(double)>& b);

/// Assembles the system realization (spaces, spectral generator, control
/// and trace maps, coefficient processes with recorded bounds).
StochasticSystemRealization<double> build_heat_system(const HeatModel& model);

/// Piecewise-constant prolongation of a coarse cell field onto the doubled
/// grid (the coupling used by refinement studies).
Eigen::VectorXd prolong_cells(const Eigen::VectorXd& coarse);

/// Stationary lifting of a boundary flux pair: solves (I - A) v = B u, the
/// coercive regularized Neumann problem used to absorb the boundary input
/// into the domain.
Eigen::VectorXd neumann_lift(const HeatModel& model, const Eigen::Vector2d& flux);

/// Time-dependent lifting of an input signal: node values v(t_n) and their
/// finite-difference time derivative (centered inside, one-sided at the
/// ends; the input is extended constantly to the final node).  A
/// time-constant input yields rate identically zero.
struct LiftedField {
  Eigen::MatrixXd values;  // cells x (steps + 1)
  Eigen::MatrixXd rate;    // cells x (steps + 1)
};
LiftedField neumann_lift_signal(const HeatModel& model, const InputSignal<double>& u);

/// Solves the equation through the lifting construction: substitute
/// y = w + v, step the shifted equation
///   dw = (A w + a w + (a v + v - v_t)) dt + b (w + v) dW
/// and add the lifting back.  Agrees with the direct stepping solve up to
/// O(dt + h^2); the cross-check between the two constructions is one of
/// the main consistency tests of this instance.
Trajectory<double> lifted_solve(const HeatModel& model, const Eigen::VectorXd& y0,
                                const InputSignal<double>& u, const BrownianEnsemble& ens);

/// Itô energy balance of a stepping trajectory.  Per path,
///   lhs = |y_N|^2 + 2 sum_n dt D(y_n),      D(y) = -h y^T A y >= 0,
///   rhs = |y_0|^2 + 2 sum_n dt (u_0 y_first + u_L y_last)
///         + 2 sum_n dt sum_i h a_i y_i^2 + sum_n dt sum_i h b_i^2 y_i^2,
/// with all norms in the h-weighted Gram and the flux paired against the
/// boundary cells (the exact discrete adjoint of the control map).  The
/// residual lhs - rhs has a deterministic O(dt) part and, with noise, a
/// zero-mean Monte Carlo part.
struct EnergyBalance {
  McEstimate residual;
  double mean_lhs = 0.0;
  double mean_rhs = 0.0;
  Eigen::VectorXd per_path;  // lhs - rhs per path, feeding sample exports
};
EnergyBalance energy_identity_residual(const HeatModel& model, const Trajectory<double>& traj,
                                       const InputSignal<double>& u, const BrownianEnsemble& ens);

/// Streaming form of the same balance from a deterministic initial state:
/// agrees bit for bit with the trajectory version but never stores paths,
/// so it scales to large ensembles.
EnergyBalance energy_identity_residual(const HeatModel& model, const Eigen::VectorXd& y0,
                                       const InputSignal<double>& u, const BrownianEnsemble& ens);

/// Discrete trace constant: the smallest kappa with
///   |z_side|^2 <= kappa (||y||^2 + ||grad_h y||^2)
/// for both trace rows, computed as a Rayleigh quotient against the
/// H^1-like form h(I - A).  Stable under grid refinement.
double heat_trace_constant(const HeatModel& model);

/// Sampled well-posedness study: worst and 0.9-quantile over trials of
///   (max_n sqrt(E|y_n|^2) + sqrt(E sum dt |z_n|^2)) / (|y0| + |u|),
/// at the base resolution, on the space-refined model (same paths, data
/// prolonged piecewise-constantly, which preserves the h-weighted norm),
/// and with the path count doubled.
WellposednessStudy heat_wellposed_constant(const HeatModel& model, int trials, int paths,
                                           std::uint64_t seed);

}  // namespace swlp
