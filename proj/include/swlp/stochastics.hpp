#pragma once

/// Time grids, counter-based Gaussian draws, Brownian increment ensembles
/// with dyadic refinement coupling, Itô quadratures and Monte Carlo
/// summaries.
///
/// Randomness is a pure function of (seed, stream, path, step): there is no
/// generator state, so draws are identical no matter how work is scheduled.
/// Stream 0 holds the base Brownian increments; stream L >= 1 holds the
/// bridge midpoints inserted by the L-th dyadic refinement; streams >= 1000
/// are free for auxiliary sampling (initial data, test directions).

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "swlp/error.hpp"
#include "swlp/spaces.hpp"

namespace swlp {

/// Uniform partition of [0, horizon] into `steps` intervals.
struct TimeGrid {
  double horizon = 1.0;
  int steps = 1;

  TimeGrid() = default;
  TimeGrid(double horizon_, int steps_) : horizon(horizon_), steps(steps_) {
    if (!(horizon > 0.0)) fail("bad-argument", "time grid: horizon must be positive");
    if (steps < 1) fail("bad-argument", "time grid: need at least one step");
  }

  double dt() const { return horizon / steps; }

  /// Node t_n; the endpoints are returned exactly (no accumulated rounding).
  double node(int n) const {
    if (n < 0 || n > steps) fail("bad-argument", "time grid: node index out of range");
    if (n == 0) return 0.0;
    if (n == steps) return horizon;
    return n * dt();
  }

  TimeGrid refined() const { return TimeGrid(horizon, 2 * steps); }
};

// ---------------------------------------------------------------------------
// Counter-based draws

namespace streams {
inline constexpr std::uint64_t kBrownianBase = 0;  ///< level-0 increments
/// Bridge midpoints for the refinement producing level `level` (level >= 1).
inline constexpr std::uint64_t refinement(int level) { return static_cast<std::uint64_t>(level); }
inline constexpr std::uint64_t kAuxiliaryFirst = 1000;  ///< free for samplers
}  // namespace streams

/// SplitMix64 finalizer; full avalanche on 64 bits.
std::uint64_t mix64(std::uint64_t x);

/// Hash of the four coordinates, each absorbed through a full avalanche.
std::uint64_t counter_hash(std::uint64_t seed, std::uint64_t stream, std::uint64_t path,
                           std::uint64_t step);

/// Uniform draw in the open interval (0, 1), 53 significant bits.
double uniform_draw(std::uint64_t seed, std::uint64_t stream, std::uint64_t path,
                    std::uint64_t step);

/// Standard normal draw via the inverse error function of the uniform draw.
double normal_draw(std::uint64_t seed, std::uint64_t stream, std::uint64_t path,
                   std::uint64_t step);

/// n independent standard normals, components indexed by step.
Eigen::VectorXd gaussian_vector(std::uint64_t seed, std::uint64_t stream, std::uint64_t path,
                                Index n);

/// n complex draws with independent N(0, 1/2) real and imaginary parts,
/// so E|z_i|^2 = 1 (components use steps 2i and 2i + 1).
Eigen::VectorXcd gaussian_cvector(std::uint64_t seed, std::uint64_t stream, std::uint64_t path,
                                  Index n);

// ---------------------------------------------------------------------------
// Brownian ensembles

/// A matrix of Brownian increments: row p, column n holds
/// W(t_{n+1}) - W(t_n) for path `first_path + p`.
///
/// `level` counts how many dyadic refinements produced this ensemble from a
/// level-0 draw; `first_path` supports streaming a large ensemble in chunks
/// (the chunk with first_path = q reproduces rows q.. of the full draw
/// bit for bit).
struct BrownianEnsemble {
  TimeGrid grid;
  int paths = 0;
  std::uint64_t seed = 0;
  int level = 0;
  std::int64_t first_path = 0;
  Eigen::MatrixXd increments;

  double increment(Index p, Index n) const { return increments(p, n); }
};

/// Fresh level-0 ensemble on `grid`.
BrownianEnsemble sample_brownian(const TimeGrid& grid, int paths, std::uint64_t seed,
                                 std::int64_t first_path = 0);

/// Bridge-coupled ensemble on the doubled grid.  The two children of every
/// coarse increment sum to it up to one rounding error (~1e-19 absolute),
/// which is what makes coupled refinement studies meaningful.
BrownianEnsemble refine_brownian(const BrownianEnsemble& ens);

/// Path values at the nodes (paths x (steps + 1), first column zero).
Eigen::MatrixXd brownian_nodes(const BrownianEnsemble& ens);

// ---------------------------------------------------------------------------
// Itô quadrature

/// Left-endpoint Itô sum per path: sum_n f(p, n) * dW(p, n).  The integrand
/// holds values at the left nodes t_0 .. t_{N-1}, which enforces
/// predictability by construction.
template <class Scalar>
Vector<Scalar> ito_integral(const TimeGrid& grid, const Matrix<Scalar>& integrand,
                            const BrownianEnsemble& ens) {
  if (ens.grid.steps != grid.steps || ens.grid.horizon != grid.horizon)
    fail("bad-argument", "ito_integral: ensemble grid does not match");
  if (integrand.rows() != ens.paths || integrand.cols() < grid.steps)
    fail("dim-mismatch", "ito_integral: integrand must be paths x steps");
  Vector<Scalar> out(ens.paths);
  for (Index p = 0; p < ens.paths; ++p) {
    Scalar acc{};
    for (Index n = 0; n < grid.steps; ++n) acc += integrand(p, n) * Scalar(ens.increments(p, n));
    out(p) = acc;
  }
  return out;
}

/// Semigroup-weighted Itô sum at node k, per path:
///   sum_{n<k} S((k - n) dt) g(p, n) dW(p, n),
/// the noise term of the discrete variation-of-constants formula.  The
/// integrand supplies one dim-vector per (path, node); kernel exponents use
/// elapsed index differences so concatenated evaluations agree exactly.
template <class Scalar>
std::vector<Vector<Scalar>> stochastic_convolution(
    const GeneratorRealization<Scalar>& gen,
    const std::vector<Matrix<Scalar>>& integrand,  // per path: dim x steps
    const BrownianEnsemble& ens, int k) {
  if (k < 0 || k > ens.grid.steps) fail("bad-argument", "stochastic_convolution: node out of range");
  if (static_cast<int>(integrand.size()) != ens.paths)
    fail("dim-mismatch", "stochastic_convolution: one integrand block per path required");
  const double dt = ens.grid.dt();
  // One kernel per lag, shared across paths.
  std::vector<Matrix<Scalar>> kernels(static_cast<size_t>(k) + 1);
  for (int m = 1; m <= k; ++m) kernels[m] = semigroup_matrix(gen, m * dt);
  std::vector<Vector<Scalar>> out(ens.paths, Vector<Scalar>::Zero(gen.space->dim()));
  for (Index p = 0; p < ens.paths; ++p) {
    Vector<Scalar> acc = Vector<Scalar>::Zero(gen.space->dim());
    for (int n = 0; n < k; ++n)
      acc.noalias() += kernels[k - n] * (integrand[p].col(n) * Scalar(ens.increments(p, n)));
    out[p] = acc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Monte Carlo summary

/// Sample mean with standard error of the mean (sem is NaN for a single
/// sample; serialization renders that as null).
struct McEstimate {
  double mean = 0.0;
  double sem = 0.0;
  Index paths = 0;
};

McEstimate mc_estimate(const Eigen::VectorXd& samples);

}  // namespace swlp
