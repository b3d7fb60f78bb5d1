#include "swlp/stochastics.hpp"

#include <cmath>

#include <boost/math/special_functions/erf.hpp>

#include "swlp/parallel.hpp"

namespace swlp {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t counter_hash(std::uint64_t seed, std::uint64_t stream, std::uint64_t path,
                           std::uint64_t step) {
  // Chain the finalizer so every coordinate is fully diffused before the
  // next one enters; related keys (path vs path+1, etc.) decorrelate.
  std::uint64_t h = mix64(seed ^ 0x243f6a8885a308d3ULL);
  h = mix64(h ^ stream);
  h = mix64(h ^ path);
  h = mix64(h ^ step);
  return h;
}

double uniform_draw(std::uint64_t seed, std::uint64_t stream, std::uint64_t path,
                    std::uint64_t step) {
  const std::uint64_t bits = counter_hash(seed, stream, path, step);
  // Top 53 bits, centered in its bin: u in [2^-54, 1 - 2^-54].
  return static_cast<double>(bits >> 11) * 0x1.0p-53 + 0x1.0p-54;
}

double normal_draw(std::uint64_t seed, std::uint64_t stream, std::uint64_t path,
                   std::uint64_t step) {
  const double u = uniform_draw(seed, stream, path, step);
  return std::sqrt(2.0) * boost::math::erf_inv(2.0 * u - 1.0);
}

Eigen::VectorXd gaussian_vector(std::uint64_t seed, std::uint64_t stream, std::uint64_t path,
                                Index n) {
  Eigen::VectorXd v(n);
  for (Index i = 0; i < n; ++i) v(i) = normal_draw(seed, stream, path, static_cast<std::uint64_t>(i));
  return v;
}

Eigen::VectorXcd gaussian_cvector(std::uint64_t seed, std::uint64_t stream, std::uint64_t path,
                                  Index n) {
  Eigen::VectorXcd v(n);
  const double s = std::sqrt(0.5);
  for (Index i = 0; i < n; ++i)
    v(i) = cdouble(s * normal_draw(seed, stream, path, 2 * static_cast<std::uint64_t>(i)),
                   s * normal_draw(seed, stream, path, 2 * static_cast<std::uint64_t>(i) + 1));
  return v;
}

BrownianEnsemble sample_brownian(const TimeGrid& grid, int paths, std::uint64_t seed,
                                 std::int64_t first_path) {
  if (paths < 1) fail("bad-argument", "sample_brownian: need at least one path");
  if (first_path < 0) fail("bad-argument", "sample_brownian: first_path must be >= 0");
  BrownianEnsemble ens;
  ens.grid = grid;
  ens.paths = paths;
  ens.seed = seed;
  ens.level = 0;
  ens.first_path = first_path;
  ens.increments.resize(paths, grid.steps);
  const double root_dt = std::sqrt(grid.dt());
  auto* inc = &ens.increments;
  parallel_for(paths, [&, root_dt](std::int64_t p) {
    const std::uint64_t gp = static_cast<std::uint64_t>(first_path + p);
    for (int n = 0; n < grid.steps; ++n)
      (*inc)(p, n) = root_dt * normal_draw(seed, streams::kBrownianBase, gp,
                                           static_cast<std::uint64_t>(n));
  });
  return ens;
}

BrownianEnsemble refine_brownian(const BrownianEnsemble& ens) {
  BrownianEnsemble fine;
  fine.grid = ens.grid.refined();
  fine.paths = ens.paths;
  fine.seed = ens.seed;
  fine.level = ens.level + 1;
  fine.first_path = ens.first_path;
  fine.increments.resize(ens.paths, fine.grid.steps);
  // Midpoint displacement about the mean: N(0, dt_coarse / 4).  The children
  // s/2 + xi and s/2 - xi are independent N(0, dt_coarse / 2) and their
  // rounded sum misses the parent by at most one ulp of the larger child
  // (an exact sum is unattainable whenever |s| is far below |xi|: no pair
  // at xi's magnitude has representable bits fine enough to hit s).
  const double mid_sd = 0.5 * std::sqrt(ens.grid.dt());
  const std::uint64_t stream = streams::refinement(fine.level);
  auto* inc = &fine.increments;
  parallel_for(ens.paths, [&, mid_sd, stream](std::int64_t p) {
    const std::uint64_t gp = static_cast<std::uint64_t>(ens.first_path + p);
    for (int n = 0; n < ens.grid.steps; ++n) {
      const double half = 0.5 * ens.increments(p, n);
      const double xi =
          mid_sd * normal_draw(ens.seed, stream, gp, static_cast<std::uint64_t>(n));
      (*inc)(p, 2 * n) = half + xi;
      (*inc)(p, 2 * n + 1) = half - xi;
    }
  });
  return fine;
}

Eigen::MatrixXd brownian_nodes(const BrownianEnsemble& ens) {
  Eigen::MatrixXd w(ens.paths, ens.grid.steps + 1);
  w.col(0).setZero();
  for (int n = 0; n < ens.grid.steps; ++n) w.col(n + 1) = w.col(n) + ens.increments.col(n);
  return w;
}

McEstimate mc_estimate(const Eigen::VectorXd& samples) {
  if (samples.size() < 1) fail("bad-argument", "mc_estimate: empty sample");
  McEstimate est;
  est.paths = samples.size();
  est.mean = samples.mean();
  if (samples.size() == 1) {
    est.sem = std::numeric_limits<double>::quiet_NaN();
    return est;
  }
  const double ssq = (samples.array() - est.mean).square().sum() / double(samples.size() - 1);
  est.sem = std::sqrt(ssq / double(samples.size()));
  return est;
}

}  // namespace swlp
