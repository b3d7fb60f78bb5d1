#include "swlp/heat.hpp"

#include <cmath>
#include <functional>
#include <numbers>

namespace swlp {

Eigen::VectorXd HeatModel::centers() const {
  const double h = spacing();
  Eigen::VectorXd x(cells);
  for (int i = 0; i < cells; ++i) x(i) = (i + 0.5) * h;
  return x;
}

namespace {

Eigen::MatrixXd prolong_table(const Eigen::MatrixXd& table) {
  if (table.size() == 0) return table;
  Eigen::MatrixXd fine(2 * table.rows(), table.cols());
  for (Eigen::Index i = 0; i < table.rows(); ++i) {
    fine.row(2 * i) = table.row(i);
    fine.row(2 * i + 1) = table.row(i);
  }
  return fine;
}

int table_col(const Eigen::MatrixXd& table, int n) { return table.cols() == 1 ? 0 : n; }

}  // namespace

HeatModel HeatModel::refined() const {
  HeatModel fine = *this;
  fine.cells = 2 * cells;
  fine.drift = prolong_table(drift);
  fine.noise = prolong_table(noise);
  return fine;
}

HeatModel make_heat_model(double length, int cells, const TimeGrid& grid,
                          const std::function<double(double)>& a,
                          const std::function<double(double)>& b) {
  if (!(length > 0.0)) fail("bad-argument", "heat model: length must be positive");
  if (cells < 4)
    fail("bad-argument",
         "heat model: need at least four cells (the trace stencil uses two cells per side)");
  HeatModel model;
  model.length = length;
  model.cells = cells;
  model.grid = grid;
  const Eigen::VectorXd x = model.centers();
  if (a) model.drift = x.unaryExpr(a);
  if (b) model.noise = x.unaryExpr(b);
  return model;
}

Eigen::VectorXd prolong_cells(const Eigen::VectorXd& coarse) {
  Eigen::VectorXd fine(2 * coarse.size());
  for (Eigen::Index i = 0; i < coarse.size(); ++i) {
    fine(2 * i) = coarse(i);
    fine(2 * i + 1) = coarse(i);
  }
  return fine;
}

namespace {

/// Three-point Neumann Laplacian on cell centers; the corner diagonal
/// entries -1/h^2 encode the zero-flux closure and make the all-ones
/// vector an exact kernel vector (discrete mass conservation).
Eigen::MatrixXd laplacian_matrix(int n, double h) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  const double w = 1.0 / (h * h);
  for (int i = 0; i < n; ++i) {
    a(i, i) = -2.0 * w;
    if (i > 0) a(i, i - 1) = w;
    if (i + 1 < n) a(i, i + 1) = w;
  }
  a(0, 0) = -w;
  a(n - 1, n - 1) = -w;
  return a;
}

CoefficientProcess<double> diag_process(const Eigen::MatrixXd& table, int steps,
                                        const char* name) {
  CoefficientProcess<double> proc;
  if (table.size() == 0) return proc;
  if (table.cols() != 1 && table.cols() != steps)
    fail("bad-argument", std::string("heat model: ") + name + " table must have 1 or `steps` columns");
  proc.table.reserve(static_cast<size_t>(table.cols()));
  for (Eigen::Index c = 0; c < table.cols(); ++c)
    proc.table.push_back(Eigen::MatrixXd(table.col(c).asDiagonal()));
  return proc;
}

}  // namespace

StochasticSystemRealization<double> build_heat_system(const HeatModel& model) {
  if (model.cells < 4)
    fail("bad-argument",
         "heat model: need at least four cells (the trace stencil uses two cells per side)");
  const int n = model.cells;
  const double h = model.spacing();
  constexpr double pi = std::numbers::pi;

  StochasticSystemRealization<double> sys;
  sys.label = "heat";
  sys.grid = model.grid;
  sys.state = make_weighted(Eigen::VectorXd::Constant(n, h), "heat-state");
  sys.control = make_euclidean(2, "heat-flux");
  sys.observation = make_euclidean(2, "heat-trace");

  // Generator with its exact cosine-mode eigensystem: the mode
  //   v_k(i) = cos(k pi (i + 1/2) / n),  lambda_k = -(4/h^2) sin^2(k pi / 2n),
  // diagonalizes the Neumann Laplacian; the normalized modes form an
  // orthogonal matrix, so the inverse is the transpose.
  sys.generator.space = sys.state;
  sys.generator.matrix = laplacian_matrix(n, h);
  typename GeneratorRealization<double>::Spectral sp;
  sp.values.resize(n);
  sp.vectors.resize(n, n);
  for (int k = 0; k < n; ++k) {
    const double s = std::sin(0.5 * k * pi / n);
    sp.values(k) = -4.0 / (h * h) * s * s;
    const double scale = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
    for (int i = 0; i < n; ++i) sp.vectors(i, k) = scale * std::cos(k * pi * (i + 0.5) / n);
  }
  sp.vectors_inv = sp.vectors.transpose();
  sys.generator.spectral = std::move(sp);
  sys.generator.group = false;
  sys.generator.shift = 0.0;

  Eigen::MatrixXd bmat = Eigen::MatrixXd::Zero(n, 2);
  bmat(0, 0) = 1.0 / h;
  bmat(n - 1, 1) = 1.0 / h;
  sys.input = LinearMap<double>(sys.control, sys.state, bmat);

  // Second-order boundary-trace extrapolation from the two nearest cells.
  Eigen::MatrixXd cmat = Eigen::MatrixXd::Zero(2, n);
  cmat(0, 0) = 1.5;
  cmat(0, 1) = -0.5;
  cmat(1, n - 1) = 1.5;
  cmat(1, n - 2) = -0.5;
  sys.output = LinearMap<double>(sys.state, sys.observation, cmat);

  sys.f1 = diag_process(model.drift, model.grid.steps, "drift");
  sys.f2 = diag_process(model.noise, model.grid.steps, "noise");
  // Diagonal multiplication in the h-weighted Gram has operator norm equal
  // to the largest absolute cell value.
  sys.f1_bound = model.drift.size() ? model.drift.cwiseAbs().maxCoeff() : 0.0;
  sys.f2_bound = model.noise.size() ? model.noise.cwiseAbs().maxCoeff() : 0.0;
  sys.validate();
  return sys;
}

Eigen::VectorXd neumann_lift(const HeatModel& model, const Eigen::Vector2d& flux) {
  const int n = model.cells;
  const double h = model.spacing();
  Eigen::MatrixXd lhs = Eigen::MatrixXd::Identity(n, n) - laplacian_matrix(n, h);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
  rhs(0) = flux(0) / h;
  rhs(n - 1) = flux(1) / h;
  return Eigen::LLT<Eigen::MatrixXd>(lhs).solve(rhs);
}

LiftedField neumann_lift_signal(const HeatModel& model, const InputSignal<double>& u) {
  const int n = model.cells;
  const int steps = model.grid.steps;
  const double dt = model.grid.dt();
  const double h = model.spacing();
  LiftedField lift;
  lift.values = Eigen::MatrixXd::Zero(n, steps + 1);
  lift.rate = Eigen::MatrixXd::Zero(n, steps + 1);
  if (u.is_zero()) return lift;
  if (u.values.cols() < steps) fail("dim-mismatch", "neumann_lift_signal: input shorter than grid");

  const Eigen::MatrixXd lhs = Eigen::MatrixXd::Identity(n, n) - laplacian_matrix(n, h);
  const Eigen::LLT<Eigen::MatrixXd> llt(lhs);
  for (int m = 0; m <= steps; ++m) {
    // The input signal has no value at the final node; extend constantly.
    const int col = std::min(m, steps - 1);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
    rhs(0) = u.values(0, col) / h;
    rhs(n - 1) = u.values(1, col) / h;
    lift.values.col(m) = llt.solve(rhs);
  }
  for (int m = 1; m < steps; ++m)
    lift.rate.col(m) = (lift.values.col(m + 1) - lift.values.col(m - 1)) / (2.0 * dt);
  lift.rate.col(0) = (lift.values.col(1) - lift.values.col(0)) / dt;
  lift.rate.col(steps) = (lift.values.col(steps) - lift.values.col(steps - 1)) / dt;
  return lift;
}

Trajectory<double> lifted_solve(const HeatModel& model, const Eigen::VectorXd& y0,
                                const InputSignal<double>& u, const BrownianEnsemble& ens) {
  const auto sys = build_heat_system(model);
  if (ens.grid.steps != model.grid.steps || ens.grid.horizon != model.grid.horizon)
    fail("bad-argument", "lifted_solve: ensemble grid does not match the model grid");
  detail::check_member(*sys.state, y0.size(), "lifted_solve initial state");
  const int steps = model.grid.steps;
  const double dt = model.grid.dt();
  const LiftedField lift = neumann_lift_signal(model, u);
  const Eigen::MatrixXd sdt = semigroup_matrix(sys.generator, dt);

  Trajectory<double> traj;
  traj.space = sys.state;
  traj.grid = model.grid;
  traj.scheme = "lifted";
  traj.seed = ens.seed;
  traj.ensemble_level = ens.level;
  traj.states.assign(static_cast<size_t>(ens.paths),
                     Eigen::MatrixXd(model.cells, steps + 1));

  const bool has_a = model.drift.size() != 0;
  const bool has_b = model.noise.size() != 0;
  parallel_for(ens.paths, [&](std::int64_t p) {
    Eigen::MatrixXd& out = traj.states[static_cast<size_t>(p)];
    Eigen::VectorXd w = y0 - lift.values.col(0);
    Eigen::VectorXd tmp(model.cells);
    out.col(0) = w + lift.values.col(0);
    for (int n = 0; n < steps; ++n) {
      tmp = w;
      if (has_a) {
        const auto a = model.drift.col(table_col(model.drift, n));
        // Shifted drift: a w + (a v + v - v_t).
        tmp += dt * (a.cwiseProduct(w + lift.values.col(n)) + lift.values.col(n) -
                     lift.rate.col(n));
      } else {
        tmp += dt * (lift.values.col(n) - lift.rate.col(n));
      }
      if (has_b) {
        const auto b = model.noise.col(table_col(model.noise, n));
        tmp += ens.increments(p, n) * b.cwiseProduct(w + lift.values.col(n));
      }
      w = sdt * tmp;
      if (!w.allFinite())
        fail("divergence", "lifted_solve: state stopped being finite at node " + std::to_string(n + 1));
      out.col(n + 1) = w + lift.values.col(n + 1);
    }
  });
  return traj;
}

EnergyBalance energy_identity_residual(const HeatModel& model, const Trajectory<double>& traj,
                                       const InputSignal<double>& u, const BrownianEnsemble& ens) {
  if (static_cast<int>(traj.states.size()) != ens.paths)
    fail("dim-mismatch", "energy_identity_residual: trajectory/ensemble path counts differ");
  if (traj.grid.steps != model.grid.steps)
    fail("bad-argument", "energy_identity_residual: trajectory grid does not match");
  const int n = model.cells;
  const int steps = model.grid.steps;
  const double dt = model.grid.dt();
  const double h = model.spacing();
  const Eigen::MatrixXd amat = laplacian_matrix(n, h);
  const bool has_u = !u.is_zero();
  const bool has_a = model.drift.size() != 0;
  const bool has_b = model.noise.size() != 0;

  Eigen::VectorXd resid(ens.paths), lhs_all(ens.paths), rhs_all(ens.paths);
  parallel_for(ens.paths, [&](std::int64_t p) {
    const Eigen::MatrixXd& y = traj.states[static_cast<size_t>(p)];
    double diss = 0.0;
    double rhs = h * y.col(0).squaredNorm();
    for (int m = 0; m < steps; ++m) {
      const auto ym = y.col(m);
      diss += 2.0 * dt * (-h * ym.dot(amat * ym));
      if (has_u) rhs += 2.0 * dt * (u.values(0, m) * ym(0) + u.values(1, m) * ym(n - 1));
      if (has_a) {
        const auto a = model.drift.col(table_col(model.drift, m));
        rhs += 2.0 * dt * h * a.cwiseProduct(ym).dot(ym);
      }
      if (has_b) {
        const auto b = model.noise.col(table_col(model.noise, m));
        rhs += dt * h * b.cwiseAbs2().cwiseProduct(ym).dot(ym);
      }
    }
    const double lhs = h * y.col(steps).squaredNorm() + diss;
    resid(p) = lhs - rhs;
    lhs_all(p) = lhs;
    rhs_all(p) = rhs;
  });
  EnergyBalance bal;
  bal.residual = mc_estimate(resid);
  bal.mean_lhs = lhs_all.mean();
  bal.mean_rhs = rhs_all.mean();
  bal.per_path = std::move(resid);
  return bal;
}

EnergyBalance energy_identity_residual(const HeatModel& model, const Eigen::VectorXd& y0,
                                       const InputSignal<double>& u, const BrownianEnsemble& ens) {
  const auto sys = build_heat_system(model);
  const int n = model.cells;
  const int steps = model.grid.steps;
  const double dt = model.grid.dt();
  const double h = model.spacing();
  const Eigen::MatrixXd amat = laplacian_matrix(n, h);
  const bool has_u = !u.is_zero();
  const bool has_a = model.drift.size() != 0;
  const bool has_b = model.noise.size() != 0;

  Eigen::VectorXd diss = Eigen::VectorXd::Zero(ens.paths);
  Eigen::VectorXd rhs_all(ens.paths), lhs_all(ens.paths);
  detail::stepping_walk(
      sys, [&](Index) { return y0; }, u, ens,
      [&](Index p, int m, const Eigen::VectorXd& y) {
        if (m == 0) rhs_all(p) = h * y.squaredNorm();
        if (m < steps) {
          diss(p) += 2.0 * dt * (-h * y.dot(amat * y));
          if (has_u) rhs_all(p) += 2.0 * dt * (u.values(0, m) * y(0) + u.values(1, m) * y(n - 1));
          if (has_a) {
            const auto a = model.drift.col(table_col(model.drift, m));
            rhs_all(p) += 2.0 * dt * h * a.cwiseProduct(y).dot(y);
          }
          if (has_b) {
            const auto b = model.noise.col(table_col(model.noise, m));
            rhs_all(p) += dt * h * b.cwiseAbs2().cwiseProduct(y).dot(y);
          }
        } else {
          lhs_all(p) = h * y.squaredNorm() + diss(p);
        }
      });
  EnergyBalance bal;
  bal.residual = mc_estimate(lhs_all - rhs_all);
  bal.mean_lhs = lhs_all.mean();
  bal.mean_rhs = rhs_all.mean();
  bal.per_path = lhs_all - rhs_all;
  return bal;
}

double heat_trace_constant(const HeatModel& model) {
  const int n = model.cells;
  const double h = model.spacing();
  // H^1-like SPD form h(I - A); the trace rows are the extrapolation
  // stencils of the observation map.
  const Eigen::MatrixXd m = h * (Eigen::MatrixXd::Identity(n, n) - laplacian_matrix(n, h));
  const Eigen::LLT<Eigen::MatrixXd> llt(m);
  double kappa = 0.0;
  for (int side = 0; side < 2; ++side) {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(n);
    if (side == 0) {
      c(0) = 1.5;
      c(1) = -0.5;
    } else {
      c(n - 1) = 1.5;
      c(n - 2) = -0.5;
    }
    kappa = std::max(kappa, c.dot(llt.solve(c)));
  }
  return kappa;
}

WellposednessStudy heat_wellposed_constant(const HeatModel& model, int trials, int paths,
                                           std::uint64_t seed) {
  if (trials < 1) fail("bad-argument", "heat_wellposed_constant: trials must be >= 1");
  if (paths < 2) fail("bad-argument", "heat_wellposed_constant: need at least two paths");
  const auto sys = build_heat_system(model);
  const auto fine_sys = build_heat_system(model.refined());
  // Draws live on the coarse grid; the refined level prolongs them
  // piecewise-constantly, which preserves the h-weighted norm exactly.
  const std::function<Eigen::VectorXd(const Eigen::VectorXd&)> lift_draw =
      [](const Eigen::VectorXd& y) { return prolong_cells(y); };
  WellposednessStudy study;
  study.base = detail::wellposed_level<double>(sys, *sys.state, nullptr, trials, paths, seed);
  study.space_refined =
      detail::wellposed_level<double>(fine_sys, *sys.state, lift_draw, trials, paths, seed);
  study.paths_doubled =
      detail::wellposed_level<double>(sys, *sys.state, nullptr, trials, 2 * paths, seed);
  return study;
}

}  // namespace swlp
