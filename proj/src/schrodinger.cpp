#include "swlp/schrodinger.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

namespace swlp {

namespace {

constexpr double kPi = std::numbers::pi;
const cdouble kI(0.0, 1.0);

// Linear interpolation of a coefficient table from the closed collocation
// grid with `coarse + 2` points onto the one with `fine + 2` points.  The
// endpoints map onto each other exactly, so endpoint vanishing survives.
Eigen::MatrixXd interp_table(const Eigen::MatrixXd& table, int coarse, int fine) {
  if (table.size() == 0) return table;
  Eigen::MatrixXd out(fine + 2, table.cols());
  const double ratio = double(coarse + 1) / double(fine + 1);
  for (int i = 0; i <= fine + 1; ++i) {
    const double pos = i * ratio;
    const int j0 = std::min(static_cast<int>(pos), coarse);
    const double theta = pos - j0;
    out.row(i) = (1.0 - theta) * table.row(j0) + theta * table.row(j0 + 1);
  }
  return out;
}

void check_table(const Eigen::MatrixXd& table, int modes, int steps, const char* name) {
  if (table.size() == 0) return;
  if (table.rows() != modes + 2)
    fail("bad-argument", std::string("schrodinger model: ") + name +
                             " table must hold modes + 2 collocation values per column");
  if (table.cols() != 1 && table.cols() != steps)
    fail("bad-argument",
         std::string("schrodinger model: ") + name + " table must have 1 or `steps` columns");
  const double scale = 1.0 + table.cwiseAbs().maxCoeff();
  for (Eigen::Index c = 0; c < table.cols(); ++c)
    if (std::abs(table(0, c)) > 1e-10 * scale || std::abs(table(modes + 1, c)) > 1e-10 * scale)
      fail("bad-argument", std::string("schrodinger model: the ") + name +
                               " field must vanish at the boundary (the multiplication "
                               "transform assumes sine-representable fields)");
}

void check_sides(const std::vector<int>& sides, const char* name) {
  if (sides.empty()) fail("bad-argument", std::string("schrodinger model: ") + name + " is empty");
  if (sides.size() > 2) fail("bad-argument", std::string("schrodinger model: ") + name +
                                                 " may list each boundary point once");
  for (int s : sides)
    if (s != 0 && s != 1)
      fail("bad-argument",
           std::string("schrodinger model: ") + name + " entries must be 0 (x = 0) or 1 (x = pi)");
  if (sides.size() == 2 && sides[0] == sides[1])
    fail("bad-argument", std::string("schrodinger model: ") + name + " repeats a boundary point");
}

void check_model(const SchrodingerModel& model) {
  if (model.modes < 8)
    fail("bad-argument", "schrodinger model: need at least eight modes");
  check_sides(model.control_side, "control_side");
  check_sides(model.observed_sides(), "observation side list");
  check_table(model.drift, model.modes, model.grid.steps, "drift");
  check_table(model.noise, model.modes, model.grid.steps, "noise");
}

/// Interior sine collocation matrix S_{jk} = sin(j k pi / (K + 1)),
/// j, k = 1 .. K; symmetric, and (2/(K+1)) S^2 = I.
Eigen::MatrixXd sine_transform(int modes) {
  Eigen::MatrixXd s(modes, modes);
  for (int j = 1; j <= modes; ++j)
    for (int k = 1; k <= modes; ++k) s(j - 1, k - 1) = std::sin(j * k * kPi / (modes + 1));
  return s;
}

/// Mode-space matrix of multiplication by the field whose collocation
/// values (interior part of a closed-grid column) are `values`:
///   J = (2/(K+1)) S diag(values) S.
Eigen::MatrixXd mult_matrix(const Eigen::MatrixXd& s, const Eigen::VectorXd& values) {
  const int modes = static_cast<int>(s.rows());
  return (2.0 / (modes + 1)) * s * values.asDiagonal() * s;
}

/// Complex multiplication operators for every column of a coefficient
/// table (empty table -> zero process), plus the sup-in-time Gram operator
/// norm of the family.
CoefficientProcess<cdouble> table_process(const Eigen::MatrixXd& table, const Eigen::MatrixXd& s,
                                          const SpacePtr& state, double* bound) {
  CoefficientProcess<cdouble> proc;
  *bound = 0.0;
  if (table.size() == 0) return proc;
  const int modes = static_cast<int>(s.rows());
  proc.table.reserve(static_cast<size_t>(table.cols()));
  for (Eigen::Index c = 0; c < table.cols(); ++c) {
    const Eigen::MatrixXd j = mult_matrix(s, table.col(c).segment(1, modes));
    *bound = std::max(*bound, op_norm(LinearMap<double>(state, state, j)));
    proc.table.push_back(detail::complex_cast<cdouble>(j));
  }
  return proc;
}

}  // namespace

Eigen::VectorXd SchrodingerModel::collocation_points() const {
  return Eigen::VectorXd::LinSpaced(modes + 2, 0.0, kPi);
}

SchrodingerModel SchrodingerModel::refined() const {
  SchrodingerModel fine = *this;
  fine.modes = 2 * modes;
  fine.drift = interp_table(drift, modes, fine.modes);
  fine.noise = interp_table(noise, modes, fine.modes);
  return fine;
}

SchrodingerModel make_schrodinger_model(int modes, const TimeGrid& grid,
                                        std::vector<int> control_side,
                                        const std::function<double(double)>& a,
                                        const std::function<double(double)>& b) {
  SchrodingerModel model;
  model.modes = modes;
  model.grid = grid;
  model.control_side = std::move(control_side);
  const Eigen::VectorXd x = model.collocation_points();
  if (a) model.drift = x.unaryExpr(a);
  if (b) model.noise = x.unaryExpr(b);
  check_model(model);
  return model;
}

StochasticSystemRealization<cdouble> build_schrodinger_system(const SchrodingerModel& model) {
  check_model(model);
  const int modes = model.modes;
  const std::vector<int>& obs = model.observed_sides();

  StochasticSystemRealization<cdouble> sys;
  sys.label = "schrodinger";
  sys.grid = model.grid;
  Eigen::VectorXd weights(modes);
  for (int k = 1; k <= modes; ++k) weights(k - 1) = 1.0 / (double(k) * k);
  sys.state = make_weighted(weights, "schrodinger-state");
  sys.control = make_euclidean(static_cast<Index>(model.control_side.size()),
                               "schrodinger-boundary");
  sys.observation = make_euclidean(static_cast<Index>(obs.size()), "schrodinger-trace");

  // iLam is diagonal in the sine basis, so the spectral data are trivial;
  // group = true because the flow is unitary and runs both ways.
  sys.generator.space = sys.state;
  typename GeneratorRealization<cdouble>::Spectral sp;
  sp.values.resize(modes);
  for (int k = 1; k <= modes; ++k) sp.values(k - 1) = kI * double(k) * double(k);
  sp.vectors = Eigen::MatrixXcd::Identity(modes, modes);
  sp.vectors_inv = sp.vectors;
  sys.generator.matrix = sp.values.asDiagonal();
  sys.generator.spectral = std::move(sp);
  sys.generator.group = true;

  // B g = -i Lam Ext(g): column k of the side-s block is
  //   -i k sqrt(2/pi) (side 0),  -i k sqrt(2/pi) (-1)^{k+1} (side pi).
  const double scale = std::sqrt(2.0 / kPi);
  auto boundary_block = [&](const std::vector<int>& sides) {
    Eigen::MatrixXcd b(modes, sides.size());
    for (size_t c = 0; c < sides.size(); ++c)
      for (int k = 1; k <= modes; ++k) {
        const double sign = sides[c] == 0 ? 1.0 : (k % 2 == 1 ? 1.0 : -1.0);
        b(k - 1, static_cast<Index>(c)) = -kI * double(k) * scale * sign;
      }
    return b;
  };
  sys.input = LinearMap<cdouble>(sys.control, sys.state, boundary_block(model.control_side));

  // The observation is the Gram adjoint of the (possibly different-sided)
  // boundary map: a weighted trace of the Laplacian preimage of the state.
  const LinearMap<cdouble> b_obs(sys.observation, sys.state, boundary_block(obs));
  sys.output = adjoint(b_obs);

  const Eigen::MatrixXd s = sine_transform(modes);
  sys.f1 = table_process(model.drift, s, sys.state, &sys.f1_bound);
  sys.f2 = table_process(model.noise, s, sys.state, &sys.f2_bound);
  sys.validate();
  return sys;
}

Eigen::VectorXcd dirichlet_map(const SchrodingerModel& model, const Eigen::Vector2cd& datum) {
  const double scale = std::sqrt(2.0 / kPi);
  Eigen::VectorXcd coeff(model.modes);
  for (int k = 1; k <= model.modes; ++k) {
    const double sign = k % 2 == 1 ? 1.0 : -1.0;
    coeff(k - 1) = scale / k * (datum(0) + sign * datum(1));
  }
  return coeff;
}

Eigen::VectorXcd bstar_trace(const SchrodingerModel& model, const Eigen::VectorXcd& f) {
  if (f.size() != model.modes)
    fail("dim-mismatch", "bstar_trace: state has " + std::to_string(f.size()) + " modes, model " +
                             std::to_string(model.modes));
  const std::vector<int>& sides = model.observed_sides();
  const double scale = std::sqrt(2.0 / kPi);
  Eigen::VectorXcd out(sides.size());
  for (size_t c = 0; c < sides.size(); ++c) {
    cdouble acc = 0.0;
    for (int k = 1; k <= model.modes; ++k) {
      const double sign = sides[c] == 0 ? 1.0 : -(k % 2 == 1 ? -1.0 : 1.0);
      acc += sign * f(k - 1) / double(k);
    }
    out(static_cast<Index>(c)) = kI * scale * acc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multiplier identity

namespace {

/// Second-order finite differences and trapezoid weights on the closed
/// uniform grid over [0, pi] with `points` nodes; one-sided second-order
/// stencils close the first and second derivative at the endpoints.
struct FdOps {
  int m = 0;  // intervals
  double h = 0.0;
  Eigen::VectorXd x, w;

  explicit FdOps(int points) : m(points - 1), h(kPi / (points - 1)) {
    x = Eigen::VectorXd::LinSpaced(points, 0.0, kPi);
    w = Eigen::VectorXd::Constant(points, h);
    w(0) = w(m) = 0.5 * h;
  }

  template <class Vec>
  Vec first(const Vec& v) const {
    Vec d(v.size());
    const double s = 1.0 / (2.0 * h);
    d(0) = (-3.0 * v(0) + 4.0 * v(1) - v(2)) * s;
    for (int j = 1; j < m; ++j) d(j) = (v(j + 1) - v(j - 1)) * s;
    d(m) = (v(m - 2) - 4.0 * v(m - 1) + 3.0 * v(m)) * s;
    return d;
  }

  template <class Vec>
  Vec second(const Vec& v) const {
    Vec d(v.size());
    const double s = 1.0 / (h * h);
    d(0) = (2.0 * v(0) - 5.0 * v(1) + 4.0 * v(2) - v(3)) * s;
    for (int j = 1; j < m; ++j) d(j) = (v(j - 1) - 2.0 * v(j) + v(j + 1)) * s;
    d(m) = (-v(m - 3) + 4.0 * v(m - 2) - 5.0 * v(m - 1) + 2.0 * v(m)) * s;
    return d;
  }
};

void check_field_spec(const MultiplierFieldSpec& spec, const BrownianEnsemble* ens,
                      const TimeGrid& grid) {
  if (spec.brownian_time_shift != 0.0)
    fail("unsupported-regime",
         "multiplier: a shifted Brownian factor is anticipating; the identity holds for "
         "adapted fields only");
  if (!spec.mu) fail("bad-argument", "multiplier: a multiplier field mu is required");
  if (spec.points < 9) fail("bad-argument", "multiplier: need at least nine spatial points");
  const bool det = static_cast<bool>(spec.deterministic);
  const bool sto = static_cast<bool>(spec.brownian_profile);
  if (det == sto)
    fail("bad-argument",
         "multiplier: give either a closed-form field or a Brownian profile, not both");
  if (spec.drift_profile && !sto)
    fail("bad-argument", "multiplier: a drift profile only makes sense next to a Brownian one");
  if (det && ens)
    fail("bad-argument", "multiplier: a deterministic field study takes no ensemble");
  if (sto) {
    if (!ens) fail("bad-argument", "multiplier: a semimartingale field needs a Brownian ensemble");
    if (ens->grid.steps != grid.steps || ens->grid.horizon != grid.horizon)
      fail("bad-argument", "multiplier: ensemble grid does not match the requested grid");
  }
}

/// Per-path evaluation of the identity at one (points, grid) resolution.
MultiplierSamples evaluate_level(const MultiplierFieldSpec& spec, int points, const TimeGrid& grid,
                                 const BrownianEnsemble* ens) {
  const FdOps fd(points);
  const Eigen::VectorXd mu = fd.x.unaryExpr(spec.mu);
  const Eigen::VectorXd mux = fd.first(mu);
  const int steps = grid.steps;
  const double dt = grid.dt();
  const bool sto = static_cast<bool>(spec.brownian_profile);

  Eigen::VectorXcd fprof, gprof;
  Eigen::MatrixXd wnodes;
  if (sto) {
    fprof = fd.x.unaryExpr(spec.brownian_profile);
    gprof = spec.drift_profile ? Eigen::VectorXcd(fd.x.unaryExpr(spec.drift_profile))
                               : Eigen::VectorXcd(Eigen::VectorXcd::Zero(points));
    wnodes = brownian_nodes(*ens);
  }

  const int paths = sto ? ens->paths : 1;
  MultiplierSamples out;
  out.dt = dt;
  out.lhs.resize(paths);
  out.terms.resize(paths, 6);

  parallel_for(paths, [&](std::int64_t p) {
    Eigen::VectorXcd phin(points), phinext(points);
    auto field_row = [&](int n, Eigen::VectorXcd& row) {
      if (sto) {
        row = fprof * wnodes(p, n) + gprof * grid.node(n);
      } else {
        const double t = grid.node(n);
        for (int j = 0; j < points; ++j) row(j) = spec.deterministic(fd.x(j), t);
      }
    };

    field_row(0, phin);
    const Eigen::VectorXcd phi0 = phin;
    cdouble lhs = 0.0, t1 = 0.0, t2 = 0.0, t4 = 0.0, t5 = 0.0, t6 = 0.0;
    for (int n = 0; n < steps; ++n) {
      field_row(n + 1, phinext);
      const Eigen::VectorXcd dphi = phinext - phin;
      const Eigen::VectorXcd dpx = fd.first(phin);
      const Eigen::VectorXcd dpxx = fd.second(phin);
      const Eigen::VectorXcd ddx = fd.first(dphi);
      for (int j = 0; j < points; ++j) {
        lhs += fd.w(j) * mu(j) *
               (std::conj(dpx(j)) * (dphi(j) + kI * dpxx(j) * dt) -
                dpx(j) * (std::conj(dphi(j)) - kI * std::conj(dpxx(j)) * dt));
        t4 -= kI * (dt * fd.w(j) * mux(j) * std::norm(dpx(j)));
        t5 += fd.w(j) * mux(j) * phin(j) * std::conj(dphi(j));
        t6 -= fd.w(j) * mu(j) * std::conj(ddx(j)) * dphi(j);
      }
      t1 += kI * (dt * (std::norm(dpx(fd.m)) * mu(fd.m) - std::norm(dpx(0)) * mu(0)));
      t2 -= phin(fd.m) * std::conj(dphi(fd.m)) * mu(fd.m) - phin(0) * std::conj(dphi(0)) * mu(0);
      phin.swap(phinext);
    }
    // Endpoint-in-time pairing int mu conj(phi_x) phi dx at T minus at 0.
    const Eigen::VectorXcd dxT = fd.first(phin);
    const Eigen::VectorXcd dx0 = fd.first(phi0);
    cdouble t3 = 0.0;
    for (int j = 0; j < points; ++j)
      t3 += fd.w(j) * mu(j) * (std::conj(dxT(j)) * phin(j) - std::conj(dx0(j)) * phi0(j));

    out.lhs(p) = lhs;
    out.terms(p, 0) = t1;
    out.terms(p, 1) = t2;
    out.terms(p, 2) = t3;
    out.terms(p, 3) = t4;
    out.terms(p, 4) = t5;
    out.terms(p, 5) = t6;
  });
  return out;
}

}  // namespace

double MultiplierSamples::residual() const {
  const Eigen::VectorXcd gap = lhs - terms.rowwise().sum();
  return std::abs(gap.mean());
}

double MultiplierSamples::sem() const {
  const Eigen::VectorXcd gap = lhs - terms.rowwise().sum();
  return std::hypot(mc_estimate(gap.real()).sem, mc_estimate(gap.imag()).sem);
}

double MultiplierSamples::ablated_residual(int index) const {
  if (index < 0 || index >= 6) fail("bad-argument", "multiplier: term index out of range");
  const Eigen::VectorXcd gap = lhs - terms.rowwise().sum() + terms.col(index);
  return std::abs(gap.mean());
}

MultiplierStudy multiplier_identity_residual(const MultiplierFieldSpec& spec, const TimeGrid& grid,
                                             const BrownianEnsemble* ens) {
  check_field_spec(spec, ens, grid);

  std::vector<BrownianEnsemble> chain;
  if (ens) {
    chain.push_back(*ens);
    chain.push_back(refine_brownian(chain[0]));
    chain.push_back(refine_brownian(chain[1]));
  }

  MultiplierStudy study;
  int points = spec.points;
  TimeGrid level_grid = grid;
  for (int level = 0; level < 3; ++level) {
    MultiplierSamples samples =
        evaluate_level(spec, points, level_grid, ens ? &chain[static_cast<size_t>(level)] : nullptr);
    study.residuals[static_cast<size_t>(level)] = samples.residual();
    if (level == 0) study.base = std::move(samples);
    points = 2 * (points - 1) + 1;
    level_grid = level_grid.refined();
  }
  study.residual = study.residuals[0];
  study.sem = study.base.sem();
  study.order = 0.5 * (std::log2(study.residuals[0] / study.residuals[1]) +
                       std::log2(study.residuals[1] / study.residuals[2]));
  return study;
}

// ---------------------------------------------------------------------------
// Backward adjoint and duality

BackwardSolution backward_adjoint_solve(const SchrodingerModel& model,
                                        const Eigen::VectorXcd& v_terminal, const TimeGrid& grid) {
  check_model(model);
  if (grid.steps != model.grid.steps || grid.horizon != model.grid.horizon)
    fail("bad-argument", "backward adjoint: grid does not match the model grid");
  if (v_terminal.size() != model.modes)
    fail("dim-mismatch", "backward adjoint: terminal data have the wrong mode count");

  const int modes = model.modes;
  const int steps = grid.steps;
  const double dt = grid.dt();

  // S*(dt) = S(-dt) = diag(exp(-i k^2 dt)): the flow is unitary in the
  // diag(1/k^2) Gram, so the adjoint runs the group backwards.
  Eigen::VectorXcd sstar(modes);
  for (int k = 1; k <= modes; ++k) sstar(k - 1) = std::polar(1.0, -double(k) * double(k) * dt);

  std::vector<Eigen::MatrixXcd> jdrift;
  if (model.drift.size() != 0) {
    const Eigen::MatrixXd s = sine_transform(modes);
    jdrift.reserve(static_cast<size_t>(model.drift.cols()));
    for (Eigen::Index c = 0; c < model.drift.cols(); ++c)
      jdrift.push_back(
          detail::complex_cast<cdouble>(mult_matrix(s, model.drift.col(c).segment(1, modes))));
  }

  BackwardSolution out;
  out.v.resize(modes, steps + 1);
  out.mart = Eigen::MatrixXcd::Zero(modes, steps + 1);
  out.v.col(steps) = v_terminal;
  for (int n = steps - 1; n >= 0; --n) {
    Eigen::VectorXcd w = sstar.asDiagonal() * out.v.col(n + 1);
    if (!jdrift.empty())
      w += dt * (jdrift[jdrift.size() == 1 ? 0 : static_cast<size_t>(n)] * w);
    out.v.col(n) = w;
  }
  return out;
}

DualityEstimate duality_residual(const SchrodingerModel& model, const Eigen::VectorXcd& y0,
                                 const InputSignal<cdouble>& u, const Eigen::VectorXcd& v_terminal,
                                 const BrownianEnsemble& ens) {
  const auto sys = build_schrodinger_system(model);
  detail::check_member(*sys.state, y0.size(), "duality initial state");
  const BackwardSolution bwd = backward_adjoint_solve(model, v_terminal, model.grid);

  const int steps = model.grid.steps;
  const double dt = model.grid.dt();
  const Eigen::MatrixXcd gram = sys.state->gram().cast<cdouble>();
  const Eigen::MatrixXcd bstar = adjoint(sys.input).matrix;

  // <y_0, v_0> and the control pairing are path-independent.
  cdouble fixed = detail::contract<cdouble>(y0, gram * bwd.v.col(0).conjugate());
  if (!u.is_zero()) {
    for (int n = 0; n < steps; ++n) {
      const Eigen::VectorXcd bv = bstar * bwd.v.col(n);
      fixed += dt * bv.dot(u.values.col(n));  // = <u_n, B* v_n>
    }
  }

  const Eigen::VectorXcd gvt = gram * v_terminal.conjugate();
  Eigen::VectorXcd gaps(ens.paths);
  detail::stepping_walk(
      sys, [&](Index) { return y0; }, u, ens,
      [&](Index p, int n, const Eigen::VectorXcd& y) {
        if (n == steps) gaps(p) = detail::contract<cdouble>(y, gvt) - fixed;
      });

  DualityEstimate est;
  est.residual = std::abs(gaps.mean());
  est.sem = std::hypot(mc_estimate(gaps.real()).sem, mc_estimate(gaps.imag()).sem);
  est.max_pathwise = gaps.cwiseAbs().maxCoeff();
  return est;
}

double backward_hidden_regularity(const SchrodingerModel& model,
                                  const Eigen::VectorXcd& v_terminal) {
  const auto sys = build_schrodinger_system(model);
  detail::check_member(*sys.state, v_terminal.size(), "backward hidden regularity");
  const double denom = detail::real_part(inner<cdouble>(*sys.state, v_terminal, v_terminal));
  if (!(denom > 0.0))
    fail("bad-argument", "backward hidden regularity: terminal data must be nonzero");

  const BackwardSolution bwd = backward_adjoint_solve(model, v_terminal, model.grid);
  const Eigen::MatrixXcd bstar = adjoint(sys.input).matrix;
  const double dt = model.grid.dt();
  double acc = 0.0;
  for (int n = 0; n < model.grid.steps; ++n) acc += dt * (bstar * bwd.v.col(n)).squaredNorm();
  return acc / denom;
}

WellposednessStudy schrodinger_wellposed_constant(const SchrodingerModel& model, int trials,
                                                  int paths, std::uint64_t seed,
                                                  const SchrodingerModel* fine_model) {
  if (trials < 1) fail("bad-argument", "schrodinger_wellposed_constant: trials must be >= 1");
  if (paths < 2) fail("bad-argument", "schrodinger_wellposed_constant: need at least two paths");
  if (fine_model) {
    if (fine_model->modes != 2 * model.modes)
      fail("bad-argument", "schrodinger_wellposed_constant: fine model must double the modes");
    if (fine_model->grid.steps != model.grid.steps ||
        fine_model->grid.horizon != model.grid.horizon)
      fail("bad-argument", "schrodinger_wellposed_constant: fine model must keep the time grid");
    if (fine_model->control_side != model.control_side ||
        fine_model->observed_sides() != model.observed_sides())
      fail("bad-argument", "schrodinger_wellposed_constant: fine model must keep the boundary");
  }

  const auto sys = build_schrodinger_system(model);
  const auto fine_sys =
      build_schrodinger_system(fine_model ? *fine_model : model.refined());
  // Zero-padding the new modes preserves the diag(1/k^2) norm exactly, so
  // both levels see the same sampled data.
  const Index fine_dim = fine_sys.state->dim();
  const std::function<Eigen::VectorXcd(const Eigen::VectorXcd&)> pad =
      [fine_dim](const Eigen::VectorXcd& y) {
        Eigen::VectorXcd out = Eigen::VectorXcd::Zero(fine_dim);
        out.head(y.size()) = y;
        return out;
      };

  WellposednessStudy study;
  study.base = detail::wellposed_level<cdouble>(sys, *sys.state, nullptr, trials, paths, seed);
  study.space_refined =
      detail::wellposed_level<cdouble>(fine_sys, *sys.state, pad, trials, paths, seed);
  study.paths_doubled =
      detail::wellposed_level<cdouble>(sys, *sys.state, nullptr, trials, 2 * paths, seed);
  return study;
}

}  // namespace swlp
