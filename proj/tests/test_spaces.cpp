#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <complex>
#include <string>

#include <Eigen/Dense>

#include "swlp/error.hpp"
#include "swlp/spaces.hpp"
#include "swlp/stochastics.hpp"

using namespace swlp;

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

Eigen::MatrixXd random_spd(Index n, std::uint64_t stream) {
  const Eigen::MatrixXd m = random_matrix(n, n, stream);
  return m * m.transpose() + 0.5 * Eigen::MatrixXd::Identity(n, n);
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

}  // namespace

TEST_CASE("euclidean and weighted spaces expose dim, label and gram") {
  const auto e = make_euclidean(3, "plain");
  CHECK(e->dim() == 3);
  CHECK(e->label() == "plain");
  CHECK((e->gram() - Eigen::MatrixXd::Identity(3, 3)).norm() == 0.0);

  Eigen::VectorXd w(3);
  w << 2.0, 0.5, 1.0;
  const auto ws = make_weighted(w, "weighted");
  Eigen::VectorXd x(3);
  x << 1.0, 2.0, -1.0;
  CHECK(norm(*ws, x) == doctest::Approx(std::sqrt(2.0 + 4.0 * 0.5 + 1.0)).epsilon(1e-14));
}

TEST_CASE("gram validation rejects non-symmetric and non-positive matrices") {
  Eigen::MatrixXd skew(2, 2);
  skew << 1.0, 0.3, -0.3, 1.0;
  CHECK(error_code([&] { make_space(2, skew, "bad"); }) == "bad-argument");

  Eigen::MatrixXd indef(2, 2);
  indef << 1.0, 0.0, 0.0, -1.0;
  CHECK(error_code([&] { make_space(2, indef, "bad"); }) == "bad-argument");

  Eigen::VectorXd w(2);
  w << 1.0, 0.0;
  CHECK(error_code([&] { make_weighted(w, "bad"); }) == "bad-argument");
}

TEST_CASE("inner product is linear in the first slot and conjugate in the second") {
  const auto sp = make_space(4, random_spd(4, 1), "gram");
  const Eigen::VectorXcd x = gaussian_cvector(7, 2, 0, 4);
  const Eigen::VectorXcd y = gaussian_cvector(7, 2, 1, 4);
  const cdouble alpha(0.7, -1.3);

  // Manual evaluation: x^T G conj(y).
  const Eigen::MatrixXcd g = sp->gram().cast<cdouble>();
  const cdouble manual = (x.transpose() * g * y.conjugate())(0);
  CHECK(std::abs(inner<cdouble>(*sp, x, y) - manual) <= 1e-12 * std::abs(manual));

  const cdouble lhs = inner<cdouble>(*sp, Eigen::VectorXcd(alpha * x), y);
  CHECK(std::abs(lhs - alpha * inner<cdouble>(*sp, x, y)) <= 1e-12);
  const cdouble rhs = inner<cdouble>(*sp, x, Eigen::VectorXcd(alpha * y));
  CHECK(std::abs(rhs - std::conj(alpha) * inner<cdouble>(*sp, x, y)) <= 1e-12);

  // Norm agrees with the inner product.
  const double n2 = norm<cdouble>(*sp, x);
  CHECK(std::abs(n2 * n2 - std::real(inner<cdouble>(*sp, x, x))) <= 1e-12 * n2 * n2);
}

TEST_CASE("adjoint pairing <Mx, y> = <x, M* y> holds for random maps") {
  const auto dom = make_space(5, random_spd(5, 3), "dom");
  const auto cod = make_space(3, random_spd(3, 4), "cod");

  SUBCASE("real") {
    for (int trial = 0; trial < 100; ++trial) {
      const LinearMap<double> m(dom, cod, random_matrix(3, 5, 100 + trial));
      const auto mstar = adjoint(m);
      const Eigen::VectorXd x = gaussian_vector(9, 5, trial, 5);
      const Eigen::VectorXd y = gaussian_vector(9, 6, trial, 3);
      const double a = inner<double>(*cod, m.matrix * x, y);
      const double b = inner<double>(*dom, x, mstar.matrix * y);
      CHECK(std::abs(a - b) <= 1e-10 * (1.0 + std::abs(a)));
    }
  }
  SUBCASE("complex") {
    for (int trial = 0; trial < 100; ++trial) {
      const LinearMap<cdouble> m(dom, cod, random_cmatrix(3, 5, 200 + trial));
      const auto mstar = adjoint(m);
      const Eigen::VectorXcd x = gaussian_cvector(9, 7, trial, 5);
      const Eigen::VectorXcd y = gaussian_cvector(9, 8, trial, 3);
      const cdouble a = inner<cdouble>(*cod, m.matrix * x, y);
      const cdouble b = inner<cdouble>(*dom, x, mstar.matrix * y);
      CHECK(std::abs(a - b) <= 1e-10 * (1.0 + std::abs(a)));
    }
  }
}

TEST_CASE("operator norm: exact for diagonal maps in weighted spaces, bounds all actions") {
  Eigen::VectorXd w(4);
  w << 0.25, 1.0, 4.0, 9.0;
  const auto sp = make_weighted(w, "w");
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(4, 4);
  d.diagonal() << -0.5, 2.0, -3.25, 1.0;
  const LinearMap<double> m(sp, sp, d);
  CHECK(op_norm(m) == doctest::Approx(3.25).epsilon(1e-12));

  const auto dom = make_space(5, random_spd(5, 11), "dom");
  const auto cod = make_space(4, random_spd(4, 12), "cod");
  const LinearMap<double> r(dom, cod, random_matrix(4, 5, 13));
  const double bound = op_norm(r);
  CHECK(op_norm(adjoint(r)) == doctest::Approx(bound).epsilon(1e-10));
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::VectorXd x = gaussian_vector(9, 14, trial, 5);
    CHECK(norm(*cod, Eigen::VectorXd(r.matrix * x)) <=
          bound * norm(*dom, x) * (1.0 + 1e-10));
  }
}

TEST_CASE("semigroup: exact identity at zero, law, spectral/dense agreement") {
  const auto sp = make_euclidean(4, "state");
  const Eigen::MatrixXd base = random_matrix(4, 4, 21);
  const Eigen::MatrixXd sym = -0.5 * (base + base.transpose()) - Eigen::MatrixXd::Identity(4, 4);

  GeneratorRealization<double> dense;
  dense.space = sp;
  dense.matrix = sym;

  GeneratorRealization<double> spectral = dense;
  {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    GeneratorRealization<double>::Spectral s;
    s.values = es.eigenvalues();
    s.vectors = es.eigenvectors();
    s.vectors_inv = es.eigenvectors().transpose();
    spectral.spectral = std::move(s);
  }

  // t = 0 is the identity exactly, and apply returns the argument bit for bit.
  CHECK((semigroup_matrix(spectral, 0.0) - Eigen::MatrixXd::Identity(4, 4)).norm() == 0.0);
  const Eigen::VectorXd x = gaussian_vector(3, 22, 0, 4);
  const Eigen::VectorXd x0 = semigroup_apply(spectral, 0.0, x);
  CHECK((x0 - x).norm() == 0.0);

  // Spectral and dense evaluations agree.
  CHECK((semigroup_matrix(spectral, 0.37) - semigroup_matrix(dense, 0.37)).norm() <= 1e-10);

  // Semigroup law.
  const Eigen::MatrixXd lhs = semigroup_matrix(spectral, 0.7) * semigroup_matrix(spectral, 0.3);
  CHECK((lhs - semigroup_matrix(spectral, 1.0)).norm() <= 1e-10);

  // Negative time requires a group.
  CHECK(error_code([&] { semigroup_matrix(spectral, -0.1); }) == "bad-argument");
  GeneratorRealization<double> group = spectral;
  group.group = true;
  const Eigen::MatrixXd round_trip = semigroup_matrix(group, -0.4) * semigroup_matrix(group, 0.4);
  CHECK((round_trip - Eigen::MatrixXd::Identity(4, 4)).norm() <= 1e-10);
}

TEST_CASE("skew-adjoint spectral group preserves the norm") {
  Eigen::VectorXd w(3);
  w << 1.0, 0.25, 1.0 / 9.0;
  const auto sp = make_weighted(w, "modal");
  GeneratorRealization<cdouble> gen;
  gen.space = sp;
  GeneratorRealization<cdouble>::Spectral s;
  s.values = Eigen::Vector3cd(cdouble(0, 1), cdouble(0, 4), cdouble(0, 9));
  s.vectors = Eigen::MatrixXcd::Identity(3, 3);
  s.vectors_inv = s.vectors;
  gen.matrix = Eigen::MatrixXcd(s.values.asDiagonal());
  gen.spectral = std::move(s);
  gen.group = true;

  const Eigen::VectorXcd x = gaussian_cvector(5, 23, 0, 3);
  for (double t : {0.13, 1.7, -0.9}) {
    const Eigen::VectorXcd y = semigroup_apply(gen, t, x);
    CHECK(norm<cdouble>(*sp, y) == doctest::Approx(norm<cdouble>(*sp, x)).epsilon(1e-12));
  }
}
