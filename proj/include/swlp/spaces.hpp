#pragma once

/// Finite-dimensional state/control/observation spaces with explicit Gram
/// forms, Gram-weighted linear maps between them, and semigroup evaluation
/// for matrix generators.
///
/// Every inner product, norm, adjoint and operator norm in this library is
/// taken with respect to the Gram matrix of the space involved, never the
/// raw Euclidean one.  This is what lets a coefficient vector on a grid
/// stand in for an L^2 function (Gram = h\,I), or a sine-coefficient vector
/// stand in for an H^{-1} function (Gram = diag(1/\lambda_k)), without the
/// calling code caring which it is.

#include <cmath>
#include <complex>
#include <memory>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/SVD>
#include <unsupported/Eigen/MatrixFunctions>

#include "swlp/error.hpp"

namespace swlp {

using Index = Eigen::Index;

template <class Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using cdouble = std::complex<double>;

namespace detail {

template <class Scalar>
struct is_complex : std::false_type {};
template <class T>
struct is_complex<std::complex<T>> : std::true_type {};

inline double real_part(double x) { return x; }
inline double real_part(const cdouble& x) { return x.real(); }

}  // namespace detail

/// A finite-dimensional Hilbert space: a dimension, a symmetric positive
/// definite Gram matrix G (always real, also used for complex coefficient
/// vectors), and a label used in error messages and serialized output.
///
/// The Cholesky factor G = L L^T is computed once at construction; it backs
/// norms, adjoints and operator norms.  Construction rejects non-symmetric
/// or non-positive-definite input.
class DiscreteSpace {
 public:
  DiscreteSpace(Index dim, Eigen::MatrixXd gram, std::string label)
      : dim_(dim), gram_(std::move(gram)), label_(std::move(label)) {
    if (dim_ < 1) fail("bad-argument", "space '" + label_ + "': dimension must be >= 1");
    if (gram_.rows() != dim_ || gram_.cols() != dim_)
      fail("dim-mismatch", "space '" + label_ + "': Gram matrix is " +
                               std::to_string(gram_.rows()) + "x" + std::to_string(gram_.cols()) +
                               ", expected " + std::to_string(dim_) + "x" + std::to_string(dim_));
    const double scale = gram_.cwiseAbs().maxCoeff();
    if (!(scale > 0.0) || !gram_.allFinite())
      fail("bad-argument", "space '" + label_ + "': Gram matrix must be finite and nonzero");
    if ((gram_ - gram_.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
      fail("bad-argument", "space '" + label_ + "': Gram matrix is not symmetric");
    llt_.compute(gram_);
    // Cholesky succeeding (with a strictly positive diagonal) is the
    // positive-definiteness check; a semidefinite G fails here.
    if (llt_.info() != Eigen::Success ||
        llt_.matrixLLT().diagonal().minCoeff() <= 0.0)
      fail("bad-argument", "space '" + label_ + "': Gram matrix is not positive definite");
  }

  /// Euclidean space of the given dimension (G = I).
  static DiscreteSpace euclidean(Index dim, std::string label) {
    return DiscreteSpace(dim, Eigen::MatrixXd::Identity(dim, dim), std::move(label));
  }

  /// Diagonally weighted space (G = diag(w), w > 0 entrywise).
  static DiscreteSpace weighted(const Eigen::VectorXd& w, std::string label) {
    return DiscreteSpace(w.size(), Eigen::MatrixXd(w.asDiagonal()), std::move(label));
  }

  Index dim() const { return dim_; }
  const std::string& label() const { return label_; }
  const Eigen::MatrixXd& gram() const { return gram_; }
  const Eigen::LLT<Eigen::MatrixXd>& cholesky() const { return llt_; }

  /// Lower Cholesky factor L with G = L L^T.
  Eigen::MatrixXd cholesky_factor() const { return llt_.matrixL(); }

 private:
  Index dim_;
  Eigen::MatrixXd gram_;
  std::string label_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

/// Spaces are shared immutably between maps, systems and trajectories.
using SpacePtr = std::shared_ptr<const DiscreteSpace>;

inline SpacePtr make_space(Index dim, Eigen::MatrixXd gram, std::string label) {
  return std::make_shared<const DiscreteSpace>(dim, std::move(gram), std::move(label));
}
inline SpacePtr make_euclidean(Index dim, std::string label) {
  return std::make_shared<const DiscreteSpace>(DiscreteSpace::euclidean(dim, std::move(label)));
}
inline SpacePtr make_weighted(const Eigen::VectorXd& w, std::string label) {
  return std::make_shared<const DiscreteSpace>(DiscreteSpace::weighted(w, std::move(label)));
}

namespace detail {

inline void check_member(const DiscreteSpace& sp, Index n, const char* who) {
  if (n != sp.dim())
    fail("dim-mismatch", std::string(who) + ": vector of size " + std::to_string(n) +
                             " is not a member of space '" + sp.label() + "' (dim " +
                             std::to_string(sp.dim()) + ")");
}

}  // namespace detail

/// Gram inner product <x, y> = x^T G conj(y): linear in the first slot,
/// conjugate-linear in the second.  For real scalars this is the familiar
/// weighted dot product.
template <class Scalar>
Scalar inner(const DiscreteSpace& sp, const Vector<Scalar>& x, const Vector<Scalar>& y) {
  detail::check_member(sp, x.size(), "inner");
  detail::check_member(sp, y.size(), "inner");
  if constexpr (detail::is_complex<Scalar>::value)
    return (x.transpose() * sp.gram() * y.conjugate())(0);
  else
    return x.dot(sp.gram() * y);
}

/// Gram norm ||x|| = sqrt(<x, x>).  Computed as the Euclidean norm of
/// L^T x, which is nonnegative by construction.
template <class Scalar>
double norm(const DiscreteSpace& sp, const Vector<Scalar>& x) {
  detail::check_member(sp, x.size(), "norm");
  if constexpr (detail::is_complex<Scalar>::value) {
    const Eigen::MatrixXd Lt = Eigen::MatrixXd(sp.cholesky().matrixU());
    return (Lt.cast<cdouble>() * x).norm();
  } else {
    return (Eigen::MatrixXd(sp.cholesky().matrixU()) * x).norm();
  }
}

/// A linear map between two discrete spaces, stored densely.  Maps are
/// value types; the spaces they reference are shared.
template <class Scalar>
struct LinearMap {
  SpacePtr domain;
  SpacePtr codomain;
  Matrix<Scalar> matrix;

  LinearMap() = default;
  LinearMap(SpacePtr dom, SpacePtr cod, Matrix<Scalar> m)
      : domain(std::move(dom)), codomain(std::move(cod)), matrix(std::move(m)) {
    if (matrix.rows() != codomain->dim() || matrix.cols() != domain->dim())
      fail("dim-mismatch", "map " + domain->label() + " -> " + codomain->label() +
                               ": matrix is " + std::to_string(matrix.rows()) + "x" +
                               std::to_string(matrix.cols()));
  }

  Vector<Scalar> operator()(const Vector<Scalar>& x) const {
    detail::check_member(*domain, x.size(), ("map -> " + codomain->label()).c_str());
    return matrix * x;
  }
};

/// Gram adjoint M* = G_dom^{-1} M^H G_cod, i.e. the unique map with
/// <M x, y>_cod = <x, M* y>_dom for all x, y.
template <class Scalar>
LinearMap<Scalar> adjoint(const LinearMap<Scalar>& m) {
  Matrix<Scalar> mh;
  if constexpr (detail::is_complex<Scalar>::value)
    mh = m.matrix.adjoint() * m.codomain->gram().template cast<Scalar>();
  else
    mh = m.matrix.transpose() * m.codomain->gram();
  // Solve G_dom X = M^H G_cod column by column via the cached Cholesky.
  Matrix<Scalar> adj(m.domain->dim(), m.codomain->dim());
  if constexpr (detail::is_complex<Scalar>::value) {
    Eigen::MatrixXd re = m.domain->cholesky().solve(mh.real());
    Eigen::MatrixXd im = m.domain->cholesky().solve(mh.imag());
    adj.real() = re;
    adj.imag() = im;
  } else {
    adj = m.domain->cholesky().solve(mh);
  }
  return LinearMap<Scalar>(m.codomain, m.domain, std::move(adj));
}

/// Composition (second ∘ first); the intermediate spaces must agree in
/// dimension (labels are advisory only and not compared).
template <class Scalar>
LinearMap<Scalar> compose(const LinearMap<Scalar>& second, const LinearMap<Scalar>& first) {
  if (first.codomain->dim() != second.domain->dim())
    fail("dim-mismatch", "compose: " + first.codomain->label() + " (dim " +
                             std::to_string(first.codomain->dim()) + ") does not feed " +
                             second.domain->label() + " (dim " +
                             std::to_string(second.domain->dim()) + ")");
  return LinearMap<Scalar>(first.domain, second.codomain, second.matrix * first.matrix);
}

/// Operator norm of M : (dom, G_dom) -> (cod, G_cod), computed exactly (up
/// to SVD accuracy) as the largest singular value of L_cod^T M L_dom^{-T}.
template <class Scalar>
double op_norm(const LinearMap<Scalar>& m) {
  const Eigen::MatrixXd Ldom = m.domain->cholesky_factor();
  const Eigen::MatrixXd Lcod_t = Eigen::MatrixXd(m.codomain->cholesky().matrixU());
  Matrix<Scalar> x;  // M L_dom^{-T} = (L_dom^{-1} M^T)^T
  if constexpr (detail::is_complex<Scalar>::value) {
    Matrix<Scalar> lt = Ldom.template triangularView<Eigen::Lower>()
                            .solve(Eigen::MatrixXd::Identity(Ldom.rows(), Ldom.cols()))
                            .transpose()
                            .template cast<Scalar>();
    x = Lcod_t.template cast<Scalar>() * m.matrix * lt;
  } else {
    Matrix<Scalar> solved = Ldom.template triangularView<Eigen::Lower>().solve(m.matrix.transpose());
    x = Lcod_t * solved.transpose();
  }
  Eigen::JacobiSVD<Matrix<Scalar>> svd(x);
  return svd.singularValues()(0);
}

/// A generator together with how to evaluate its semigroup.
///
/// When an eigendecomposition A = V diag(values) V^{-1} is supplied the
/// semigroup is evaluated spectrally, S(t) = V diag(exp(t*values)) V^{-1};
/// otherwise a dense matrix exponential is used.  `group` marks generators
/// of groups (e.g. skew-adjoint ones), for which negative times are legal;
/// for plain semigroups a negative time is a "bad-argument" error.
///
/// `shift` records a spectral shift constant beta such that A - beta is
/// dissipative in the Gram form of `space`.  It is carried as metadata
/// (serialized, reported) and does not alter the evaluation of S(t).
template <class Scalar>
struct GeneratorRealization {
  SpacePtr space;
  Matrix<Scalar> matrix;

  struct Spectral {
    Vector<Scalar> values;
    Matrix<Scalar> vectors;      // columns are eigenvectors
    Matrix<Scalar> vectors_inv;  // cached inverse (transpose for orthogonal bases)
  };
  std::optional<Spectral> spectral;

  double shift = 0.0;
  bool group = false;
};

namespace detail {

template <class Scalar>
void check_time(const GeneratorRealization<Scalar>& gen, double t) {
  if (!std::isfinite(t)) fail("bad-argument", "semigroup: time must be finite");
  if (t < 0.0 && !gen.group)
    fail("bad-argument", "semigroup on '" + gen.space->label() +
                             "': negative time requires a group generator");
}

}  // namespace detail

/// Dense matrix of S(t).  S(0) is the identity exactly.
template <class Scalar>
Matrix<Scalar> semigroup_matrix(const GeneratorRealization<Scalar>& gen, double t) {
  detail::check_time(gen, t);
  const Index n = gen.space->dim();
  if (t == 0.0) return Matrix<Scalar>::Identity(n, n);
  if (gen.spectral) {
    const auto& sp = *gen.spectral;
    Vector<Scalar> e = (sp.values.array() * Scalar(t)).exp();
    return sp.vectors * e.asDiagonal() * sp.vectors_inv;
  }
  Matrix<Scalar> at = gen.matrix * Scalar(t);
  return at.exp();
}

/// Action of S(t) on a vector.  At t = 0 the input is returned unchanged
/// (bit for bit); the spectral path costs O(dim^2) per application.
template <class Scalar>
Vector<Scalar> semigroup_apply(const GeneratorRealization<Scalar>& gen, double t,
                               const Vector<Scalar>& x) {
  detail::check_time(gen, t);
  detail::check_member(*gen.space, x.size(), "semigroup_apply");
  if (t == 0.0) return x;
  if (gen.spectral) {
    const auto& sp = *gen.spectral;
    Vector<Scalar> coeffs = sp.vectors_inv * x;
    coeffs.array() *= (sp.values.array() * Scalar(t)).exp();
    return sp.vectors * coeffs;
  }
  Matrix<Scalar> at = gen.matrix * Scalar(t);
  return at.exp() * x;
}

}  // namespace swlp
