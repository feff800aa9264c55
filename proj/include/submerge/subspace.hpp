#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <set>
#include <stdexcept>
#include <utility>

#include "submerge/errors.hpp"
#include "submerge/numeric.hpp"

namespace submerge {

template <typename Scalar>
using DenseMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using DenseVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixXd = Eigen::MatrixXd;
using VectorXd = Eigen::VectorXd;

// Truncation rank r = floor(rho * min(d_o, d_i)), rho in (0,1].
inline Eigen::Index truncation_rank(Eigen::Index d_o, Eigen::Index d_i, double rho) {
  if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("rank ratio must lie in (0,1]");
  return static_cast<Eigen::Index>(
      std::floor(rho * static_cast<double>(std::min(d_o, d_i))));
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

// d x r matrix with orthonormal columns spanning an r-dimensional subspace.
template <typename Scalar>
class OrthonormalBasis {
 public:
  OrthonormalBasis() = default;

  // `tolerance` bounds ||Q^T Q - I||_F. Bases produced by the numerics in
  // this header satisfy 1e-8; bases reloaded from f32 storage carry the
  // storage precision and are validated against a looser bound.
  static OrthonormalBasis from_columns(DenseMatrix<Scalar> columns,
                                       double tolerance = 1e-8) {
    OrthonormalBasis b;
    b.columns_ = std::move(columns);
    const Eigen::Index d = b.columns_.rows();
    const Eigen::Index r = b.columns_.cols();
    if (r < 1 || r > d)
      throw std::invalid_argument("basis rank must satisfy 1 <= r <= ambient dim");
    DenseMatrix<Scalar> gram = b.columns_.transpose() * b.columns_;
    gram.diagonal().array() -= Scalar(1);
    if (gram.norm() > tolerance)
      throw std::invalid_argument("basis columns are not orthonormal");
    return b;
  }

  const DenseMatrix<Scalar>& columns() const { return columns_; }
  Eigen::Index ambient_dim() const { return columns_.rows(); }
  Eigen::Index rank() const { return columns_.cols(); }

  bool operator==(const OrthonormalBasis& o) const { return columns_ == o.columns_; }

 private:
  DenseMatrix<Scalar> columns_;
};

// Rank-r factored module update U diag(sigma) V^T plus the set of source
// task identities it absorbed.
template <typename Scalar>
struct ExpertSubspace {
  OrthonormalBasis<Scalar> left;        // d_o x r
  OrthonormalBasis<Scalar> right;       // d_i x r
  DenseVector<Scalar> singular_values;  // non-increasing, >= 0
  std::set<int> tasks;

  Eigen::Index rank() const { return singular_values.size(); }
  Eigen::Index out_dim() const { return left.ambient_dim(); }
  Eigen::Index in_dim() const { return right.ambient_dim(); }

  bool operator==(const ExpertSubspace& o) const {
    return left == o.left && right == o.right &&
           singular_values == o.singular_values && tasks == o.tasks;
  }
};

using BasisXd = OrthonormalBasis<double>;
using ExpertXd = ExpertSubspace<double>;

// Deterministic orientation: the largest-magnitude entry of each left
// singular vector is made positive, flipping (u_k, v_k) jointly so the
// reconstruction is untouched. Serialized experts come out identical
// across runs.
template <typename Scalar>
void canonicalize_signs(DenseMatrix<Scalar>& left, DenseMatrix<Scalar>& right) {
  for (Eigen::Index k = 0; k < left.cols(); ++k) {
    Eigen::Index imax = 0;
    left.col(k).cwiseAbs().maxCoeff(&imax);
    if (left(imax, k) < Scalar(0)) {
      left.col(k) = -left.col(k);
      right.col(k) = -right.col(k);
    }
  }
}

template <typename Scalar>
ExpertSubspace<Scalar> make_expert(DenseMatrix<Scalar> left, DenseMatrix<Scalar> right,
                                   DenseVector<Scalar> singular_values,
                                   std::set<int> tasks = {},
                                   double basis_tolerance = 1e-8) {
  if (left.cols() != right.cols() || left.cols() != singular_values.size())
    throw std::invalid_argument("expert factor ranks disagree");
  for (Eigen::Index k = 0; k < singular_values.size(); ++k) {
    if (singular_values(k) < Scalar(0))
      throw std::invalid_argument("negative singular value");
    if (k > 0 && singular_values(k) > singular_values(k - 1))
      throw std::invalid_argument("singular values must be non-increasing");
  }
  ExpertSubspace<Scalar> e;
  e.left = OrthonormalBasis<Scalar>::from_columns(std::move(left), basis_tolerance);
  e.right = OrthonormalBasis<Scalar>::from_columns(std::move(right), basis_tolerance);
  e.singular_values = std::move(singular_values);
  e.tasks = std::move(tasks);
  return e;
}

// ---------------------------------------------------------------------------
// Affinity
// ---------------------------------------------------------------------------

// ||A^T B||_F^2 accumulated so the result is bitwise identical under operand
// swap: diagonal terms first, then (i,j)/(j,i) pairs added together.
template <typename Scalar>
Scalar interaction_frobenius_sq(const DenseMatrix<Scalar>& a, const DenseMatrix<Scalar>& b) {
  const Eigen::Index r = a.cols();
  Scalar total = Scalar(0);
  for (Eigen::Index i = 0; i < r; ++i) {
    const Scalar gii = a.col(i).dot(b.col(i));
    total += gii * gii;
  }
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = i + 1; j < r; ++j) {
      const Scalar gij = a.col(i).dot(b.col(j));
      const Scalar gji = a.col(j).dot(b.col(i));
      total += gij * gij + gji * gji;
    }
  }
  return total;
}

template <typename Scalar>
void require_comparable(const OrthonormalBasis<Scalar>& s1, const OrthonormalBasis<Scalar>& s2) {
  if (s1.ambient_dim() != s2.ambient_dim())
    throw std::invalid_argument("ambient dimension mismatch");
  if (s1.rank() != s2.rank()) throw std::invalid_argument("rank mismatch");
}

// Single-subspace affinity ||S1^T S2||_F^2 / r in [0,1].
template <typename Scalar>
Scalar basis_affinity(const OrthonormalBasis<Scalar>& s1, const OrthonormalBasis<Scalar>& s2) {
  require_comparable(s1, s2);
  const Scalar raw =
      interaction_frobenius_sq(s1.columns(), s2.columns()) / Scalar(s1.rank());
  return snap_unit(clamp_unit(raw));
}

// Two-sided affinity (||U_a^T U_b||_F^2 + ||V_a^T V_b||_F^2) / (2r).
template <typename Scalar>
Scalar subspace_affinity(const ExpertSubspace<Scalar>& a, const ExpertSubspace<Scalar>& b) {
  require_comparable(a.left, b.left);
  require_comparable(a.right, b.right);
  const Scalar fu = interaction_frobenius_sq(a.left.columns(), b.left.columns());
  const Scalar fv = interaction_frobenius_sq(a.right.columns(), b.right.columns());
  return snap_unit(clamp_unit((fu + fv) / Scalar(2 * a.rank())));
}

// Cosines of the principal angles between two subspaces: singular values of
// the r x r interaction matrix, clamped to [0,1], non-increasing.
template <typename Scalar>
DenseVector<Scalar> principal_angle_cosines(const OrthonormalBasis<Scalar>& s1,
                                            const OrthonormalBasis<Scalar>& s2) {
  require_comparable(s1, s2);
  DenseMatrix<Scalar> m = s1.columns().transpose() * s2.columns();
  Eigen::JacobiSVD<DenseMatrix<Scalar>> svd(m);
  DenseVector<Scalar> c = svd.singularValues();
  for (Eigen::Index i = 0; i < c.size(); ++i) c(i) = clamp_unit(c(i));
  return c;
}

// Squared chordal distance 0.5 ||P1 - P2||_F^2 through dense d x d
// projectors. Deliberately the slow route; it cross-checks the compact
// Frobenius evaluation above and is not used by the evolution path.
template <typename Scalar>
Scalar chordal_distance_sq(const OrthonormalBasis<Scalar>& s1, const OrthonormalBasis<Scalar>& s2) {
  require_comparable(s1, s2);
  DenseMatrix<Scalar> p1 = s1.columns() * s1.columns().transpose();
  DenseMatrix<Scalar> p2 = s2.columns() * s2.columns().transpose();
  return Scalar(0.5) * (p1 - p2).squaredNorm();
}

// ---------------------------------------------------------------------------
// Decompositions
// ---------------------------------------------------------------------------

// Orthogonal polar factor W of X = W H (H symmetric positive semidefinite),
// for X with k <= d columns. Throws RankDeficientError when X has
// numerically dependent columns; the polar factor is not unique there.
template <typename Scalar>
DenseMatrix<Scalar> polar_orthonormalize(const DenseMatrix<Scalar>& x) {
  if (x.cols() > x.rows())
    throw std::invalid_argument("polar factor needs k <= d");
  Eigen::JacobiSVD<DenseMatrix<Scalar>> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  int deficiency = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) < Scalar(1e-10) * s(0)) ++deficiency;
  if (deficiency > 0) throw RankDeficientError(deficiency);
  return svd.matrixU() * svd.matrixV().transpose();
}

// Best rank-r approximation of a module update. Returns nullopt for an
// effectively zero update (||delta||_F <= 1e-10 * sqrt(d_o * d_i)); the
// caller skips expert creation in that case. Throws when the rank ratio
// floors to zero.
template <typename Scalar>
std::optional<ExpertSubspace<Scalar>> truncated_svd(const DenseMatrix<Scalar>& delta, double rho) {
  const Eigen::Index d_o = delta.rows();
  const Eigen::Index d_i = delta.cols();
  if (d_o < 1 || d_i < 1) throw std::invalid_argument("empty update matrix");
  const Eigen::Index r = truncation_rank(d_o, d_i, rho);
  if (r < 1)
    throw std::invalid_argument("truncation rank underflow: floor(rho*min(d_o,d_i)) == 0");
  const double zero_eps = 1e-10 * std::sqrt(static_cast<double>(d_o) * static_cast<double>(d_i));
  if (delta.norm() <= Scalar(zero_eps)) return std::nullopt;

  Eigen::BDCSVD<DenseMatrix<Scalar>> svd(delta, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  if (r < s.size() && s(r - 1) == s(r))
    std::fprintf(stderr, "submerge: singular-value tie at the truncation boundary; keeping the first %ld\n",
                 static_cast<long>(r));

  DenseMatrix<Scalar> left = svd.matrixU().leftCols(r);
  DenseMatrix<Scalar> right = svd.matrixV().leftCols(r);
  DenseVector<Scalar> sv = s.head(r);
  canonicalize_signs(left, right);
  return make_expert(std::move(left), std::move(right), std::move(sv));
}

// Fixed-rank variant, used by stream verification and tests.
template <typename Scalar>
ExpertSubspace<Scalar> truncated_svd_rank(const DenseMatrix<Scalar>& delta, Eigen::Index r) {
  if (r < 1 || r > std::min(delta.rows(), delta.cols()))
    throw std::invalid_argument("invalid truncation rank");
  Eigen::BDCSVD<DenseMatrix<Scalar>> svd(delta, Eigen::ComputeThinU | Eigen::ComputeThinV);
  DenseMatrix<Scalar> left = svd.matrixU().leftCols(r);
  DenseMatrix<Scalar> right = svd.matrixV().leftCols(r);
  DenseVector<Scalar> sv = svd.singularValues().head(r);
  canonicalize_signs(left, right);
  return make_expert(std::move(left), std::move(right), std::move(sv));
}

namespace detail {

template <typename Scalar>
std::pair<DenseMatrix<Scalar>, DenseMatrix<Scalar>> thin_qr(const DenseMatrix<Scalar>& m) {
  Eigen::HouseholderQR<DenseMatrix<Scalar>> qr(m);
  const Eigen::Index k = std::min(m.rows(), m.cols());
  DenseMatrix<Scalar> q = qr.householderQ() * DenseMatrix<Scalar>::Identity(m.rows(), k);
  DenseMatrix<Scalar> rfac =
      qr.matrixQR().topRows(k).template triangularView<Eigen::Upper>();
  return {std::move(q), std::move(rfac)};
}

template <typename Scalar>
bool numerically_deficient(const DenseMatrix<Scalar>& rfac) {
  if (rfac.cols() > rfac.rows()) return true;
  Eigen::JacobiSVD<DenseMatrix<Scalar>> svd(rfac);
  const auto& s = svd.singularValues();
  return s(s.size() - 1) < Scalar(1e-10) * s(0);
}

}  // namespace detail

// Consolidation of two same-shape experts: concatenate bases [incoming, keep]
// with block-diagonal singular values, orthonormalize through the polar
// factor, and keep the top-r singular components of the reconstruction.
// Everything is reduced through thin QR so the inner SVD runs on a 2r x 2r
// core; no d_o x d_i product is ever formed.
//
// When the concatenation is numerically rank-deficient the polar factor is
// not unique, so the merge degrades to the exact top-r SVD of
// E_keep + E_incoming computed on the same QR cores. That path is
// deterministic, stays inside the joint span, and coincides with the polar
// route whenever the expert pairs are mutually orthogonal.
template <typename Scalar>
ExpertSubspace<Scalar> subspace_merge(const ExpertSubspace<Scalar>& keep,
                                      const ExpertSubspace<Scalar>& incoming) {
  if (keep.out_dim() != incoming.out_dim() || keep.in_dim() != incoming.in_dim())
    throw std::invalid_argument("expert dimension mismatch");
  if (keep.rank() != incoming.rank()) throw std::invalid_argument("expert rank mismatch");

  const Eigen::Index r = keep.rank();
  DenseMatrix<Scalar> ucat(keep.out_dim(), 2 * r);
  ucat << incoming.left.columns(), keep.left.columns();
  DenseMatrix<Scalar> vcat(keep.in_dim(), 2 * r);
  vcat << incoming.right.columns(), keep.right.columns();
  DenseVector<Scalar> scat(2 * r);
  scat << incoming.singular_values, keep.singular_values;

  auto [qu, ru] = detail::thin_qr(ucat);
  auto [qv, rv] = detail::thin_qr(vcat);

  const bool deficient =
      detail::numerically_deficient(ru) || detail::numerically_deficient(rv);

  DenseMatrix<Scalar> core;
  if (!deficient) {
    Eigen::JacobiSVD<DenseMatrix<Scalar>> su(ru, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::JacobiSVD<DenseMatrix<Scalar>> sv(rv, Eigen::ComputeFullU | Eigen::ComputeFullV);
    DenseMatrix<Scalar> pu = su.matrixU() * su.matrixV().transpose();
    DenseMatrix<Scalar> pv = sv.matrixU() * sv.matrixV().transpose();
    core = pu * scat.asDiagonal() * pv.transpose();
  } else {
    core = ru * scat.asDiagonal() * rv.transpose();
  }

  Eigen::JacobiSVD<DenseMatrix<Scalar>> svd(core, Eigen::ComputeFullU | Eigen::ComputeFullV);
  DenseMatrix<Scalar> left = qu * svd.matrixU().leftCols(r);
  DenseMatrix<Scalar> right = qv * svd.matrixV().leftCols(r);
  DenseVector<Scalar> merged_sv = svd.singularValues().head(r);
  canonicalize_signs(left, right);

  std::set<int> tasks = keep.tasks;
  tasks.insert(incoming.tasks.begin(), incoming.tasks.end());
  return make_expert(std::move(left), std::move(right), std::move(merged_sv),
                     std::move(tasks));
}

template <typename Scalar>
DenseMatrix<Scalar> reconstruct(const ExpertSubspace<Scalar>& e) {
  return e.left.columns() * e.singular_values.asDiagonal() * e.right.columns().transpose();
}

}  // namespace submerge
