#pragma once

#include <utility>

#include "kdiff/analytic.hpp"
#include "kdiff/core.hpp"
#include "kdiff/rng.hpp"

namespace kdiff {

/// D x d matrix with orthonormal columns spanning the data manifold.
class ManifoldBasis {
 public:
  explicit ManifoldBasis(Matrix P) : P_(std::move(P)) {
    if (P_.cols() < 1 || P_.rows() < P_.cols()) throw DimError("basis must be D x d with 1 <= d <= D");
    const Matrix gram = P_.transpose() * P_;
    if ((gram - Matrix::Identity(d(), d())).cwiseAbs().maxCoeff() > 1e-10)
      throw InvalidArgument("basis columns are not orthonormal");
    proj_ = P_ * P_.transpose();
  }

  int D() const { return static_cast<int>(P_.rows()); }
  int d() const { return static_cast<int>(P_.cols()); }
  DimensionPair dims() const { return {D(), d()}; }
  const Matrix& P() const { return P_; }
  /// PP^T
  const Matrix& projector() const { return proj_; }
  /// I - PP^T
  Matrix complement() const { return Matrix::Identity(D(), D()) - proj_; }

  /// batch x D whitened samples x = P x~, x~ ~ N(0, I_d).
  Matrix sample(Eigen::Index batch, Rng& rng) const {
    return rng.normal_matrix(batch, d()) * P_.transpose();
  }

  /// Data second moment PP^T viewed as a spectrum (d ones, D - d zeros).
  Spectrum spectrum() const;

 private:
  Matrix P_;
  Matrix proj_;
};

/// Data with second moment Sigma = A A^T.
class ColoredCovariance {
 public:
  explicit ColoredCovariance(Matrix factor) : A_(std::move(factor)) {
    if (A_.rows() != A_.cols() || A_.rows() < 1) throw DimError("covariance factor must be square");
  }

  /// Sigma = Q diag(lambda) Q^T.
  static ColoredCovariance from_spectrum(const Vector& lambda, const Matrix& Q) {
    if (Q.rows() != lambda.size() || Q.cols() != lambda.size()) throw DimError("spectrum/eigenvector mismatch");
    for (Eigen::Index i = 0; i < lambda.size(); ++i)
      if (!(lambda[i] >= 0.0)) throw InvalidArgument("eigenvalues must be >= 0");
    return ColoredCovariance(Q * lambda.cwiseSqrt().asDiagonal());
  }

  int D() const { return static_cast<int>(A_.rows()); }
  const Matrix& factor() const { return A_; }
  Matrix sigma() const { return A_ * A_.transpose(); }

  Spectrum spectrum() const {
    Eigen::SelfAdjointEigenSolver<Matrix> es(sigma());
    return Spectrum(es.eigenvalues().cwiseMax(0.0), es.eigenvectors());
  }

  /// batch x D samples x = A g, g ~ N(0, I_D).
  Matrix sample(Eigen::Index batch, Rng& rng) const {
    return rng.normal_matrix(batch, D()) * A_.transpose();
  }

 private:
  Matrix A_;
};

inline Spectrum ManifoldBasis::spectrum() const {
  // Complete P to an orthonormal basis of R^D; the first d columns stay P.
  Eigen::HouseholderQR<Matrix> qr(P_);
  Matrix Q = qr.householderQ();
  Q.leftCols(d()) = P_;
  Vector lambda = Vector::Zero(D());
  lambda.head(d()).setOnes();
  return Spectrum(std::move(lambda), std::move(Q));
}

/// D x d orthonormal basis from the QR factorization of a Gaussian matrix,
/// with column signs fixed so that diag(R) > 0.
inline ManifoldBasis random_orthonormal_basis(int D, int d, Rng& rng) {
  if (d < 1 || D < 1) throw DimError("dimensions must be positive");
  if (d > D) throw DimError("intrinsic dimension exceeds ambient dimension");
  const Matrix G = rng.normal_matrix(D, d);
  Eigen::HouseholderQR<Matrix> qr(G);
  Matrix Q = qr.householderQ() * Matrix::Identity(D, d);
  const Matrix R = qr.matrixQR().topRows(d).triangularView<Eigen::Upper>();
  for (int j = 0; j < d; ++j)
    if (R(j, j) < 0.0) Q.col(j) = -Q.col(j);
  return ManifoldBasis(std::move(Q));
}

/// Full D x D orthogonal matrix (columns as eigenvectors).
inline Matrix random_orthogonal(int D, Rng& rng) { return random_orthonormal_basis(D, D, rng).P(); }

inline Matrix sample_data(const ManifoldBasis& basis, Eigen::Index batch, Rng& rng) {
  require(batch >= 1, "sample_data: batch must be >= 1");
  return basis.sample(batch, rng);
}

inline Matrix sample_colored(const ColoredCovariance& cov, Eigen::Index batch, Rng& rng) {
  require(batch >= 1, "sample_colored: batch must be >= 1");
  return cov.sample(batch, rng);
}

inline Matrix sample_noise(int D, Eigen::Index batch, Rng& rng) { return rng.normal_matrix(batch, D); }

}  // namespace kdiff
