#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "kdiff/geometry.hpp"

using namespace kdiff;

namespace {

double max_abs(const Matrix& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace

TEST_CASE("orthonormal basis examples", "[geometry]") {
  Rng rng(1);
  const auto square = random_orthonormal_basis(5, 5, rng);
  REQUIRE(max_abs(square.projector() - Matrix::Identity(5, 5)) < 1e-12);
  const auto line = random_orthonormal_basis(3, 1, rng);
  REQUIRE(std::abs((line.P().transpose() * line.P())(0, 0) - 1.0) < 1e-12);
  Rng seeded(42);
  const auto big = random_orthonormal_basis(64, 4, seeded);
  REQUIRE(max_abs(big.P().transpose() * big.P() - Matrix::Identity(4, 4)) < 1e-10);
  REQUIRE_THROWS_AS(random_orthonormal_basis(3, 4, rng), DimError);
  REQUIRE_THROWS_AS(ManifoldBasis(Matrix::Ones(3, 1)), InvalidArgument);
}

TEST_CASE("basis is deterministic and sign-normalized", "[geometry]") {
  Rng a(7), b(7);
  const auto pa = random_orthonormal_basis(10, 3, a);
  const auto pb = random_orthonormal_basis(10, 3, b);
  REQUIRE(pa.P() == pb.P());
}

TEST_CASE("projector is symmetric and idempotent", "[geometry][property]") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int D = 1 + static_cast<int>(rng.uniform() * 20);
    const int d = 1 + static_cast<int>(rng.uniform() * D);
    const auto basis = random_orthonormal_basis(D, d, rng);
    const Matrix& P = basis.projector();
    REQUIRE(max_abs(P * P - P) < 1e-10);
    REQUIRE(max_abs(P - P.transpose()) < 1e-14);
    const Spectrum s = basis.spectrum();
    REQUIRE(s.trace() == d);
    const Matrix& Q = *s.eigenvectors;
    REQUIRE(max_abs(Q * s.eigenvalues.asDiagonal() * Q.transpose() - P) < 1e-10);
  }
}

TEST_CASE("manifold samples lie in the span", "[geometry]") {
  Rng rng(11);
  const auto basis = random_orthonormal_basis(7, 3, rng);
  const Matrix X = sample_data(basis, 1000, rng);
  REQUIRE(max_abs(X * basis.complement()) < 1e-10);

  const auto line = random_orthonormal_basis(4, 1, rng);
  const Matrix Y = sample_data(line, 20, rng);
  for (int i = 0; i < Y.rows(); ++i) {
    const Vector dir = Y.row(i).transpose() / Y.row(i).norm();
    const double align = std::abs(dir.dot(line.P().col(0)));
    REQUIRE(std::abs(align - 1.0) < 1e-12);
  }
  REQUIRE_THROWS_AS(sample_data(basis, 0, rng), InvalidArgument);
}

TEST_CASE("whitened latent second moment", "[geometry][statistics]") {
  Rng rng = Rng::derive(8, "test.whiten");
  const auto basis = random_orthonormal_basis(8, 2, rng);
  const int n = 1000000;
  const Matrix L = sample_data(basis, n, rng) * basis.P();
  const Matrix M = L.transpose() * L / n;
  REQUIRE(max_abs(M - Matrix::Identity(2, 2)) < 5e-3);
}

TEST_CASE("colored sampler", "[geometry][statistics]") {
  Rng rng = Rng::derive(13, "test.colored");
  const ColoredCovariance zero(Matrix::Zero(3, 3));
  REQUIRE(max_abs(sample_colored(zero, 10, rng)) == 0.0);

  const int D = 5, n = 200000;
  const ColoredCovariance ident(Matrix::Identity(D, D));
  const Matrix X = sample_colored(ident, n, rng);
  const double tr = X.squaredNorm() / n;
  // Var of |x|^2 for standard normal is 2D.
  REQUIRE(std::abs(tr - D) < 3 * std::sqrt(2.0 * D / n));

  // Sigma = PP^T against sample_data: compare covariance estimates elementwise.
  const auto basis = random_orthonormal_basis(D, 2, rng);
  const auto cov = ColoredCovariance::from_spectrum(basis.spectrum().eigenvalues, *basis.spectrum().eigenvectors);
  const int m = 100000;
  const Matrix A = sample_colored(cov, m, rng);
  const Matrix B = sample_data(basis, m, rng);
  const Matrix CA = A.transpose() * A / m;
  const Matrix CB = B.transpose() * B / m;
  // Each entry has variance at most 2/m per estimate; allow 4 sigma on the difference.
  REQUIRE(max_abs(CA - CB) < 4 * std::sqrt(2.0 * 2.0 / m));
  REQUIRE(max_abs(A * basis.complement()) < 1e-10);

  const Spectrum s = cov.spectrum();
  REQUIRE(std::abs(s.trace() - cov.sigma().trace()) < 1e-9);
  REQUIRE(std::abs(s.trace() - 2.0) < 1e-9);
}

TEST_CASE("noise sampler statistics", "[geometry][statistics]") {
  Rng rng = Rng::derive(17, "test.noise");
  const int D = 3, n = 1000000;
  const Matrix N = sample_noise(D, n, rng);
  const double se = 1.0 / std::sqrt(static_cast<double>(n));
  REQUIRE(max_abs(N.colwise().mean()) < 3 * se * 1.5);  // three columns tested jointly
  const Matrix C = N.transpose() * N / n;
  // off-diagonal sd 1/sqrt(n), diagonal sd sqrt(2/n)
  REQUIRE(max_abs(C - Matrix::Identity(D, D)) < 3 * std::sqrt(2.0) * se * 1.5);

  Rng a(99), b(99);
  REQUIRE(sample_noise(4, 10, a) == sample_noise(4, 10, b));
}

TEST_CASE("data and noise streams are uncorrelated", "[geometry][statistics][property]") {
  const auto seed = 23;
  Rng data_rng = Rng::derive(seed, "test.data");
  Rng noise_rng = Rng::derive(seed, "test.noise");
  Rng basis_rng(seed);
  const auto basis = random_orthonormal_basis(6, 3, basis_rng);
  const int n = 500000;
  const Matrix X = sample_data(basis, n, data_rng);
  const Matrix N = sample_noise(6, n, noise_rng);
  const Matrix cross = X.transpose() * N / n;
  REQUIRE(max_abs(cross) < 5.0 / std::sqrt(static_cast<double>(n)));
}
