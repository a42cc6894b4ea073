#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "kdiff/analytic.hpp"
#include "kdiff/geometry.hpp"
#include "oracles.hpp"

using namespace kdiff;
using Catch::Approx;

namespace {

const ProcessSpec kFm = ProcessSpec::flow_matching();

/// Moment integrals by composite Simpson, independent of the Gauss-Legendre path.
MomentSet simpson_moments(const TargetSpec& target, const TimeMeasure& measure) {
  auto integral = [&](auto g) {
    return oracle::simpson([&](double t) { return measure.density(t) * g(t); }, measure.lo(), measure.hi(), 20000);
  };
  MomentSet m;
  m.one = integral([](double) { return 1.0; });
  m.a = integral([](double t) { return t; });
  m.s = integral([](double t) { return 1 - t; });
  m.aa = integral([](double t) { return t * t; });
  m.ss = integral([](double t) { return (1 - t) * (1 - t); });
  m.as = integral([](double t) { return t * (1 - t); });
  m.phi_a = integral([&](double t) { return target.phi(t) * t; });
  m.psi_s = integral([&](double t) { return target.psi(t) * (1 - t); });
  m.phi_phi = integral([&](double t) { return target.phi(t) * target.phi(t); });
  m.psi_psi = integral([&](double t) { return target.psi(t) * target.psi(t); });
  return m;
}

}  // namespace

TEST_CASE("gauss-legendre integrates polynomials exactly", "[analytic][quadrature]") {
  const auto rule = gauss_legendre(8, 0.0, 1.0);
  for (int p = 0; p < 16; ++p) {
    const double got = integrate(rule, [p](double t) { return std::pow(t, p); });
    REQUIRE(got == Approx(1.0 / (p + 1)).epsilon(1e-14));
  }
  REQUIRE_THROWS_AS(integrate(rule, [&rule](double t) { return 1.0 / (t - rule.nodes[0]); }), QuadratureDivergence);
}

TEST_CASE("uniform u-loss moments", "[analytic]") {
  const auto m = compute_moments(kFm, TargetSpec::v(), LossTargetSpec::u_loss(), TimeMeasure::uniform());
  REQUIRE(std::abs(m.one - 1.0) < 1e-12);
  REQUIRE(std::abs(m.a - 0.5) < 1e-12);
  REQUIRE(std::abs(m.s - 0.5) < 1e-12);
  REQUIRE(std::abs(m.aa - 1.0 / 3) < 1e-12);
  REQUIRE(std::abs(m.ss - 1.0 / 3) < 1e-12);

  const auto m1 = uniform_k_moments(1.0);
  REQUIRE(std::abs(m1.phi_a - 0.5) < 1e-12);
  REQUIRE(std::abs(m1.psi_s) < 1e-12);

  const auto m3 = uniform_k_moments(0.3);
  REQUIRE(std::abs(m3.phi_a - 0.15) < 1e-12);
  REQUIRE(std::abs(m3.psi_s + 0.35) < 1e-12);
}

TEST_CASE("moments agree with an independent Simpson rule", "[analytic][property]") {
  const std::vector<TimeMeasure> measures = {TimeMeasure::uniform(), TimeMeasure::uniform(0.1, 0.9),
                                             TimeMeasure::logit_normal(-0.8, 0.8)};
  for (const auto& measure : measures) {
    for (double k : {0.0, 0.3, 0.8}) {
      const auto target = TargetSpec::k_target(k);
      const auto got = compute_moments(kFm, target, LossTargetSpec::u_loss(), measure, 128);
      const auto ref = simpson_moments(target, measure);
      REQUIRE(got.aa == Approx(ref.aa).margin(1e-9));
      REQUIRE(got.ss == Approx(ref.ss).margin(1e-9));
      REQUIRE(got.as == Approx(ref.as).margin(1e-9));
      REQUIRE(got.phi_a == Approx(ref.phi_a).margin(1e-9));
      REQUIRE(got.psi_s == Approx(ref.psi_s).margin(1e-9));
      REQUIRE(got.phi_phi == Approx(ref.phi_phi).margin(1e-9));
      REQUIRE(got.psi_psi == Approx(ref.psi_psi).margin(1e-9));
    }
  }
}

TEST_CASE("non-finite integrand raises", "[analytic]") {
  TargetSpec bad{"bad", [](double) { return std::numeric_limits<double>::infinity(); }, [](double) { return 0.0; }, std::nullopt};
  REQUIRE_THROWS_AS(compute_moments(kFm, bad, LossTargetSpec::u_loss(), TimeMeasure::uniform()),
                    QuadratureDivergence);
}

TEST_CASE("equilibrium weight coefficients", "[analytic]") {
  auto c = optimal_weight_coeffs(uniform_k_moments(1.0));
  REQUIRE(c.par == Approx(0.75).margin(1e-12));
  REQUIRE(c.perp == Approx(0.0).margin(1e-12));
  c = optimal_weight_coeffs(uniform_k_moments(0.5));
  REQUIRE(c.par == Approx(0.0).margin(1e-12));
  REQUIRE(c.perp == Approx(-0.75).margin(1e-12));
  c = optimal_weight_coeffs(uniform_k_moments(0.0));
  REQUIRE(c.par == Approx(-0.75).margin(1e-12));
  REQUIRE(c.perp == Approx(-1.5).margin(1e-12));

  MomentSet zero;
  REQUIRE_THROWS_AS(optimal_weight_coeffs(zero), SingularEquilibrium);
  REQUIRE_THROWS_AS(optimal_loss(zero, {2, 1}), SingularEquilibrium);
}

TEST_CASE("optimal loss examples", "[analytic]") {
  for (int d : {1, 3, 8}) {
    const auto l1 = optimal_loss(uniform_k_moments(1.0), {d, d});
    REQUIRE(l1.perpendicular == 0.0);
    REQUIRE(l1.total == Approx(5.0 * d / 16).epsilon(1e-12));
    const auto l0 = optimal_loss(uniform_k_moments(0.0), {d, d});
    REQUIRE(l0.total == Approx(5.0 * d / 16).epsilon(1e-12));
  }
  REQUIRE(optimal_loss(uniform_k_moments(0.5), {2, 1}).total == Approx(0.28125).epsilon(1e-12));
}

TEST_CASE("closed-form polynomial examples", "[analytic]") {
  REQUIRE(optimal_loss_poly(1.0, {4, 4}) == 1.25);
  for (int d : {1, 2, 7}) REQUIRE(optimal_loss_poly(0.5, {d, d}) == Approx(d / 4.0).epsilon(1e-15));
  REQUIRE(optimal_loss_poly(0.0, {2, 1}) == 0.4375);
  REQUIRE_THROWS_AS(optimal_loss_poly(1.5, {2, 1}), InvalidArgument);
}

TEST_CASE("closed form matches quadrature on random inputs", "[analytic][property]") {
  Rng rng = Rng::derive(2024, "test.poly");
  for (int trial = 0; trial < 100; ++trial) {
    const double k = rng.uniform();
    const int D = 1 + static_cast<int>(rng.uniform() * 512);
    const int d = 1 + static_cast<int>(rng.uniform() * D);
    const DimensionPair dims(D, d);
    const double quad = optimal_loss(uniform_k_moments(k), dims).total;
    REQUIRE(std::abs(optimal_loss_poly(k, dims) - quad) < 1e-10 * std::max(1.0, std::abs(quad)));
  }
}

TEST_CASE("optimal k examples", "[analytic]") {
  for (int d : {1, 5, 64}) REQUIRE(optimal_k({d, d}) == 0.5);
  REQUIRE(optimal_k({100, 10}) == Approx(0.909091).margin(1e-6));
  REQUIRE(optimal_k({64, 4}) == Approx(16.0 / 17).epsilon(1e-15));
  const double k = argmin_k([](double k) { return optimal_loss_poly(k, {64, 4}); }, 1e-10);
  REQUIRE(std::abs(k - 16.0 / 17) < 1e-8);
}

TEST_CASE("argmin_k examples", "[analytic]") {
  const double k = argmin_k([](double k) { return optimal_loss_poly(k, {100, 10}); }, 1e-10);
  REQUIRE(std::abs(k - 10.0 / 11) < 1e-8);
  REQUIRE(argmin_k([](double) { return 3.0; }, 1e-10) == 0.5);
  const Spectrum spec(Vector::Constant(3, 1.0));
  const double kc = argmin_k([&](double k) { return colored_optimal_loss(spec, k).total; }, 1e-10);
  REQUIRE(std::abs(kc - 0.5) < 1e-8);
  // Independent grid-refinement oracle on an asymmetric function.
  auto f = [](double x) { return std::cosh(3 * (x - 0.3141)) + 0.2 * x; };
  REQUIRE(std::abs(argmin_k(f) - oracle::grid_argmin(f, 0, 1)) < 1e-8);
}

TEST_CASE("optimal k monotonicity", "[analytic][property]") {
  for (int d = 1; d <= 32; ++d)
    for (int D = d; D < 64; ++D) {
      REQUIRE(optimal_k({D + 1, d}) >= optimal_k({D, d}));
      if (d + 1 <= D) REQUIRE(optimal_k({D, d + 1}) <= optimal_k({D, d}));
    }
}

TEST_CASE("loss contributions are non-negative", "[analytic][property]") {
  Rng rng = Rng::derive(5, "test.nonneg");
  const std::vector<LossTargetSpec> losses = {LossTargetSpec::u_loss(), LossTargetSpec::v_loss()};
  for (int trial = 0; trial < 200; ++trial) {
    const double k = rng.uniform();
    const auto measure = trial % 2 ? TimeMeasure::uniform() : TimeMeasure::logit_normal(2 * rng.normal() * 0.5, 0.5 + rng.uniform());
    const auto m = compute_moments(kFm, TargetSpec::k_target(k), losses[trial % 2], measure);
    REQUIRE(m.psi_s * m.psi_s <= m.psi_psi * m.ss * (1 + 1e-12));
    const int D = 1 + static_cast<int>(rng.uniform() * 64);
    const int d = 1 + static_cast<int>(rng.uniform() * D);
    const auto l = optimal_loss(m, {D, d});
    REQUIRE(l.parallel >= -1e-12);
    REQUIRE(l.perpendicular >= -1e-12);
    REQUIRE(l.total == Approx(l.parallel + l.perpendicular));
  }
}

TEST_CASE("dimension and spectrum validation", "[analytic]") {
  REQUIRE_THROWS_AS(DimensionPair(3, 0), DimError);
  REQUIRE_THROWS_AS(DimensionPair(2, 3), DimError);
  REQUIRE_THROWS_AS(Spectrum(Vector::Constant(2, -1.0)), InvalidArgument);
  REQUIRE_THROWS_AS(Spectrum(Vector::Constant(2, 1.0), Matrix::Constant(2, 2, 1.0)), InvalidArgument);
}

TEST_CASE("colored weight examples", "[analytic][colored]") {
  Rng rng = Rng::derive(9, "test.colored");
  const int D = 6, d = 2;
  const ManifoldBasis basis = random_orthonormal_basis(D, d, rng);
  const MomentSet m = uniform_k_moments(0.7);
  const Matrix W = colored_optimal_weight(basis.spectrum(), m);
  const WeightCoeffs c = optimal_weight_coeffs(m);
  const Matrix expected = c.par * basis.projector() + c.perp * basis.complement();
  REQUIRE((W - expected).cwiseAbs().maxCoeff() < 1e-12);

  for (double k : {0.1, 0.6, 1.0}) {
    const MomentSet mk = uniform_k_moments(k);
    REQUIRE(colored_mode_coeff(1e6, mk) == Approx(mk.phi_a / mk.aa).margin(1e-5));
    REQUIRE(colored_mode_coeff(0.0, mk) == Approx(mk.psi_s / mk.ss).epsilon(1e-15));
  }

  // symmetric and commuting with Sigma
  const Vector lambda = (Vector(4) << 0.3, 2.0, 0.0, 5.0).finished();
  const Matrix Q = random_orthogonal(4, rng);
  const Spectrum spec(lambda, Q);
  const Matrix Wc = colored_optimal_weight(spec, m);
  const Matrix Sigma = Q * lambda.asDiagonal() * Q.transpose();
  REQUIRE((Wc - Wc.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE((Wc * Sigma - Sigma * Wc).cwiseAbs().maxCoeff() < 1e-9);
  REQUIRE_THROWS_AS(colored_optimal_weight(Spectrum(lambda), m), InvalidArgument);
}

TEST_CASE("colored loss examples", "[analytic][colored]") {
  for (int D : {1, 4, 9})
    for (double k : {0.0, 0.35, 1.0})
      REQUIRE(colored_optimal_loss(Spectrum(Vector::Ones(D)), k).total ==
              Approx(optimal_loss_poly(k, {D, D})).margin(1e-12));
  const auto single = colored_optimal_loss(Spectrum(Vector::Constant(1, 3.0)), 0.5);
  REQUIRE(single.total == Approx(0.40625).epsilon(1e-12));
  REQUIRE(single.per_mode.size() == 1);

  // Trace form for uniform u-loss.
  Rng rng = Rng::derive(31, "test.colored.trace");
  for (int trial = 0; trial < 20; ++trial) {
    const int D = 1 + static_cast<int>(rng.uniform() * 10);
    Vector lambda(D);
    for (int i = 0; i < D; ++i) lambda[i] = 4 * rng.uniform();
    const double k = rng.uniform();
    const double tr = lambda.sum();
    double tr_frac = 0;
    for (int i = 0; i < D; ++i) tr_frac += (1 + 4 * lambda[i]) / (1 + lambda[i]);
    const double closed = ((D + tr) * k * k - 2.0 * D * k + tr_frac) / 8.0;
    const auto got = colored_optimal_loss(Spectrum(lambda), k);
    REQUIRE(got.total == Approx(closed).margin(1e-12));
    for (double delta : got.per_mode) REQUIRE(delta >= -1e-12);
    const Spectrum spec(lambda);
    const double numeric = argmin_k([&](double kk) { return colored_optimal_loss(spec, kk).total; });
    REQUIRE(std::abs(numeric - colored_optimal_k(spec)) < 1e-8);
  }
}

TEST_CASE("colored optimal k examples", "[analytic][colored]") {
  const Spectrum binary((Vector(5) << 1, 1, 0, 0, 0).finished());
  REQUIRE(colored_optimal_k(binary) == Approx(optimal_k({5, 2})).epsilon(1e-15));
  const Spectrum s210((Vector(3) << 2, 1, 0).finished());
  REQUIRE(colored_optimal_k(s210) == 0.5);
  REQUIRE(std::abs(argmin_k([&](double k) { return colored_optimal_loss(s210, k).total; }) - 0.5) < 1e-8);
  REQUIRE(colored_optimal_k(Spectrum(Vector::Zero(4))) == 1.0);
}

TEST_CASE("binary spectrum reproduces the two-term split", "[analytic][colored][property]") {
  Rng rng = Rng::derive(41, "test.binary");
  for (int trial = 0; trial < 30; ++trial) {
    const int D = 1 + static_cast<int>(rng.uniform() * 16);
    const int d = 1 + static_cast<int>(rng.uniform() * D);
    const double k = rng.uniform();
    const MomentSet m = uniform_k_moments(k);
    Vector lambda = Vector::Zero(D);
    lambda.head(d).setOnes();
    const auto colored = colored_optimal_loss(Spectrum(lambda), m);
    const auto split = optimal_loss(m, {D, d});
    double par = 0, perp = 0;
    for (int i = 0; i < D; ++i) (i < d ? par : perp) += colored.per_mode[i];
    REQUIRE(std::abs(par - split.parallel) < 1e-10);
    REQUIRE(std::abs(perp - split.perpendicular) < 1e-10);
  }
}
