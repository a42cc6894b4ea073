#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "kdiff/core.hpp"
#include "kdiff/quadrature.hpp"
#include "kdiff/schedule.hpp"

namespace kdiff {

/// Integrals of schedule products against the effective measure
/// density(t) * kappa(t)^2 over the measure's interval.
struct MomentSet {
  double one = 0;      // int D~
  double a = 0;        // int D~ alpha
  double s = 0;        // int D~ sigma
  double aa = 0;       // int D~ alpha^2
  double ss = 0;       // int D~ sigma^2
  double as = 0;       // int D~ alpha sigma
  double phi_a = 0;    // int D~ phi alpha
  double psi_s = 0;    // int D~ psi sigma
  double phi_phi = 0;  // int D~ phi^2
  double psi_psi = 0;  // int D~ psi^2
};

struct DimensionPair {
  int D;
  int d;

  DimensionPair(int ambient, int intrinsic) : D(ambient), d(intrinsic) {
    if (intrinsic < 1) throw DimError("intrinsic dimension must be >= 1");
    if (ambient < intrinsic) throw DimError("ambient dimension must be >= intrinsic dimension");
  }
};

/// Eigen-spectrum of the data second moment, optionally with eigenvectors
/// as the columns of an orthonormal D x D matrix.
struct Spectrum {
  Vector eigenvalues;
  std::optional<Matrix> eigenvectors;

  explicit Spectrum(Vector lambda, std::optional<Matrix> q = std::nullopt)
      : eigenvalues(std::move(lambda)), eigenvectors(std::move(q)) {
    if (eigenvalues.size() < 1) throw DimError("spectrum must be non-empty");
    for (Eigen::Index i = 0; i < eigenvalues.size(); ++i)
      if (!(eigenvalues[i] >= 0.0)) throw InvalidArgument("spectrum eigenvalues must be >= 0");
    if (eigenvectors) {
      const Matrix& Q = *eigenvectors;
      if (Q.rows() != eigenvalues.size() || Q.cols() != eigenvalues.size())
        throw DimError("eigenvector matrix must be D x D");
      const Matrix gram = Q.transpose() * Q;
      if ((gram - Matrix::Identity(Q.cols(), Q.cols())).cwiseAbs().maxCoeff() > 1e-10)
        throw InvalidArgument("eigenvectors are not orthonormal");
    }
  }

  int dim() const { return static_cast<int>(eigenvalues.size()); }
  double trace() const { return eigenvalues.sum(); }
};

constexpr int kDefaultQuadNodes = 64;

inline MomentSet compute_moments(const ProcessSpec& process, const TargetSpec& target,
                                 const LossTargetSpec& loss, const TimeMeasure& measure,
                                 int quad_nodes = kDefaultQuadNodes) {
  const QuadratureRule rule = gauss_legendre(quad_nodes, measure.lo(), measure.hi());
  MomentSet m;
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    const double t = rule.nodes[i];
    const double w = effective_weight(measure, process, target, loss, t);
    const double al = process.alpha(t), si = process.sigma(t);
    const double ph = target.phi(t), ps = target.psi(t);
    const double terms[10] = {w,          w * al,      w * si,      w * al * al, w * si * si,
                              w * al * si, w * ph * al, w * ps * si, w * ph * ph, w * ps * ps};
    for (double v : terms)
      if (!std::isfinite(v))
        throw QuadratureDivergence("moment integrand is not finite at t = " + std::to_string(t));
    const double q = rule.weights[i];
    m.one += q * terms[0];
    m.a += q * terms[1];
    m.s += q * terms[2];
    m.aa += q * terms[3];
    m.ss += q * terms[4];
    m.as += q * terms[5];
    m.phi_a += q * terms[6];
    m.psi_s += q * terms[7];
    m.phi_phi += q * terms[8];
    m.psi_psi += q * terms[9];
  }
  return m;
}

/// Moments for the setting of the closed-form results: flow matching,
/// k-target, uniform t on [0, 1], u-loss.
inline MomentSet uniform_k_moments(double k) {
  return compute_moments(ProcessSpec::flow_matching(), TargetSpec::k_target(k), LossTargetSpec::u_loss(),
                         TimeMeasure::uniform());
}

struct WeightCoeffs {
  double par;
  double perp;
};

/// Equilibrium W* = par * PP^T + perp * (I - PP^T).
inline WeightCoeffs optimal_weight_coeffs(const MomentSet& m) {
  const double den_par = m.aa + m.ss;
  if (!(den_par > 0.0)) throw SingularEquilibrium("int D~ (alpha^2 + sigma^2) must be positive");
  if (!(m.ss > 0.0)) throw SingularEquilibrium("int D~ sigma^2 must be positive");
  return {(m.phi_a + m.psi_s) / den_par, m.psi_s / m.ss};
}

struct LossSplit {
  double total;
  double parallel;
  double perpendicular;
};

/// Training loss at the equilibrium weight, split into the intra-manifold
/// part (proportional to d) and the residual part (proportional to D - d).
inline LossSplit optimal_loss(const MomentSet& m, const DimensionPair& dims) {
  const double den_par = m.aa + m.ss;
  if (!(den_par > 0.0)) throw SingularEquilibrium("int D~ (alpha^2 + sigma^2) must be positive");
  if (!(m.ss > 0.0)) throw SingularEquilibrium("int D~ sigma^2 must be positive");
  const double num_par = m.phi_a + m.psi_s;
  const double par = 0.5 * dims.d * (m.phi_phi + m.psi_psi - num_par * num_par / den_par);
  const double perp = 0.5 * (dims.D - dims.d) * (m.psi_psi - m.psi_s * m.psi_s / m.ss);
  return {par + perp, par, perp};
}

/// Closed form of optimal_loss for flow matching + k-target + uniform t + u-loss.
inline double optimal_loss_poly(double k, const DimensionPair& dims) {
  if (!(k >= 0.0 && k <= 1.0)) throw InvalidArgument("optimal_loss_poly: k must lie in [0, 1]");
  const double D = dims.D, d = dims.d;
  return (2.0 * (D + d) * k * k - 4.0 * D * k + (2.0 * D + 3.0 * d)) / 16.0;
}

inline double optimal_k(const DimensionPair& dims) {
  return static_cast<double>(dims.D) / static_cast<double>(dims.D + dims.d);
}

/// Golden-section search for the minimizer of a unimodal function on [lo, hi].
/// A flat function returns the midpoint.
inline double argmin_k(const std::function<double(double)>& loss_fn, double tol = 1e-10, double lo = 0.0,
                       double hi = 1.0) {
  require(tol > 0.0, "argmin_k: tol must be positive");
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = loss_fn(c), fd = loss_fn(d);
  while (b - a > tol) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = loss_fn(c);
    } else if (fc > fd) {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = loss_fn(d);
    } else {
      // Equal probes: the minimizer of a unimodal function lies between them.
      a = c;
      b = d;
      c = b - inv_phi * (b - a);
      d = a + inv_phi * (b - a);
      fc = loss_fn(c);
      fd = loss_fn(d);
    }
  }
  double x = 0.5 * (a + b);

  // Comparisons stall once f differences reach rounding level, which limits
  // the bracket to about sqrt(eps) relative. A parabola through three probes
  // around x recovers the vertex of locally quadratic losses to near machine
  // precision; it is kept only if it stays in range and does not increase f
  // beyond rounding.
  const double h = std::min(1e-3, 0.25 * (hi - lo));
  if (x - h >= lo && x + h <= hi) {
    const double fm = loss_fn(x - h), f0 = loss_fn(x), fp = loss_fn(x + h);
    const double curv = fp - 2.0 * f0 + fm;
    if (curv > 0.0) {
      const double vertex = x - 0.5 * h * (fp - fm) / curv;
      const double slack = 8.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f0));
      if (std::abs(vertex - x) <= h && loss_fn(vertex) <= f0 + slack) x = vertex;
    }
  }
  return x;
}

/// Per-eigenmode equilibrium coefficient (lambda I_phi_a + I_psi_s) / (lambda I_aa + I_ss).
inline double colored_mode_coeff(double lambda, const MomentSet& m) {
  const double den = lambda * m.aa + m.ss;
  if (!(den > 0.0)) throw SingularEquilibrium("per-mode denominator must be positive");
  return (lambda * m.phi_a + m.psi_s) / den;
}

inline Matrix colored_optimal_weight(const Spectrum& spectrum, const MomentSet& m) {
  if (!spectrum.eigenvectors) throw InvalidArgument("colored_optimal_weight needs eigenvectors");
  const Matrix& Q = *spectrum.eigenvectors;
  Vector coeffs(spectrum.dim());
  for (int i = 0; i < spectrum.dim(); ++i) coeffs[i] = colored_mode_coeff(spectrum.eigenvalues[i], m);
  return Q * coeffs.asDiagonal() * Q.transpose();
}

struct ColoredLoss {
  double total;
  std::vector<double> per_mode;
};

inline ColoredLoss colored_optimal_loss(const Spectrum& spectrum, const MomentSet& m) {
  ColoredLoss out{0.0, {}};
  out.per_mode.reserve(spectrum.dim());
  for (int i = 0; i < spectrum.dim(); ++i) {
    const double lambda = spectrum.eigenvalues[i];
    const double den = lambda * m.aa + m.ss;
    if (!(den > 0.0)) throw SingularEquilibrium("per-mode denominator must be positive");
    const double num = lambda * m.phi_a + m.psi_s;
    const double delta = 0.5 * (lambda * m.phi_phi + m.psi_psi - num * num / den);
    out.per_mode.push_back(delta);
    out.total += delta;
  }
  return out;
}

/// Colored loss for the k-target under flow matching, uniform t and u-loss.
inline ColoredLoss colored_optimal_loss(const Spectrum& spectrum, double k) {
  return colored_optimal_loss(spectrum, uniform_k_moments(k));
}

inline double colored_optimal_k(const Spectrum& spectrum) {
  const double D = spectrum.dim();
  return D / (D + spectrum.trace());
}

}  // namespace kdiff
