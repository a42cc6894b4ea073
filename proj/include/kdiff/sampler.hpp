#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "kdiff/core.hpp"
#include "kdiff/geometry.hpp"
#include "kdiff/kdiff.hpp"
#include "kdiff/rng.hpp"

namespace kdiff {

enum class Solver { Euler, Heun };

/// Integration grid from t = 0 (noise) to t = 1 (data).
struct SampleRun {
  int steps = 50;
  Solver solver = Solver::Heun;
  double clamp_floor = 0.05;
  std::vector<double> grid;  // empty: uniform grid with `steps` intervals

  std::vector<double> time_grid() const {
    std::vector<double> g = grid;
    if (g.empty()) {
      require(steps >= 1, "sampler: steps must be >= 1");
      g.resize(steps + 1);
      for (int i = 0; i <= steps; ++i) g[i] = static_cast<double>(i) / steps;
    }
    require(g.size() >= 2 && g.front() == 0.0 && g.back() == 1.0, "sampler: grid must run from 0 to 1");
    for (std::size_t i = 1; i < g.size(); ++i) require(g[i] > g[i - 1], "sampler: grid must be strictly increasing");
    return g;
  }
};

/// Velocity field over a batch: (Z, t) -> dZ/dt, all rows at the same t.
using VelocityField = std::function<Matrix(const Matrix&, double)>;

/// Field of a target-predicting net: v = ((1 - 2k) z + u_hat) / max(den, floor),
/// with k evaluated at the stage's own t.
template <ToyNet Net>
VelocityField k_velocity_field(const Net& net, const KParam& kparam, double clamp_floor) {
  return [&net, &kparam, clamp_floor](const Matrix& Z, double t) -> Matrix {
    const Vector tv = Vector::Constant(Z.rows(), t);
    const Matrix U = net.forward(Z, tv);
    const double k = kparam.value(t);
    const double den = std::max(conversion_denominator(t, k), clamp_floor);
    return ((1.0 - 2.0 * k) * Z + U) / den;
  };
}

/// Field of a net that predicts v directly.
template <ToyNet Net>
VelocityField direct_velocity_field(const Net& net) {
  return [&net](const Matrix& Z, double t) -> Matrix { return net.forward(Z, Vector::Constant(Z.rows(), t)); };
}

inline Matrix checked_state(Matrix Z) {
  if (!Z.allFinite()) throw NonFiniteState("sampler state became non-finite");
  return Z;
}

inline Matrix euler_step(const Matrix& Z, double t, double t_next, const VelocityField& field) {
  require(t < t_next, "euler_step: t must be < t_next");
  return checked_state(Z + (t_next - t) * field(Z, t));
}

inline Matrix heun_step(const Matrix& Z, double t, double t_next, const VelocityField& field) {
  require(t < t_next, "heun_step: t must be < t_next");
  const double h = t_next - t;
  const Matrix v0 = field(Z, t);
  const Matrix pred = Z + h * v0;
  const Matrix v1 = field(pred, t_next);
  return checked_state(Z + (0.5 * h) * (v0 + v1));
}

template <ToyNet Net>
Matrix euler_step(const Matrix& Z, double t, double t_next, const Net& net, const KParam& kparam,
                  double clamp_floor = 0.05) {
  return euler_step(Z, t, t_next, k_velocity_field(net, kparam, clamp_floor));
}

template <ToyNet Net>
Matrix heun_step(const Matrix& Z, double t, double t_next, const Net& net, const KParam& kparam,
                 double clamp_floor = 0.05) {
  return heun_step(Z, t, t_next, k_velocity_field(net, kparam, clamp_floor));
}

/// Integrate a given initial state (rows are samples) over the run's grid.
inline Matrix integrate(const SampleRun& run, const VelocityField& field, Matrix Z) {
  const std::vector<double> g = run.time_grid();
  if (Z.rows() == 0) return Z;
  for (std::size_t i = 0; i + 1 < g.size(); ++i)
    Z = run.solver == Solver::Euler ? euler_step(Z, g[i], g[i + 1], field) : heun_step(Z, g[i], g[i + 1], field);
  return Z;
}

/// Draw n_samples noise rows and integrate them from t = 0 to t = 1.
template <ToyNet Net>
Matrix run_sampler(const SampleRun& run, const Net& net, const KParam& kparam, std::int64_t n_samples, Rng& rng) {
  require(n_samples >= 0, "run_sampler: n_samples must be >= 0");
  Matrix Z0 = sample_noise(net.dim(), n_samples, rng);
  return integrate(run, k_velocity_field(net, kparam, run.clamp_floor), std::move(Z0));
}

/// Fraction of total squared norm lying outside span(P).
inline double off_manifold_fraction(const Matrix& Z, const ManifoldBasis& basis) {
  const double total = Z.squaredNorm();
  if (total == 0.0) return 0.0;
  const Matrix off = Z * basis.complement();
  return off.squaredNorm() / total;
}

}  // namespace kdiff
