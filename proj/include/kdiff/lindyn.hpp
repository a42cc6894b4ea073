#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <iostream>
#include <limits>
#include <vector>

#include "kdiff/analytic.hpp"
#include "kdiff/core.hpp"
#include "kdiff/geometry.hpp"
#include "kdiff/rng.hpp"
#include "kdiff/schedule.hpp"

namespace kdiff {

template <typename T>
concept DataSource = requires(const T& src, Eigen::Index batch, Rng& rng) {
  { src.D() } -> std::convertible_to<int>;
  { src.sample(batch, rng) } -> std::convertible_to<Matrix>;
};

/// Single linear layer u_hat = W z.
struct LinearModel {
  Matrix W;

  explicit LinearModel(Matrix w) : W(std::move(w)) {
    if (W.rows() != W.cols()) throw DimError("linear model must be square");
    if (!W.allFinite()) throw InvalidArgument("linear model has non-finite entries");
  }
  static LinearModel zero(int D) { return LinearModel(Matrix::Zero(D, D)); }
  int D() const { return static_cast<int>(W.rows()); }
};

struct ModeDecomposition {
  Matrix par;
  Matrix perp;
};

inline ModeDecomposition decompose(const LinearModel& model, const ManifoldBasis& basis) {
  if (model.D() != basis.D()) throw DimError("model and basis dimensions differ");
  Matrix par = model.W * basis.projector();
  Matrix perp = model.W - par;
  return {std::move(par), std::move(perp)};
}

/// W* = c_par PP^T + c_perp (I - PP^T).
inline Matrix equilibrium_weight(const ManifoldBasis& basis, const MomentSet& m) {
  const WeightCoeffs c = optimal_weight_coeffs(m);
  return c.par * basis.projector() + c.perp * basis.complement();
}

/// Descent direction of the expected loss, -dL/dW, assembled from moments:
/// -(I_aa W PP^T + I_ss W - I_phi_a PP^T - I_psi_s I).
inline Matrix exact_gradient(const LinearModel& model, const ManifoldBasis& basis, const MomentSet& m) {
  if (model.D() != basis.D()) throw DimError("model and basis dimensions differ");
  const Matrix& proj = basis.projector();
  Matrix g = -(m.aa * (model.W * proj) + m.ss * model.W - m.phi_a * proj);
  g.diagonal().array() += m.psi_s;
  return g;
}

inline Matrix exact_gradient(const LinearModel& model, const ManifoldBasis& basis, const ProcessSpec& process,
                             const TargetSpec& target, const LossTargetSpec& loss, const TimeMeasure& measure,
                             int quad_nodes = kDefaultQuadNodes) {
  return exact_gradient(model, basis, compute_moments(process, target, loss, measure, quad_nodes));
}

/// Expected loss (1/2) int D~ E||W z - u||^2 for whitened manifold data, in
/// closed form from the moments.
inline double expected_loss(const Matrix& W, const ManifoldBasis& basis, const MomentSet& m) {
  const Matrix& proj = basis.projector();
  const Matrix WP = W * proj;
  const double quad = m.aa * WP.squaredNorm() + m.ss * W.squaredNorm();
  const double cross = m.phi_a * WP.trace() + m.psi_s * W.trace();
  const double constant = m.phi_phi * basis.d() + m.psi_psi * basis.D();
  return 0.5 * quad - cross + 0.5 * constant;
}

/// One minibatch of (x, n, t) triples; x and n are batch x D.
struct SampleBatch {
  Matrix x;
  Matrix n;
  Vector t;
};

/// Minibatch estimate of the descent direction: -mean kappa^2 (W z - u) z^T.
inline Matrix stochastic_gradient(const LinearModel& model, const SampleBatch& batch, const ProcessSpec& process,
                                  const TargetSpec& target, const LossTargetSpec& loss) {
  const Eigen::Index B = batch.x.rows();
  require(B >= 1, "stochastic_gradient: empty batch");
  if (batch.x.cols() != model.D() || batch.n.cols() != model.D() || batch.n.rows() != B || batch.t.size() != B)
    throw DimError("stochastic_gradient: batch shape mismatch");
  Matrix Z(B, model.D()), R(B, model.D());
  for (Eigen::Index i = 0; i < B; ++i) {
    const double t = batch.t[i];
    const double kap = kappa(process, target, loss, t);
    Z.row(i) = process.alpha(t) * batch.x.row(i) + process.sigma(t) * batch.n.row(i);
    const auto u = target.phi(t) * batch.x.row(i) + target.psi(t) * batch.n.row(i);
    R.row(i) = kap * kap * (Z.row(i) * model.W.transpose() - u);
  }
  return -(R.transpose() * Z) / static_cast<double>(B);
}

struct FlowConfig {
  enum class Mode { Exact, Stochastic };
  double step_size = 0.5;
  int steps = 200;
  Mode mode = Mode::Exact;
  int batch = 256;  // Stochastic only

  void validate() const {
    require(step_size > 0.0, "flow: step_size must be positive");
    require(steps >= 0, "flow: steps must be non-negative");
    require(mode == Mode::Exact || batch >= 1, "flow: batch must be >= 1");
  }
};

struct FlowPoint {
  int step;
  Matrix W;
  double loss;
  double dist_par;   // ||W_par - W*_par||_F
  double dist_perp;  // ||W_perp - W*_perp||_F
  Matrix perp;       // W_perp at this step
};

/// Largest step for which explicit Euler on the exact flow is stable.
inline double stability_bound(const MomentSet& m) { return 2.0 / (m.aa + m.ss); }

inline bool log_this_step(int step, int total) {
  if (total <= 1000) return true;
  if (step == 0 || step == total) return true;
  // Roughly 50 points per decade.
  const double l = std::log10(static_cast<double>(step));
  const int bucket = static_cast<int>(l * 50.0);
  const int prev = static_cast<int>(std::log10(static_cast<double>(step - 1)) * 50.0);
  return step == 1 || bucket != prev;
}

/// Gradient flow from `init` by explicit Euler.
///
/// Exact mode integrates the two decoupled mode equations separately:
///   W_par  <- W_par  + h (-(I_aa + I_ss) W_par + (I_phi_a + I_psi_s) PP^T)
///   W_perp <- W_perp + h (-I_ss W_perp + I_psi_s (I - PP^T))
/// which is algebraically the full-matrix update split by the projector; the
/// perpendicular trajectory therefore never touches phi or the parallel state.
/// Stochastic mode steps the full W with minibatch gradients.
inline std::vector<FlowPoint> run_gradient_flow(const LinearModel& init, const ManifoldBasis& basis,
                                                const ProcessSpec& process, const TargetSpec& target,
                                                const LossTargetSpec& loss, const TimeMeasure& measure,
                                                const FlowConfig& config, Rng* rng = nullptr,
                                                int quad_nodes = kDefaultQuadNodes) {
  config.validate();
  if (init.D() != basis.D()) throw DimError("model and basis dimensions differ");
  const MomentSet m = compute_moments(process, target, loss, measure, quad_nodes);
  const WeightCoeffs c = optimal_weight_coeffs(m);
  const Matrix& proj = basis.projector();
  const Matrix comp = basis.complement();
  // Built from the coefficients rather than W* times a projector, so the
  // perpendicular target carries no rounding residue of c_par.
  const Matrix star_par = c.par * proj;
  const Matrix star_perp = c.perp * comp;

  if (config.mode == FlowConfig::Mode::Exact && config.step_size >= stability_bound(m)) {
    std::cerr << "warning: step_size " << config.step_size << " exceeds the stability bound "
              << stability_bound(m) << "; the flow will diverge\n";
  }
  if (config.mode == FlowConfig::Mode::Stochastic && rng == nullptr)
    throw InvalidArgument("stochastic flow needs an rng");
  Rng unused;
  Rng& draw = rng ? *rng : unused;

  ModeDecomposition modes = decompose(init, basis);
  std::vector<FlowPoint> trajectory;
  auto record = [&](int step, double loss_value) {
    Matrix W = modes.par + modes.perp;
    trajectory.push_back({step, std::move(W), loss_value, (modes.par - star_par).norm(),
                          (modes.perp - star_perp).norm(), modes.perp});
  };

  double prev_loss = expected_loss(modes.par + modes.perp, basis, m);
  record(0, prev_loss);
  int rising = 0;
  const double h = config.step_size;
  const double c_par = m.aa + m.ss;
  const double b_par = m.phi_a + m.psi_s;
  for (int step = 1; step <= config.steps; ++step) {
    if (config.mode == FlowConfig::Mode::Exact) {
      modes.par = modes.par + h * (b_par * proj - c_par * modes.par);
      modes.perp = modes.perp + h * (m.psi_s * comp - m.ss * modes.perp);
    } else {
      const LinearModel current(modes.par + modes.perp);
      SampleBatch batch{basis.sample(config.batch, draw), sample_noise(basis.D(), config.batch, draw),
                        Vector(config.batch)};
      for (int i = 0; i < config.batch; ++i) batch.t[i] = sample_t(measure, draw);
      const Matrix W = current.W + h * stochastic_gradient(current, batch, process, target, loss);
      modes = decompose(LinearModel(W), basis);
    }
    const double loss_value = expected_loss(modes.par + modes.perp, basis, m);
    if (!std::isfinite(loss_value)) throw Divergence("loss became non-finite at step " + std::to_string(step));
    if (config.mode == FlowConfig::Mode::Exact) {
      rising = loss_value > prev_loss ? rising + 1 : 0;
      if (rising >= 10) throw Divergence("loss increased for 10 consecutive steps (step " + std::to_string(step) + ")");
    }
    prev_loss = loss_value;
    if (log_this_step(step, config.steps)) record(step, loss_value);
  }
  return trajectory;
}

struct LossEstimate {
  double estimate;
  double std_error;
};

/// Monte Carlo estimate of (1/2) E_t E_{x,n} kappa^2 ||W z - u||^2 with t drawn
/// from the measure. Noise enters as antithetic pairs (n, -n) sharing x and t;
/// the standard error is computed over pair means, which are i.i.d.
///
/// Pairs are processed in chunks with one child stream per chunk and partial
/// sums reduced in chunk order, so the result depends only on the seed.
template <DataSource Source>
LossEstimate monte_carlo_loss(const LinearModel& model, const Source& data, const ProcessSpec& process,
                              const TargetSpec& target, const LossTargetSpec& loss, const TimeMeasure& measure,
                              std::int64_t n_samples, const Rng& rng) {
  require(n_samples >= 2, "monte_carlo_loss: need at least 2 samples");
  if (model.D() != data.D()) throw DimError("model and data dimensions differ");
  const int D = model.D();
  const std::int64_t pairs = n_samples / 2;
  constexpr std::int64_t kChunk = 4096;
  const Matrix Wt = model.W.transpose();
  double mean = 0.0, m2 = 0.0;  // Welford accumulators
  std::int64_t done = 0;
  for (std::int64_t chunk = 0; done < pairs; ++chunk) {
    const std::int64_t B = std::min(kChunk, pairs - done);
    Rng stream = rng.split(static_cast<std::uint64_t>(chunk));
    Vector t(B);
    for (std::int64_t i = 0; i < B; ++i) t[i] = sample_t(measure, stream);
    const Matrix X = data.sample(B, stream);
    const Matrix N = sample_noise(D, B, stream);
    Vector a(B), s(B), p(B), q(B), w(B);
    for (std::int64_t i = 0; i < B; ++i) {
      const double ti = t[i];
      a[i] = process.alpha(ti);
      s[i] = process.sigma(ti);
      p[i] = target.phi(ti);
      q[i] = target.psi(ti);
      const double kap = kappa(process, target, loss, ti);
      w[i] = kap * kap;
    }
    // W z - u = (a W x - p x) +/- (s W n - q n)
    const Matrix WX = X * Wt;
    const Matrix WN = N * Wt;
    const Matrix data_part = a.asDiagonal() * WX - p.asDiagonal() * X;
    const Matrix noise_part = s.asDiagonal() * WN - q.asDiagonal() * N;
    const Vector plus = (data_part + noise_part).rowwise().squaredNorm();
    const Vector minus = (data_part - noise_part).rowwise().squaredNorm();
    for (std::int64_t i = 0; i < B; ++i) {
      const double pair_mean = 0.25 * w[i] * (plus[i] + minus[i]);
      const double delta = pair_mean - mean;
      mean += delta / static_cast<double>(done + i + 1);
      m2 += delta * (pair_mean - mean);
    }
    done += B;
  }
  const double n = static_cast<double>(pairs);
  if (pairs < 2) return {mean, std::numeric_limits<double>::infinity()};
  return {mean, std::sqrt(m2 / (n - 1.0) / n)};
}

}  // namespace kdiff
