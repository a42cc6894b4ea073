#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "kdiff/core.hpp"
#include "kdiff/lindyn.hpp"
#include "kdiff/rng.hpp"
#include "kdiff/schedule.hpp"

namespace kdiff {

// ---------------------------------------------------------------------------
// Learnable prediction target
// ---------------------------------------------------------------------------

/// Pre-sigmoid parameter(s) for k. Constant mode holds one value; binned mode
/// holds N + 1 knot values at t_i = i / N and interpolates the
/// sigmoid-transformed knots linearly in t.
class KParam {
 public:
  enum class Mode { Constant, Binned };

  static constexpr double kMaxLogit = 40.0;

  static KParam constant(double w_k, bool trainable = true) { return KParam(Mode::Constant, Vector::Constant(1, w_k), trainable); }
  static KParam binned(int bins, double w_k, bool trainable = true) {
    require(bins >= 1, "binned k needs at least one bin");
    return KParam(Mode::Binned, Vector::Constant(bins + 1, w_k), trainable);
  }
  /// Initialize so that k(t) == k_init everywhere.
  static KParam from_k(double k_init, Mode mode = Mode::Constant, int bins = 128, bool trainable = true) {
    require(k_init > 0.0 && k_init < 1.0, "k_init must lie in (0, 1)");
    const double w = logit(k_init);
    return mode == Mode::Constant ? constant(w, trainable) : binned(bins, w, trainable);
  }
  static KParam from_knots(Vector knots, bool trainable = true) {
    require(knots.size() >= 2, "binned k needs at least two knots");
    return KParam(Mode::Binned, std::move(knots), trainable);
  }

  Mode mode() const { return mode_; }
  bool trainable() const { return trainable_; }
  int bins() const { return static_cast<int>(w_.size()) - 1; }
  const Vector& raw() const { return w_; }
  Vector& raw() { return w_; }

  double value(double t) const {
    if (mode_ == Mode::Constant) return sigmoid(w_[0]);
    const auto [i, frac] = locate(t);
    return (1.0 - frac) * sigmoid(w_[i]) + frac * sigmoid(w_[i + 1]);
  }

  /// Add dL/dw for a sample at time t with upstream dL/dk into `grad`.
  /// Binned gradients go to the two bracketing knots by interpolation weight.
  void accumulate_grad(double t, double dk, Vector& grad) const {
    if (mode_ == Mode::Constant) {
      grad[0] += dk * sigmoid_grad(w_[0]);
      return;
    }
    const auto [i, frac] = locate(t);
    grad[i] += dk * (1.0 - frac) * sigmoid_grad(w_[i]);
    grad[i + 1] += dk * frac * sigmoid_grad(w_[i + 1]);
  }

  /// Keep every logit within [-kMaxLogit, kMaxLogit].
  void clamp() { w_ = w_.cwiseMax(-kMaxLogit).cwiseMin(kMaxLogit); }

 private:
  KParam(Mode mode, Vector w, bool trainable) : mode_(mode), w_(std::move(w)), trainable_(trainable) {}

  std::pair<int, double> locate(double t) const {
    const int n = bins();
    const double pos = std::clamp(t, 0.0, 1.0) * n;
    const int i = std::min(static_cast<int>(pos), n - 1);
    return {i, pos - i};
  }

  Mode mode_;
  Vector w_;
  bool trainable_;
};

inline double k_value(const KParam& param, double t) { return param.value(t); }

/// k (1 - t) + (1 - k) t, written as k + (1 - 2k) t so that k = 0.5 gives
/// exactly 0.5 for every t.
inline double conversion_denominator(double t, double k) { return k + (1.0 - 2.0 * k) * t; }

/// v = ((1 - 2k) z + u) / max(k (1 - t) + (1 - k) t, clamp_floor).
template <typename DerivedU, typename DerivedZ>
Vector u_to_v(const Eigen::MatrixBase<DerivedU>& u, const Eigen::MatrixBase<DerivedZ>& z, double t, double k,
              double clamp_floor) {
  const double den = std::max(conversion_denominator(t, k), clamp_floor);
  return ((1.0 - 2.0 * k) * z + u) / den;
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

/// A differentiable map (z, t) -> u_hat over a flat parameter vector. Batches
/// are row-major: Z is B x D, t has B entries.
template <typename N>
concept ToyNet = requires(const N& cnet, N& net, const Matrix& Z, const Vector& t, const Matrix& dU) {
  { cnet.dim() } -> std::convertible_to<int>;
  { cnet.forward(Z, t) } -> std::convertible_to<Matrix>;
  { cnet.backward(Z, t, dU) } -> std::convertible_to<Vector>;
  { net.params() } -> std::convertible_to<Vector&>;
};

/// u_hat = W z, no time input. This is exactly the model of the linear theory.
class PureLinear {
 public:
  explicit PureLinear(int D) : D_(D), theta_(Vector::Zero(static_cast<Eigen::Index>(D) * D)) {
    if (D < 1) throw DimError("PureLinear: D must be >= 1");
  }
  explicit PureLinear(const Matrix& W) : PureLinear(static_cast<int>(W.rows())) {
    if (W.rows() != W.cols()) throw DimError("PureLinear: W must be square");
    weight() = W;
  }

  int dim() const { return D_; }
  Vector& params() { return theta_; }
  const Vector& params() const { return theta_; }
  Eigen::Map<Matrix> weight() { return {theta_.data(), D_, D_}; }
  Eigen::Map<const Matrix> weight() const { return {theta_.data(), D_, D_}; }

  Matrix forward(const Matrix& Z, const Vector&) const { return Z * weight().transpose(); }

  Vector backward(const Matrix& Z, const Vector&, const Matrix& dU) const {
    Vector g(theta_.size());
    Eigen::Map<Matrix>(g.data(), D_, D_).noalias() = dU.transpose() * Z;
    return g;
  }

 private:
  int D_;
  Vector theta_;
};

/// u_hat = W2 silu(W1 [z; t] + b1) + b2 with hidden width H. SiLU is smooth
/// everywhere, so finite-difference checks see no kinks.
class TwoLayer {
 public:
  TwoLayer(int D, int H, Rng& rng) : D_(D), H_(H) {
    if (D < 1 || H < 1) throw DimError("TwoLayer: D and H must be >= 1");
    theta_ = Vector::Zero(size());
    const double s1 = 1.0 / std::sqrt(static_cast<double>(D + 1));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(H));
    for (Eigen::Index i = 0; i < w1_size(); ++i) theta_[i] = s1 * rng.normal();
    for (Eigen::Index i = 0; i < w2_size(); ++i) theta_[w2_offset() + i] = s2 * rng.normal();
  }

  int dim() const { return D_; }
  int hidden() const { return H_; }
  Vector& params() { return theta_; }
  const Vector& params() const { return theta_; }

  Matrix forward(const Matrix& Z, const Vector& t) const {
    const Matrix pre = preactivation(Z, t);
    const Matrix S = pre.unaryExpr([](double x) { return silu(x); });
    return (S * W2().transpose()).rowwise() + b2().transpose();
  }

  Vector backward(const Matrix& Z, const Vector& t, const Matrix& dU) const {
    const Matrix A = augmented(Z, t);
    const Matrix pre = (A * W1().transpose()).rowwise() + b1().transpose();
    const Matrix S = pre.unaryExpr([](double x) { return silu(x); });
    Vector g(size());
    Eigen::Map<Matrix>(g.data() + w2_offset(), D_, H_).noalias() = dU.transpose() * S;
    g.segment(b2_offset(), D_) = dU.colwise().sum().transpose();
    const Matrix dH = (dU * W2()).cwiseProduct(pre.unaryExpr([](double x) { return silu_grad(x); }));
    Eigen::Map<Matrix>(g.data(), H_, D_ + 1).noalias() = dH.transpose() * A;
    g.segment(b1_offset(), H_) = dH.colwise().sum().transpose();
    return g;
  }

 private:
  static double silu(double x) { return x / (1.0 + std::exp(-x)); }
  static double silu_grad(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
  }

  Eigen::Index w1_size() const { return static_cast<Eigen::Index>(H_) * (D_ + 1); }
  Eigen::Index b1_offset() const { return w1_size(); }
  Eigen::Index w2_offset() const { return b1_offset() + H_; }
  Eigen::Index w2_size() const { return static_cast<Eigen::Index>(D_) * H_; }
  Eigen::Index b2_offset() const { return w2_offset() + w2_size(); }
  Eigen::Index size() const { return b2_offset() + D_; }

  Eigen::Map<const Matrix> W1() const { return {theta_.data(), H_, D_ + 1}; }
  Eigen::Map<const Vector> b1() const { return {theta_.data() + b1_offset(), H_}; }
  Eigen::Map<const Matrix> W2() const { return {theta_.data() + w2_offset(), D_, H_}; }
  Eigen::Map<const Vector> b2() const { return {theta_.data() + b2_offset(), D_}; }

  Matrix augmented(const Matrix& Z, const Vector& t) const {
    Matrix A(Z.rows(), D_ + 1);
    A.leftCols(D_) = Z;
    A.col(D_) = t;
    return A;
  }
  Matrix preactivation(const Matrix& Z, const Vector& t) const {
    return (augmented(Z, t) * W1().transpose()).rowwise() + b1().transpose();
  }

  int D_;
  int H_;
  Vector theta_;
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct OptimizerConfig {
  enum class Kind { SGD, Adam };
  Kind kind = Kind::Adam;
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;

  static OptimizerConfig sgd(double lr) { return {Kind::SGD, lr, 0.0, 0.0, 0.0}; }
  static OptimizerConfig adam(double lr, double beta1 = 0.9, double beta2 = 0.95, double eps = 1e-8) {
    return {Kind::Adam, lr, beta1, beta2, eps};
  }
};

struct OptimizerState {
  Vector m;
  Vector v;
  std::int64_t step = 0;
};

/// SGD, or Adam with bias correction. Deterministic elementwise update.
inline void optimizer_step(Vector& params, const Vector& grads, OptimizerState& state, const OptimizerConfig& cfg) {
  if (params.size() != grads.size()) throw DimError("optimizer_step: parameter/gradient size mismatch");
  if (cfg.kind == OptimizerConfig::Kind::SGD) {
    params -= cfg.lr * grads;
    ++state.step;
    return;
  }
  if (state.m.size() != params.size()) {
    state.m = Vector::Zero(params.size());
    state.v = Vector::Zero(params.size());
    state.step = 0;
  }
  ++state.step;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  params.array() -= cfg.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.eps);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class LossMode {
  ULoss,      // (1/2)||u_hat - u||^2
  VLossAlg1,  // (1/2)||v_pred - v||^2 with both converted through u_to_v
};

struct TrainConfig {
  LossMode loss_mode = LossMode::ULoss;
  OptimizerConfig optimizer = OptimizerConfig::adam(1e-2, 0.9, 0.95);
  int batch = 256;
  int steps = 20000;
  std::uint64_t seed = 0;
  double clamp_floor = 0.05;
  bool k_trainable = true;
  double k_init = 0.5;
  bool stop_grad_target = false;
  TimeMeasure time_sampler = TimeMeasure::uniform();
  bool cosine_decay = false;  // anneal lr to zero over `steps`

  double lr_at(int step) const {
    if (!cosine_decay || steps <= 0) return optimizer.lr;
    return 0.5 * optimizer.lr * (1.0 + std::cos(std::numbers::pi * (step - 1) / steps));
  }

  void validate() const {
    require(optimizer.lr > 0.0, "train: lr must be positive");
    require(clamp_floor > 0.0 && clamp_floor < 1.0, "train: clamp_floor must lie in (0, 1)");
    require(batch >= 1, "train: batch must be >= 1");
    require(steps >= 0, "train: steps must be >= 0");
    require(k_init > 0.0 && k_init < 1.0, "train: k_init must lie in (0, 1)");
  }
};

struct StepResult {
  double loss;
  Vector grad_theta;
  Vector grad_w;  // zero-sized when k is frozen
};

/// Per-batch quantities of the forward pass, exposed for tests.
struct ForwardBatch {
  Vector t;
  Vector k;
  Matrix x;
  Matrix e;
  Matrix z;
  Matrix u;
};

inline ForwardBatch draw_forward_batch(const KParam& kparam, const Matrix& X, const TimeMeasure& measure, Rng& rng) {
  const Eigen::Index B = X.rows();
  ForwardBatch fb;
  fb.t.resize(B);
  fb.k.resize(B);
  for (Eigen::Index i = 0; i < B; ++i) fb.t[i] = sample_t(measure, rng);
  fb.e = sample_noise(static_cast<int>(X.cols()), B, rng);
  fb.x = X;
  for (Eigen::Index i = 0; i < B; ++i) fb.k[i] = kparam.value(fb.t[i]);
  const Vector one_minus_t = (1.0 - fb.t.array()).matrix();
  const Vector one_minus_k = (1.0 - fb.k.array()).matrix();
  fb.z = fb.t.asDiagonal() * X + one_minus_t.asDiagonal() * fb.e;
  fb.u = fb.k.asDiagonal() * X - one_minus_k.asDiagonal() * fb.e;
  return fb;
}

/// Loss and gradients for a given forward batch and network output.
/// Returns per-sample losses through `per_sample` when non-null.
template <ToyNet Net>
StepResult loss_and_grads(const Net& net, const KParam& kparam, const ForwardBatch& fb, const TrainConfig& config,
                          Vector* per_sample = nullptr) {
  const Eigen::Index B = fb.x.rows();
  const double inv_b = 1.0 / static_cast<double>(B);
  const Matrix u_hat = net.forward(fb.z, fb.t);
  Matrix d_uhat(B, fb.x.cols());
  Vector dk = Vector::Zero(B);
  Vector losses(B);
  const bool k_grad = kparam.trainable() && config.k_trainable;

  if (config.loss_mode == LossMode::ULoss) {
    const Matrix r = u_hat - fb.u;
    losses = 0.5 * r.rowwise().squaredNorm();
    d_uhat = r * inv_b;
    // du/dk = x + e
    if (k_grad && !config.stop_grad_target) dk = -(r.cwiseProduct(fb.x + fb.e)).rowwise().sum() * inv_b;
  } else {
    for (Eigen::Index i = 0; i < B; ++i) {
      const double t = fb.t[i], k = fb.k[i];
      const double raw = conversion_denominator(t, k);
      const bool clamped = raw < config.clamp_floor;
      const double den = clamped ? config.clamp_floor : raw;
      const double dden = clamped ? 0.0 : 1.0 - 2.0 * t;
      const auto zi = fb.z.row(i);
      const Eigen::RowVectorXd v = ((1.0 - 2.0 * k) * zi + fb.u.row(i)) / den;
      const Eigen::RowVectorXd v_pred = ((1.0 - 2.0 * k) * zi + u_hat.row(i)) / den;
      const Eigen::RowVectorXd r = v_pred - v;
      losses[i] = 0.5 * r.squaredNorm();
      d_uhat.row(i) = r * (inv_b / den);
      if (k_grad) {
        const Eigen::RowVectorXd dvpred_dk = (-2.0 * zi - v_pred * dden) / den;
        Eigen::RowVectorXd dv_dk = Eigen::RowVectorXd::Zero(zi.size());
        if (!config.stop_grad_target) dv_dk = (-2.0 * zi + fb.x.row(i) + fb.e.row(i) - v * dden) / den;
        dk[i] = r.dot(dvpred_dk - dv_dk) * inv_b;
      }
    }
  }

  StepResult out;
  out.loss = losses.mean();
  if (!std::isfinite(out.loss)) throw NonFiniteLoss("training loss is not finite");
  out.grad_theta = net.backward(fb.z, fb.t, d_uhat);
  if (k_grad) {
    out.grad_w = Vector::Zero(kparam.raw().size());
    for (Eigen::Index i = 0; i < B; ++i) kparam.accumulate_grad(fb.t[i], dk[i], out.grad_w);
  }
  if (per_sample) *per_sample = std::move(losses);
  return out;
}

/// One training step: draw t, noise, build z and the k-dependent target,
/// evaluate the configured loss and its gradients w.r.t. network parameters
/// and (when trainable) the k logits.
template <ToyNet Net>
StepResult training_step(const Net& net, const KParam& kparam, const Matrix& X, const TrainConfig& config, Rng& rng) {
  require(X.rows() >= 1, "training_step: empty batch");
  if (X.cols() != net.dim()) throw DimError("training_step: data and network dimensions differ");
  const ForwardBatch fb = draw_forward_batch(kparam, X, config.time_sampler, rng);
  return loss_and_grads(net, kparam, fb, config);
}

inline constexpr std::array<double, 5> kProbeTimes = {0.0, 0.25, 0.5, 0.75, 1.0};

struct HistoryRow {
  int step;
  double loss;
  std::vector<double> k;  // one entry (constant) or one per probe time (binned)
};

inline std::vector<double> k_snapshot(const KParam& kparam) {
  if (kparam.mode() == KParam::Mode::Constant) return {kparam.value(0.0)};
  std::vector<double> out;
  for (double t : kProbeTimes) out.push_back(kparam.value(t));
  return out;
}

/// Optimizes network and k jointly on batches drawn from `data`. All draws
/// come from streams derived from config.seed, so runs are reproducible.
template <ToyNet Net, DataSource Source>
std::vector<HistoryRow> train(Net& net, KParam& kparam, const Source& data, const TrainConfig& config) {
  config.validate();
  if (data.D() != net.dim()) throw DimError("train: data and network dimensions differ");
  Rng data_rng = Rng::derive(config.seed, "kdiff.train.data");
  Rng step_rng = Rng::derive(config.seed, "kdiff.train.step");
  OptimizerState net_state, k_state;
  std::vector<HistoryRow> history;
  history.reserve(config.steps);
  for (int step = 1; step <= config.steps; ++step) {
    const Matrix X = data.sample(config.batch, data_rng);
    StepResult res;
    try {
      res = training_step(net, kparam, X, config, step_rng);
    } catch (const NonFiniteLoss& e) {
      throw Divergence("non-finite loss at step " + std::to_string(step));
    }
    OptimizerConfig opt = config.optimizer;
    opt.lr = config.lr_at(step);
    optimizer_step(net.params(), res.grad_theta, net_state, opt);
    if (res.grad_w.size() > 0) {
      optimizer_step(kparam.raw(), res.grad_w, k_state, opt);
      kparam.clamp();
    }
    history.push_back({step, res.loss, k_snapshot(kparam)});
  }
  return history;
}

}  // namespace kdiff
