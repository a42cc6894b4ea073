#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>

#include "kdiff/core.hpp"
#include "kdiff/rng.hpp"

namespace kdiff {

using ScalarFn = std::function<double(double)>;

/// Forward process z = alpha(t) x + sigma(t) n.
struct ProcessSpec {
  std::string name;
  ScalarFn alpha;
  ScalarFn sigma;

  static ProcessSpec flow_matching() {
    return {"flow_matching", [](double t) { return t; }, [](double t) { return 1.0 - t; }};
  }
};

/// Regression target u = phi(t) x + psi(t) n.
struct TargetSpec {
  std::string name;
  ScalarFn phi;
  ScalarFn psi;
  std::optional<double> k;  // set for the k-parameterized family

  static TargetSpec epsilon() {
    return {"epsilon", [](double) { return 0.0; }, [](double) { return 1.0; }, std::nullopt};
  }
  static TargetSpec x() {
    return {"x", [](double) { return 1.0; }, [](double) { return 0.0; }, std::nullopt};
  }
  static TargetSpec v() {
    return {"v", [](double) { return 1.0; }, [](double) { return -1.0; }, std::nullopt};
  }
  /// u = k x - (1 - k) n with constant k in [0, 1].
  static TargetSpec k_target(double k) {
    if (!(k >= 0.0 && k <= 1.0)) throw InvalidArgument("k_target: k must lie in [0, 1]");
    return {"k", [k](double) { return k; }, [k](double) { return -(1.0 - k); }, k};
  }
};

/// The variable actually regressed in the loss, w = xi(t) x + eta(t) n.
/// `is_u` marks w = u, whose scaling factor is identically one.
struct LossTargetSpec {
  std::string name;
  ScalarFn xi;
  ScalarFn eta;
  bool is_u = false;

  static LossTargetSpec u_loss() { return {"u", nullptr, nullptr, true}; }
  static LossTargetSpec x_loss() {
    return {"x", [](double) { return 1.0; }, [](double) { return 0.0; }, false};
  }
  static LossTargetSpec eps_loss() {
    return {"epsilon", [](double) { return 0.0; }, [](double) { return 1.0; }, false};
  }
  static LossTargetSpec v_loss() {
    return {"v", [](double) { return 1.0; }, [](double) { return -1.0; }, false};
  }
};

/// Sampling distribution of t on an interval [lo, hi] within [0, 1]. The
/// density is normalized over the interval; a logit-normal restricted to a
/// sub-interval is the truncated distribution.
class TimeMeasure {
 public:
  enum class Kind { Uniform, LogitNormal };

  static TimeMeasure uniform(double lo = 0.0, double hi = 1.0) {
    return TimeMeasure(Kind::Uniform, 0.0, 1.0, lo, hi);
  }
  static TimeMeasure logit_normal(double mu, double sigma, double lo = 0.0, double hi = 1.0) {
    if (!(sigma > 0.0)) throw InvalidArgument("logit_normal: sigma must be positive");
    return TimeMeasure(Kind::LogitNormal, mu, sigma, lo, hi);
  }

  Kind kind() const { return kind_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }
  double mu() const { return mu_; }
  double sigma() const { return sigma_; }
  bool full_interval() const { return lo_ == 0.0 && hi_ == 1.0; }

  double density(double t) const {
    if (t < lo_ || t > hi_) return 0.0;
    if (kind_ == Kind::Uniform) return 1.0 / (hi_ - lo_);
    if (t <= 0.0 || t >= 1.0) return 0.0;
    const double g = (logit(t) - mu_) / sigma_;
    return normal_pdf(g) / (sigma_ * t * (1.0 - t)) / mass_;
  }

  double cdf(double t) const {
    if (t <= lo_) return 0.0;
    if (t >= hi_) return 1.0;
    if (kind_ == Kind::Uniform) return (t - lo_) / (hi_ - lo_);
    return (raw_cdf(t) - raw_cdf(lo_)) / mass_;
  }

  /// Logit-normal draws are sigmoid(mu + sigma g) with g standard normal;
  /// on a proper sub-interval out-of-range draws are rejected.
  double sample(Rng& rng) const {
    if (kind_ == Kind::Uniform) return lo_ + (hi_ - lo_) * rng.uniform();
    for (;;) {
      const double t = from_normal(rng.normal());
      if (t >= lo_ && t <= hi_) return t;
    }
  }

  /// Map an underlying standard-normal draw to t (logit-normal only).
  double from_normal(double g) const { return sigmoid_unclamped(mu_ + sigma_ * g); }

 private:
  TimeMeasure(Kind kind, double mu, double sigma, double lo, double hi)
      : kind_(kind), mu_(mu), sigma_(sigma), lo_(lo), hi_(hi) {
    if (!(lo >= 0.0 && hi <= 1.0 && lo < hi))
      throw InvalidArgument("time measure interval must satisfy 0 <= lo < hi <= 1");
    if (kind_ == Kind::LogitNormal) {
      mass_ = raw_cdf(hi_) - raw_cdf(lo_);
      if (!(mass_ > 0.0)) throw InvalidArgument("logit_normal: interval carries no mass");
    }
  }

  double raw_cdf(double t) const {
    if (t <= 0.0) return 0.0;
    if (t >= 1.0) return 1.0;
    return normal_cdf((logit(t) - mu_) / sigma_);
  }

  static double sigmoid_unclamped(double w) {
    if (w >= 0.0) return 1.0 / (1.0 + std::exp(-w));
    const double e = std::exp(w);
    return e / (1.0 + e);
  }

  Kind kind_;
  double mu_;
  double sigma_;
  double lo_;
  double hi_;
  double mass_ = 1.0;
};

/// phi sigma - psi alpha: the determinant of the (x, n) -> (z, u) map.
inline double target_determinant(const ProcessSpec& process, const TargetSpec& target, double t) {
  return target.phi(t) * process.sigma(t) - target.psi(t) * process.alpha(t);
}

/// Scaling factor kappa with w_hat - w = kappa (u_hat - u).
/// Raises DegenerateTarget on a singular (z, u) map unless a positive
/// clamp_floor is given, in which case |determinant| is floored at it.
inline double kappa(const ProcessSpec& process, const TargetSpec& target, const LossTargetSpec& loss,
                    double t, double clamp_floor = 0.0) {
  if (loss.is_u) return 1.0;
  double det = target_determinant(process, target, t);
  if (std::abs(det) < std::numeric_limits<double>::epsilon()) {
    if (clamp_floor <= 0.0)
      throw DegenerateTarget("phi*sigma - psi*alpha vanishes at t = " + std::to_string(t));
  }
  if (clamp_floor > 0.0 && std::abs(det) < clamp_floor) det = det < 0.0 ? -clamp_floor : clamp_floor;
  return (loss.xi(t) * process.sigma(t) - loss.eta(t) * process.alpha(t)) / det;
}

/// Effective loss weight density(t) * kappa(t)^2.
template <typename KappaFn>
double effective_weight(const TimeMeasure& measure, KappaFn&& kappa_fn, double t) {
  const double k = kappa_fn(t);
  return measure.density(t) * k * k;
}

inline double effective_weight(const TimeMeasure& measure, const ProcessSpec& process,
                               const TargetSpec& target, const LossTargetSpec& loss, double t) {
  return effective_weight(measure, [&](double s) { return kappa(process, target, loss, s); }, t);
}

inline double sample_t(const TimeMeasure& measure, Rng& rng) { return measure.sample(rng); }

/// Solve z = alpha x + sigma n, u = phi x + psi n for (x, n).
inline std::pair<Vector, Vector> recover_components(const ProcessSpec& process, const TargetSpec& target,
                                                    double t, const Vector& z, const Vector& u) {
  const double det = target_determinant(process, target, t);
  if (std::abs(det) < std::numeric_limits<double>::epsilon())
    throw DegenerateTarget("cannot invert (z, u) at t = " + std::to_string(t));
  const double a = process.alpha(t), s = process.sigma(t);
  const double p = target.phi(t), q = target.psi(t);
  Vector x = (-q * z + s * u) / det;
  Vector n = (p * z - a * u) / det;
  return {std::move(x), std::move(n)};
}

}  // namespace kdiff
