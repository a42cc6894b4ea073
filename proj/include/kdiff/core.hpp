#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace kdiff {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Error hierarchy. Every failure mode the library reports derives from Error
// so callers (the CLI in particular) can catch one type and map it to an exit
// code while still distinguishing the kind by name().
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
  const std::string& name() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define KDIFF_DEFINE_ERROR(Name)                                     \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(#Name, what) {}   \
  };

KDIFF_DEFINE_ERROR(DegenerateTarget)
KDIFF_DEFINE_ERROR(InvalidArgument)
KDIFF_DEFINE_ERROR(DimError)
KDIFF_DEFINE_ERROR(QuadratureDivergence)
KDIFF_DEFINE_ERROR(SingularEquilibrium)
KDIFF_DEFINE_ERROR(Divergence)
KDIFF_DEFINE_ERROR(NonFiniteLoss)
KDIFF_DEFINE_ERROR(NonFiniteState)
KDIFF_DEFINE_ERROR(ConfigError)

#undef KDIFF_DEFINE_ERROR

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

// Logistic function. The input is clamped to [-36, 36] so the result stays
// strictly inside (0, 1) in double precision.
inline double sigmoid(double w) {
  constexpr double kLimit = 36.0;
  if (w > kLimit) w = kLimit;
  if (w < -kLimit) w = -kLimit;
  if (w >= 0.0) return 1.0 / (1.0 + std::exp(-w));
  const double e = std::exp(w);
  return e / (1.0 + e);
}

// d sigmoid / dw, zero where the input clamp is active.
inline double sigmoid_grad(double w) {
  if (std::abs(w) > 36.0) return 0.0;
  const double s = sigmoid(w);
  return s * (1.0 - s);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

inline double normal_pdf(double x) {
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace kdiff
