#pragma once

// Test-only reference computations. Nothing here calls into the library's
// quadrature, minimizers or gradients, so checks against these stay independent.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

/// Composite Simpson rule with n (even) panels.
inline double simpson(const std::function<double(double)>& f, double a, double b, int n = 20000) {
  if (n % 2) ++n;
  const double h = (b - a) / n;
  double acc = f(a) + f(b);
  for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * f(a + i * h);
  return acc * h / 3.0;
}

/// Brute-force minimizer on a uniform grid followed by grid refinement.
inline double grid_argmin(const std::function<double(double)>& f, double lo, double hi, int levels = 8) {
  double best = lo;
  for (int level = 0; level < levels; ++level) {
    const int n = 1000;
    double best_val = f(lo);
    best = lo;
    for (int i = 1; i <= n; ++i) {
      const double x = lo + (hi - lo) * i / n;
      const double v = f(x);
      if (v < best_val) {
        best_val = v;
        best = x;
      }
    }
    const double step = (hi - lo) / n;
    lo = std::max(lo, best - step);
    hi = std::min(hi, best + step);
  }
  return best;
}

/// Central finite difference of f at x.
inline double central_diff(const std::function<double(double)>& f, double x, double h = 1e-4) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

/// Kolmogorov-Smirnov statistic of `samples` against the CDF.
inline double ks_statistic(std::vector<double> samples, const std::function<double(double)>& cdf) {
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double dmax = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double F = cdf(samples[i]);
    dmax = std::max({dmax, F - i / n, (i + 1) / n - F});
  }
  return dmax;
}

/// Gradient-flow contraction after `steps` Euler steps of size h on
/// x' = -c (x - x*), i.e. |1 - h c|^steps.
inline double euler_contraction(double h, double c, int steps) { return std::pow(std::abs(1.0 - h * c), steps); }

}  // namespace oracle
