// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "navunc/rng.hpp"

namespace navunc::stats {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // log(sqrt(2*pi))

inline double normal_logpdf(double x, double mu, double sd) {
  const double z = (x - mu) / sd;
  return -0.5 * z * z - std::log(sd) - kLogSqrt2Pi;
}

inline double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// log(1 - Phi(a)), accurate far into the upper tail.
inline double log_std_normal_ccdf(double a) {
  if (a < 30.0) return std::log(0.5 * std::erfc(a / std::numbers::sqrt2));
  // Asymptotic Mills-ratio series.
  const double a2 = a * a;
  const double series = 1.0 - 1.0 / a2 + 3.0 / (a2 * a2) - 15.0 / (a2 * a2 * a2);
  return -0.5 * a2 - kLogSqrt2Pi - std::log(a) + std::log(series);
}

/// Log density at x of N(mu, sd^2) restricted to [lower, inf).
inline double truncnorm_lower_logpdf(double x, double mu, double sd, double lower) {
  if (x < lower) return kNegInf;
  return normal_logpdf(x, mu, sd) - log_std_normal_ccdf((lower - mu) / sd);
}

/// Draw from N(mu, sd^2) restricted to [lower, inf). Plain rejection when the
/// truncation point is below +0.5 sd, otherwise exponential rejection (Robert, 1995).
template <class Engine>
double sample_truncnorm_lower(Engine& eng, double mu, double sd, double lower) {
  const double a = (lower - mu) / sd;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  if (a < 0.5) {
    for (;;) {
      const double z = normal(eng);
      if (z >= a) return mu + sd * z;
    }
  }
  const double lambda = 0.5 * (a + std::sqrt(a * a + 4.0));
  std::exponential_distribution<double> expo(lambda);
  for (;;) {
    const double z = a + expo(eng);
    const double d = z - lambda;
    if (unif(eng) <= std::exp(-0.5 * d * d)) return mu + sd * z;
  }
}

/// Half-normal with scale `scale` (the sd of the parent normal).
inline double halfnormal_logpdf(double x, double scale) {
  if (x < 0.0) return kNegInf;
  return normal_logpdf(x, 0.0, scale) + std::numbers::ln2;
}

inline double chi2_logpdf(double x, double dof) {
  if (x <= 0.0) return kNegInf;
  const double k = 0.5 * dof;
  return (k - 1.0) * std::log(x) - 0.5 * x - k * std::numbers::ln2 - std::lgamma(k);
}

inline double mean(std::span<const double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Unbiased sample variance; 0 for fewer than two values.
inline double variance(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

/// Population (divide-by-n) standard deviation, as used for ensemble spreads.
inline double population_sd(std::span<const double> v) {
  if (v.empty()) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

/// Nearest-rank quantile: the ceil(q*n)-th smallest value (1-based, at least 1).
inline double quantile_nearest_rank(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("quantile of empty sample");
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  auto rank = static_cast<std::size_t>(std::ceil(q * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, v.size());
  return v[rank - 1];
}

/// Linearly interpolated quantile (Hyndman-Fan type 7) of an already sorted sample.
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("quantile of empty sample");
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  return quantile_sorted(v, q);
}

inline double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

/// Mean direction of a set of angles; 0 when the resultant vanishes.
inline double circular_mean(std::span<const double> angles) {
  double s = 0.0, c = 0.0;
  for (double a : angles) {
    s += std::sin(a);
    c += std::cos(a);
  }
  if (s == 0.0 && c == 0.0) return 0.0;
  return std::atan2(s, c);
}

}  // namespace navunc::stats
