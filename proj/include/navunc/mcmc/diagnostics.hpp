// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "navunc/error.hpp"
#include "navunc/mcmc/samples.hpp"
#include "navunc/stats.hpp"

namespace navunc::mcmc {

struct Diagnostics {
  std::vector<std::string> names;
  std::vector<double> rhat;
  std::vector<double> ess;
};

/// Split-Rhat of equally long chains (each chain halved).
inline double split_rhat(const std::vector<std::vector<double>>& chains) {
  std::size_t n = chains.front().size();
  for (const auto& c : chains) n = std::min(n, c.size());
  const std::size_t half = n / 2;
  std::vector<std::span<const double>> parts;
  for (const auto& c : chains) {
    parts.emplace_back(c.data(), half);
    parts.emplace_back(c.data() + (n - half), half);
  }
  const double m = static_cast<double>(parts.size());
  const double len = static_cast<double>(half);
  std::vector<double> means;
  double w = 0.0;
  for (auto p : parts) {
    means.push_back(stats::mean(p));
    w += stats::variance(p);
  }
  w /= m;
  const double b = len * stats::variance(means);
  const double var_plus = (len - 1.0) / len * w + b / len;
  if (w <= 0.0) return b > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
  return std::sqrt(var_plus / w);
}

/// Multi-chain effective sample size from autocorrelations truncated by Geyer's
/// initial monotone positive-sequence rule. Capped at the number of draws.
inline double effective_sample_size(const std::vector<std::vector<double>>& chains) {
  std::size_t n = chains.front().size();
  for (const auto& c : chains) n = std::min(n, c.size());
  const std::size_t m = chains.size();
  if (n < 4) return static_cast<double>(n * m);

  std::vector<double> means(m), vars(m);
  for (std::size_t j = 0; j < m; ++j) {
    std::span<const double> c(chains[j].data(), n);
    means[j] = stats::mean(c);
    vars[j] = stats::variance(c);
  }
  const double w = stats::mean(vars);
  const double nn = static_cast<double>(n);
  const double var_plus = (nn - 1.0) / nn * w + (m > 1 ? stats::variance(means) : 0.0);
  if (var_plus <= 0.0) return static_cast<double>(n * m);

  auto autocov = [&](std::size_t lag) {
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const auto& c = chains[j];
      double s = 0.0;
      for (std::size_t i = 0; i + lag < n; ++i) s += (c[i] - means[j]) * (c[i + lag] - means[j]);
      acc += s / nn;
    }
    return acc / static_cast<double>(m);
  };
  auto rho = [&](std::size_t lag) { return 1.0 - (w - autocov(lag)) / var_plus; };

  double tau = -1.0;
  double prev_pair = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; 2 * k + 1 < n; ++k) {
    double pair = (k == 0 ? 1.0 : rho(2 * k)) + rho(2 * k + 1);
    if (pair <= 0.0) break;
    pair = std::min(pair, prev_pair);
    prev_pair = pair;
    tau += 2.0 * pair;
  }
  const double total = static_cast<double>(n * m);
  tau = std::max(tau, 1.0 / std::log10(total));
  return std::min(total / tau, total);
}

/// Split-Rhat and ESS for every column. Needs at least two chains of 100 draws.
inline Diagnostics diagnostics(const PosteriorSamples& s) {
  if (s.n_chains() < 2) throw InferenceError("diagnostics need at least two chains");
  Diagnostics d;
  d.names = s.names();
  for (std::size_t col = 0; col < s.dim(); ++col) {
    auto chains = s.by_chain(col);
    for (const auto& c : chains)
      if (c.size() < 100) throw InferenceError("diagnostics need at least 100 draws per chain");
    d.rhat.push_back(split_rhat(chains));
    d.ess.push_back(effective_sample_size(chains));
  }
  return d;
}

}  // namespace navunc::mcmc
