// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "navunc/error.hpp"
#include "navunc/geo.hpp"
#include "navunc/hier.hpp"
#include "navunc/mcmc.hpp"
#include "navunc/stats.hpp"
#include "navunc/tracks.hpp"

namespace navunc {

/// One celestial jump with the dead-reckoning distance behind it.
struct JumpRecord {
  std::string track_id;
  double jx = 0, jy = 0;    // km
  double dx2 = 0, dy2 = 0;  // km^2, sums of squared reported step components since the last fix
  double coslat = 1;        // at the fix
};

/// One record per fix after the first. The sums run over the reported steps from the
/// previous fix up to the report before this one.
inline std::vector<JumpRecord> segment_stats(const Track& track, const FixSchedule& fs, const EarthModel& earth = {}) {
  std::vector<JumpRecord> out;
  if (fs.size() < 2) return out;
  if (fs.jumps.size() != fs.indices.size()) throw DataError("track " + track.id() + ": fix schedule is inconsistent");
  const auto k = empirical_kinematics(track, earth);
  for (std::size_t f = 1; f < fs.size(); ++f) {
    const std::size_t p = fs.indices[f - 1], c = fs.indices[f];
    if (c <= p || c >= track.size()) throw DataError("track " + track.id() + ": fix indices out of order");
    JumpRecord r{track.id(), fs.jumps[f].dx, fs.jumps[f].dy, 0.0, 0.0, std::cos(track[c].pos.lat)};
    for (std::size_t s = p; s + 1 < c; ++s) {
      r.dx2 += k.steps[s].dx * k.steps[s].dx;
      r.dy2 += k.steps[s].dy * k.steps[s].dy;
    }
    out.push_back(std::move(r));
  }
  return out;
}

enum class Regressor { mean, median };

struct JumpBin {
  long ix = 0, iy = 0;  // cell in (sqrt dx2, sqrt dy2)
  std::size_t n = 0;
  double vx = 0, vy = 0;            // unbiased sample variances of jx, jy
  double dx2 = 0, dy2 = 0, coslat = 0;  // representative regressors
};

struct JumpBins {
  double bin_km = 20;
  std::vector<JumpBin> cells;  // every occupied cell, ordered by (ix, iy)

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& c : cells) n += c.n;
    return n;
  }
  /// Cells with at least two records; only these carry a variance.
  std::vector<JumpBin> retained() const {
    std::vector<JumpBin> out;
    for (const auto& c : cells)
      if (c.n >= 2) out.push_back(c);
    return out;
  }
};

inline JumpBins bin_jumps(const std::vector<JumpRecord>& records, double bin_km = 20.0,
                          Regressor regressor = Regressor::mean) {
  if (!(bin_km > 0) || !std::isfinite(bin_km)) throw ConfigError("bin_jumps: bin size must be positive");
  std::map<std::pair<long, long>, std::vector<const JumpRecord*>> groups;
  for (const auto& r : records) {
    if (!std::isfinite(r.jx) || !std::isfinite(r.jy) || !(r.dx2 >= 0) || !(r.dy2 >= 0) || !std::isfinite(r.dx2) ||
        !std::isfinite(r.dy2) || !std::isfinite(r.coslat))
      throw DataError("bin_jumps: invalid record for track '" + r.track_id + "'");
    groups[{static_cast<long>(std::floor(std::sqrt(r.dx2) / bin_km)), static_cast<long>(std::floor(std::sqrt(r.dy2) / bin_km))}]
        .push_back(&r);
  }
  JumpBins out;
  out.bin_km = bin_km;
  for (const auto& [key, rs] : groups) {
    JumpBin b;
    b.ix = key.first;
    b.iy = key.second;
    b.n = rs.size();
    std::vector<double> jx, jy, dx2, dy2, cl;
    for (const auto* r : rs) {
      jx.push_back(r->jx);
      jy.push_back(r->jy);
      dx2.push_back(r->dx2);
      dy2.push_back(r->dy2);
      cl.push_back(r->coslat);
    }
    if (b.n >= 2) {
      b.vx = stats::variance(jx);
      b.vy = stats::variance(jy);
    }
    auto rep = [&](const std::vector<double>& v) { return regressor == Regressor::mean ? stats::mean(v) : stats::median(v); };
    b.dx2 = rep(dx2);
    b.dy2 = rep(dy2);
    b.coslat = rep(cl);
    out.cells.push_back(b);
  }
  return out;
}

struct LincheckConfig {
  double bin_km = 20.0;
  Regressor regressor = Regressor::mean;
  double log_tau_lo = std::log(1e-3), log_tau_hi = std::log(1e3);  // flat prior on log tau
  mcmc::SamplerConfig sampler = [] {
    mcmc::SamplerConfig c;
    c.chains = 4;
    c.warmup = 1000;
    c.draws = 1000;
    c.stream = "lincheck";
    c.init_jitter = 0.3;
    return c;
  }();
  mcmc::NutsConfig nuts;
};

namespace detail {

/// Scaled chi-square likelihood of the binned jump variances in (log tau_x, log tau_y,
/// log tau_s, log tau_theta), kept up to data-only constants:
///   Var(Jx) = tau_s^2 dx2 + tau_theta^2 dy2 + 2 (tau_x coslat)^2
///   Var(Jy) = tau_s^2 dy2 + tau_theta^2 dx2 + 2 tau_y^2
///   (n-1) V / Var ~ chi2(n-1)
class LinearizedModel {
public:
  explicit LinearizedModel(std::vector<JumpBin> bins) : bins_(std::move(bins)) {}

  std::size_t dim() const { return 4; }

  double log_density(std::span<const double> x) const {
    double g[4];
    return log_density_gradient(x, g);
  }

  double log_density_gradient(std::span<const double> x, std::span<double> g) const {
    std::fill(g.begin(), g.end(), 0.0);
    const double tx2 = std::exp(2 * x[0]), ty2 = std::exp(2 * x[1]), ts2 = std::exp(2 * x[2]), th2 = std::exp(2 * x[3]);
    double lp = 0;
    for (const auto& b : bins_) {
      const double m = static_cast<double>(b.n) - 1.0;
      const double c2 = b.coslat * b.coslat;
      const double var_x = ts2 * b.dx2 + th2 * b.dy2 + 2 * tx2 * c2;
      const double var_y = ts2 * b.dy2 + th2 * b.dx2 + 2 * ty2;
      lp += -0.5 * m * (std::log(var_x) + b.vx / var_x) - 0.5 * m * (std::log(var_y) + b.vy / var_y);
      // d lp / d Var, then d Var / d log tau = 2 tau^2 * regressor.
      const double ax = 0.5 * m * (b.vx / (var_x * var_x) - 1.0 / var_x);
      const double ay = 0.5 * m * (b.vy / (var_y * var_y) - 1.0 / var_y);
      g[0] += ax * 4 * tx2 * c2;
      g[1] += ay * 4 * ty2;
      g[2] += ax * 2 * ts2 * b.dx2 + ay * 2 * ts2 * b.dy2;
      g[3] += ax * 2 * th2 * b.dy2 + ay * 2 * th2 * b.dx2;
    }
    if (!std::isfinite(lp)) {
      std::fill(g.begin(), g.end(), 0.0);
      return stats::kNegInf;
    }
    return lp;
  }

  std::vector<std::string> generated_names() const { return {"tau_x", "tau_y", "tau_s", "tau_theta"}; }
  std::vector<double> generated(std::span<const double> x) const {
    return {std::exp(x[0]), std::exp(x[1]), std::exp(x[2]), std::exp(x[3])};
  }

private:
  std::vector<JumpBin> bins_;
};

}  // namespace detail

/// Posterior of the navigation scales from binned jump variances. Columns: log_tau_x,
/// log_tau_y, log_tau_s, log_tau_theta, then tau_x, tau_y, tau_s, tau_theta.
inline mcmc::PosteriorSamples fit_linearized(const JumpBins& bins, const LincheckConfig& cfg = {}) {
  const auto kept = bins.retained();
  if (kept.size() < 3)
    throw DataError("lincheck: need at least 3 bins with two or more jumps, got " + std::to_string(kept.size()));
  bool any_spread = false;
  for (const auto& b : kept) any_spread = any_spread || b.vx > 0 || b.vy > 0;
  if (!any_spread) throw InferenceError("lincheck: every bin has zero jump variance");
  if (!(cfg.log_tau_lo < cfg.log_tau_hi)) throw ConfigError("lincheck: empty prior range");

  // Start from the small-distance bins: celestial terms only.
  std::vector<double> vx, vy, cl;
  for (const auto& b : kept) {
    vx.push_back(b.vx);
    vy.push_back(b.vy);
    cl.push_back(b.coslat);
  }
  auto inside = [&](double v) {
    const double m = 0.05 * (cfg.log_tau_hi - cfg.log_tau_lo);
    return std::clamp(v, cfg.log_tau_lo + m, cfg.log_tau_hi - m);
  };
  const double c = std::max(stats::median(cl), 0.1);
  std::vector<double> init{inside(0.5 * std::log(std::max(stats::median(vx), 1e-6) / 2) - std::log(c)),
                           inside(0.5 * std::log(std::max(stats::median(vy), 1e-6) / 2)), inside(std::log(0.1)),
                           inside(std::log(0.1))};

  mcmc::ParameterSpace sp;
  const auto sup = mcmc::Support::interval(cfg.log_tau_lo, cfg.log_tau_hi);
  sp.add_block("log_tau",
               {{"log_tau_x", sup, 0.1}, {"log_tau_y", sup, 0.1}, {"log_tau_s", sup, 0.3}, {"log_tau_theta", sup, 0.3}});
  detail::LinearizedModel model(kept);
  mcmc::NutsSampler<detail::LinearizedModel> sampler(std::move(sp), cfg.sampler, cfg.nuts);
  try {
    return sampler.run(model, init);
  } catch (const InferenceError& e) {
    throw InferenceError(std::string("lincheck: ") + e.what());
  }
}

inline nlohmann::json lincheck_summary_json(const mcmc::PosteriorSamples& s) {
  nlohmann::json out = nlohmann::json::object();
  const auto d = mcmc::diagnostics(s);
  for (const char* name : {"tau_x", "tau_y", "tau_s", "tau_theta"}) {
    const auto q = summarize(s.column(name));
    out[name] = {{"q05", q.q05}, {"q25", q.q25}, {"q50", q.q50}, {"q75", q.q75}, {"q95", q.q95}, {"std", q.std},
                 {"rhat", d.rhat[s.index_of(std::string("log_") + name)]}};
  }
  return out;
}

// Jump CSV: track_id,jx_km,jy_km,dx2_km2,dy2_km2,coslat

inline void write_jump_csv(std::ostream& os, const std::vector<JumpRecord>& records) {
  os << "track_id,jx_km,jy_km,dx2_km2,dy2_km2,coslat\n";
  char buf[160];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%.17g,%.17g\n", r.jx, r.jy, r.dx2, r.dy2, r.coslat);
    os << r.track_id << buf;
  }
}

inline std::vector<JumpRecord> read_jump_csv(std::istream& is) {
  std::vector<JumpRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("track_id", 0) == 0) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 6) throw ParseError(lineno, "jump record needs 6 fields, got " + std::to_string(f.size()));
    JumpRecord r;
    r.track_id = detail::trim(f[0]);
    r.jx = detail::parse_double(detail::trim(f[1]), lineno, "jx_km");
    r.jy = detail::parse_double(detail::trim(f[2]), lineno, "jy_km");
    r.dx2 = detail::parse_double(detail::trim(f[3]), lineno, "dx2_km2");
    r.dy2 = detail::parse_double(detail::trim(f[4]), lineno, "dy2_km2");
    r.coslat = detail::parse_double(detail::trim(f[5]), lineno, "coslat");
    if (r.dx2 < 0 || r.dy2 < 0) throw ParseError(lineno, "negative squared distance");
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace navunc
