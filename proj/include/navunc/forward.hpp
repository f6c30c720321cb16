// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "navunc/binio.hpp"
#include "navunc/error.hpp"
#include "navunc/geo.hpp"
#include "navunc/hier.hpp"
#include "navunc/rng.hpp"
#include "navunc/ssm.hpp"
#include "navunc/timeutil.hpp"
#include "navunc/tracks.hpp"

namespace navunc {

struct ScenarioConfig {
  double p_fix = 1.0;  // chance that a track-local midnight carries a celestial fix
  std::size_t n_ensemble = 1000;
  std::optional<Hyperparameters> hyper;
  std::uint64_t seed = 1;
  std::size_t threads = 1;
};

struct ForwardEnsemble {
  std::string track_id;
  std::vector<std::vector<GeoPoint>> trajectories;  // trajectory x report
  std::vector<std::vector<std::size_t>> fix_draws;  // realized fix reports per trajectory
  std::vector<std::vector<Displacement>> offsets;   // km, trajectory minus reported, per report

  std::size_t size() const { return trajectories.size(); }
};

struct TrackTaus {
  double tau_x = 0, tau_y = 0, tau_s = 0, tau_theta = 0;
};

/// One track's uncertainty scales from the population lognormals. A zero median gives a
/// zero scale.
inline TrackTaus draw_track_taus(const Hyperparameters& h, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](double mu, double gamma) {
    const double z = normal(rng);
    return mu > 0.0 ? std::exp(std::log(mu) + gamma * z) : 0.0;
  };
  TrackTaus t;
  t.tau_s = draw(h.mu_tau_s, h.gamma_tau_s);
  t.tau_theta = draw(h.mu_tau_theta, h.gamma_tau_theta);
  t.tau_x = draw(h.mu_tau_x, h.gamma_tau_x);
  t.tau_y = draw(h.mu_tau_y, h.gamma_tau_y);
  return t;
}

/// Reports that open a new track-local civil day (mean longitude), excluding the end
/// points. These are the candidate celestial fixes.
inline std::vector<std::size_t> local_midnights(const Track& t) {
  const double lon = t.mean_lon_deg();
  std::vector<std::size_t> out;
  for (std::size_t i = 1; i + 1 < t.size(); ++i)
    if (local_day_index(t[i].time, lon) != local_day_index(t[i - 1].time, lon)) out.push_back(i);
  return out;
}

namespace detail {

inline void check_scenario(const ScenarioConfig& cfg) {
  if (!cfg.hyper) throw ConfigError("forward: population hyperparameters are required");
  if (!(cfg.p_fix >= 0.0 && cfg.p_fix <= 1.0)) throw ConfigError("forward: p_fix must lie in [0, 1]");
  if (cfg.n_ensemble == 0) throw ConfigError("forward: n_ensemble must be positive");
  for (auto f : kTauFamilies) {
    const double m = cfg.hyper->mu(f), g = cfg.hyper->gamma(f);
    if (!(m >= 0.0) || !std::isfinite(m) || !(g >= 0.0) || !std::isfinite(g))
      throw ConfigError(std::string("forward: bad hyperparameters for ") + family_name(f));
  }
}

/// Offsets (trajectory minus reported, km) of one trajectory.
inline std::vector<Displacement> forward_offsets(const Track& t, const Kinematics& k,
                                                 const std::vector<std::size_t>& midnights, const ScenarioConfig& cfg,
                                                 std::size_t member, std::vector<std::size_t>& fixes) {
  Rng rng = make_rng(cfg.seed, "forward/" + t.id(), member);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const TrackTaus tau = draw_track_taus(*cfg.hyper, rng);
  const std::size_t n = t.size();

  // Dead-reckoning error accumulated along the reported kinematics.
  std::vector<Displacement> acc(n);
  for (std::size_t s = 0; s < k.size(); ++s) {
    const double es = tau.tau_s * normal(rng);
    const double eth = tau.tau_theta * normal(rng);
    // First-order inversion of s_hat = s (1 + e); the exact quotient has no finite mean.
    const double speed = k.speed[s] * (1.0 - es);
    const double heading = k.heading[s] - eth;
    const Displacement truth{k.dt_hours[s] * speed * std::cos(heading), k.dt_hours[s] * speed * std::sin(heading)};
    acc[s + 1] = acc[s] + (truth - k.steps[s]);
  }

  // Every candidate midnight consumes the same draws whether or not it is realized, so
  // scenarios with different p_fix share their random numbers.
  std::vector<std::size_t> anchors{0};
  std::vector<Displacement> target{Displacement{}};
  fixes.clear();
  for (std::size_t m : midnights) {
    const double u = unif(rng);
    const Displacement cel{tau.tau_x * std::cos(t[m].pos.lat) * normal(rng), tau.tau_y * normal(rng)};
    if (u < cfg.p_fix) {
      anchors.push_back(m);
      target.push_back(cel);
      fixes.push_back(m);
    }
  }
  anchors.push_back(n - 1);
  target.push_back(Displacement{});

  // Discrete bridge: within each anchor interval remove the accumulated error linearly in
  // step count so that the error at each anchor equals its target.
  std::vector<Displacement> out(n);
  for (std::size_t a = 0; a + 1 < anchors.size(); ++a) {
    const std::size_t lo = anchors[a], hi = anchors[a + 1];
    const Displacement miss = (acc[hi] - acc[lo]) - (target[a + 1] - target[a]);
    for (std::size_t r = lo; r <= hi; ++r) {
      const double w = static_cast<double>(r - lo) / static_cast<double>(hi - lo);
      out[r] = target[a] + (acc[r] - acc[lo]) - w * miss;
    }
    out[lo] = target[a];
    out[hi] = target[a + 1];
  }
  return out;
}

}  // namespace detail

/// Forward navigation ensemble for a jump-free track: perturbed dead reckoning from the
/// reported kinematics, bridged between the start, the realized midnight fixes and the
/// end. Start and end are exact.
inline ForwardEnsemble simulate_lq4(const Track& track, const ScenarioConfig& cfg, const EarthModel& earth = {}) {
  detail::check_scenario(cfg);
  const auto k = empirical_kinematics(track, earth);
  const auto midnights = local_midnights(track);
  ForwardEnsemble e;
  e.track_id = track.id();
  e.trajectories.resize(cfg.n_ensemble);
  e.fix_draws.resize(cfg.n_ensemble);
  e.offsets.resize(cfg.n_ensemble);
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t i = first; i < cfg.n_ensemble; i += stride) {
      e.offsets[i] = detail::forward_offsets(track, k, midnights, cfg, i, e.fix_draws[i]);
      auto& path = e.trajectories[i];
      path.reserve(track.size());
      for (std::size_t r = 0; r < track.size(); ++r) {
        const Displacement& d = e.offsets[i][r];
        path.push_back(d.dx == 0.0 && d.dy == 0.0 ? track[r].pos : advance(track[r].pos, d, earth));
      }
    }
  };
  const std::size_t nt = std::max<std::size_t>(1, std::min(cfg.threads, cfg.n_ensemble));
  if (nt == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < nt; ++w) pool.emplace_back(work, w, nt);
    for (auto& th : pool) th.join();
  }
  return e;
}

/// Random/systematic/overall uncertainty across the ensemble.
inline PositionUncertainty lq4_uncertainty(const ForwardEnsemble& e, const Track& track, const EarthModel& earth = {}) {
  if (e.size() == 0) throw DataError("lq4_uncertainty: empty ensemble");
  for (const auto& p : e.trajectories)
    if (p.size() != track.size()) throw DataError("lq4_uncertainty: trajectory length does not match the track");
  const auto q = cumulative_displacements(track.positions(), earth);
  return uncertainty_from_draws(
      track, e.size(),
      [&](std::size_t i, std::size_t r) { return q[r] + step_displacement(track[r].pos, e.trajectories[i][r], earth); },
      earth);
}

// Ensemble dump: "ENS1", uint32 header length, JSON header, then trajectory x report x
// (lon_deg, lat_deg) as little-endian float64.

/// `extra` members are merged into the header.
inline void write_ensemble(std::ostream& os, const ForwardEnsemble& e, const ScenarioConfig& cfg,
                           const nlohmann::json& extra = nlohmann::json::object()) {
  const std::size_t n_reports = e.size() ? e.trajectories[0].size() : 0;
  nlohmann::json header{{"track_id", e.track_id},    {"p_fix", cfg.p_fix},     {"seed", cfg.seed},
                        {"n_ensemble", e.size()}, {"n_reports", n_reports}};
  for (const auto& [k, v] : extra.items()) header[k] = v;
  os.write("ENS1", 4);
  binio::put_string(os, header.dump());
  for (const auto& p : e.trajectories)
    for (const auto& g : p) {
      binio::put_f64(os, g.lon_deg());
      binio::put_f64(os, g.lat_deg());
    }
}

struct EnsembleDump {
  nlohmann::json header;
  std::vector<std::vector<GeoPoint>> trajectories;
};

inline EnsembleDump read_ensemble(std::istream& is) {
  binio::expect_magic(is, "ENS1");
  EnsembleDump d;
  try {
    d.header = nlohmann::json::parse(binio::get_string(is));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("ensemble header: ") + e.what());
  }
  const auto n = d.header.at("n_ensemble").get<std::size_t>(), m = d.header.at("n_reports").get<std::size_t>();
  d.trajectories.assign(n, {});
  for (auto& p : d.trajectories) {
    p.reserve(m);
    for (std::size_t r = 0; r < m; ++r) {
      const double lon = binio::get_f64(is);
      const double lat = binio::get_f64(is);
      p.push_back(GeoPoint::from_degrees(lon, lat));
    }
  }
  return d;
}

}  // namespace navunc
