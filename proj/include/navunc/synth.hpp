// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "navunc/geo.hpp"
#include "navunc/rng.hpp"
#include "navunc/stats.hpp"
#include "navunc/timeutil.hpp"
#include "navunc/tracks.hpp"

namespace navunc {

/// Population-level truth for the generative navigation model.
struct GenerativeTruth {
  double mu_s = 10.4;  // km/hr
  double alpha_s = 0.9;
  double sigma_s = 0.5;       // km/hr
  double sigma_theta = 0.05;  // rad per step
  double tau_x = 33.1;        // km at the equator
  double tau_y = 24.4;        // km
  double tau_s = 0.192;
  double tau_theta = 0.23;  // rad
  double beta_sd = 0.03;    // rad, heading bias per fix interval
};

struct SynthConfig {
  GenerativeTruth truth;
  double tau_log_sd = 0.0;  // across-track spread of log tau around the truth
  std::size_t steps = 300;
  double step_hours = 2.0;
  double fix_probability = 0.87;  // per track-local midnight
  double start_lat_abs_max = 15.0;
  double start_lon_min = -70.0;
  double start_lon_max = 10.0;
  // LQ4 tracks: smooth daily anchors, linearly interpolated at 4-hour reports.
  std::size_t lq4_days = 20;
  double lq4_speed = 18.3;
  double lq4_heading_sd = 0.02;  // rad per day
  // Static-then-jump tracks.
  std::size_t static_steps = 60;
  std::size_t static_run = 3;  // stationary steps between jumps
  double static_jump_km = 84.6;
};

/// Per-track parameter values actually used to generate a track.
struct TrackTruth {
  double mu_s = 0, alpha_s = 0, sigma_s = 0, sigma_theta = 0;
  double tau_x = 0, tau_y = 0, tau_s = 0, tau_theta = 0;
};

struct SynthTrack {
  Track reported;
  std::vector<GeoPoint> true_positions;  // aligned with reports
  FixSchedule injected;                  // celestial corrections and their jumps
  TrackTruth params;
  std::vector<double> s, theta;  // per step (index t-1 for step ending at report t)
  std::vector<double> beta;      // per fix interval
  std::vector<Displacement> p, q;  // per report, from the start
};

namespace detail {

inline UtcSeconds synth_start_time(Rng& rng) {
  std::uniform_int_distribution<int> day(0, 330), hour(0, 11);
  return *parse_iso8601("1885-01-01T00:00:00Z") + static_cast<UtcSeconds>(day(rng)) * kSecondsPerDay +
         static_cast<UtcSeconds>(hour(rng)) * 7200;
}

inline GeoPoint synth_start_point(const SynthConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> lon(cfg.start_lon_min, cfg.start_lon_max);
  std::uniform_real_distribution<double> lat(-cfg.start_lat_abs_max, cfg.start_lat_abs_max);
  const double a = lon(rng);
  return GeoPoint::from_degrees(a, lat(rng));
}

inline std::vector<GeoPoint> walk(GeoPoint start, const std::vector<Displacement>& cumulative) {
  std::vector<GeoPoint> out{start};
  for (std::size_t i = 1; i < cumulative.size(); ++i) out.push_back(advance(out.back(), cumulative[i] - cumulative[i - 1]));
  return out;
}

}  // namespace detail

/// Simulates one two-hourly track from the state-space model: truncated AR(1) speed,
/// random-walk heading, dead-reckoned reports from noisy speed and biased heading, and
/// celestial resets with probability `fix_probability` at each track-local midnight.
inline SynthTrack simulate_hq2(const SynthConfig& cfg, const std::string& id, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const auto& g = cfg.truth;
  SynthTrack out;
  auto spread = [&](double v) { return v * std::exp(cfg.tau_log_sd * normal(rng)); };
  out.params = {g.mu_s, g.alpha_s, g.sigma_s, g.sigma_theta,
                spread(g.tau_x), spread(g.tau_y), spread(g.tau_s), spread(g.tau_theta)};
  const auto& tp = out.params;
  const std::size_t T = cfg.steps;
  const double dt = cfg.step_hours;

  const UtcSeconds t0 = detail::synth_start_time(rng);
  const GeoPoint start = detail::synth_start_point(cfg, rng);
  std::vector<UtcSeconds> times(T + 1);
  for (std::size_t i = 0; i <= T; ++i) times[i] = t0 + static_cast<UtcSeconds>(std::llround(i * dt * 3600.0));

  // True motion.
  out.s.resize(T);
  out.theta.resize(T);
  const double stationary_sd = tp.sigma_s / std::sqrt(1.0 - tp.alpha_s * tp.alpha_s);
  double s_prev = tp.mu_s;
  double th_prev = (unif(rng) * 2.0 - 1.0) * kPi;
  for (std::size_t t = 0; t < T; ++t) {
    const double mean = t == 0 ? tp.mu_s : tp.mu_s + tp.alpha_s * (s_prev - tp.mu_s);
    const double sd = t == 0 ? stationary_sd : tp.sigma_s;
    out.s[t] = sd > 0.0 ? stats::sample_truncnorm_lower(rng, mean, sd, 0.0) : std::max(mean, 0.0);
    out.theta[t] = th_prev + tp.sigma_theta * normal(rng);
    s_prev = out.s[t];
    th_prev = out.theta[t];
  }
  out.p.assign(T + 1, Displacement{});
  for (std::size_t t = 1; t <= T; ++t)
    out.p[t] = out.p[t - 1] + Displacement{dt * out.s[t - 1] * std::cos(out.theta[t - 1]),
                                           dt * out.s[t - 1] * std::sin(out.theta[t - 1])};
  out.true_positions = detail::walk(start, out.p);

  // Fix schedule: first report of each local day (by the true track's mean longitude).
  std::vector<double> lons;
  for (const auto& pt : out.true_positions) lons.push_back(pt.lon);
  const double mean_lon_deg = stats::circular_mean(lons) * kRadToDeg;
  std::vector<std::size_t> fixes;
  for (std::size_t i = 2; i <= T; ++i)
    if (local_day_index(times[i], mean_lon_deg) != local_day_index(times[i - 1], mean_lon_deg) &&
        unif(rng) < cfg.fix_probability)
      fixes.push_back(i);

  // Heading bias per interval; steps outside the first/last interval share its bias.
  const std::size_t n_beta = fixes.size() >= 2 ? fixes.size() - 1 : 0;
  out.beta.resize(n_beta);
  for (auto& b : out.beta) b = g.beta_sd * normal(rng);
  auto beta_at = [&](std::size_t report) {
    if (n_beta == 0) return 0.0;
    std::size_t k = 0;
    while (k + 1 < n_beta && report >= fixes[k + 1]) ++k;
    return out.beta[k];
  };

  out.q.assign(T + 1, Displacement{});
  std::size_t next_fix = 0;
  for (std::size_t t = 1; t <= T; ++t) {
    const double s = out.s[t - 1], th = out.theta[t - 1];
    const double s_hat = s + tp.tau_s * s * normal(rng);
    const double th_hat = th + beta_at(t) + tp.tau_theta * normal(rng);
    const Displacement reckoned =
        out.q[t - 1] + Displacement{dt * s_hat * std::cos(th_hat), dt * s_hat * std::sin(th_hat)};
    if (next_fix < fixes.size() && fixes[next_fix] == t) {
      const double coslat = std::cos(out.true_positions[t].lat);
      out.q[t] = out.p[t] + Displacement{tp.tau_x * coslat * normal(rng), tp.tau_y * normal(rng)};
      out.injected.indices.push_back(t);
      out.injected.jumps.push_back(out.q[t] - reckoned);
      ++next_fix;
    } else {
      out.q[t] = reckoned;
    }
  }
  const auto reported = detail::walk(start, out.q);
  std::vector<TrackReport> rs;
  for (std::size_t i = 0; i <= T; ++i) rs.push_back({times[i], reported[i], "synth"});
  out.reported = Track(id, std::move(rs));
  return out;
}

/// Smooth four-hourly track: daily anchors from a slowly turning constant-speed walk,
/// linearly interpolated in between. No jumps by construction.
inline Track simulate_lq4(const SynthConfig& cfg, const std::string& id, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const UtcSeconds t0 = detail::synth_start_time(rng);
  const GeoPoint start = detail::synth_start_point(cfg, rng);
  double heading = (unif(rng) * 2.0 - 1.0) * kPi;
  std::vector<Displacement> anchors{Displacement{}};
  for (std::size_t d = 0; d < cfg.lq4_days; ++d) {
    heading += cfg.lq4_heading_sd * normal(rng);
    const double km = cfg.lq4_speed * 24.0;
    anchors.push_back(anchors.back() + Displacement{km * std::cos(heading), km * std::sin(heading)});
  }
  std::vector<Displacement> cum;
  for (std::size_t d = 0; d < cfg.lq4_days; ++d)
    for (int j = 0; j < 6; ++j) cum.push_back(anchors[d] + (j / 6.0) * (anchors[d + 1] - anchors[d]));
  cum.push_back(anchors.back());
  const auto pts = detail::walk(start, cum);
  std::vector<TrackReport> rs;
  for (std::size_t i = 0; i < pts.size(); ++i) rs.push_back({t0 + static_cast<UtcSeconds>(i) * 4 * 3600, pts[i], "synth"});
  return Track(id, std::move(rs));
}

/// Two-hourly track that sits still for `static_run` steps and then jumps
/// `static_jump_km` in one step, repeatedly.
inline Track simulate_static_jump(const SynthConfig& cfg, const std::string& id, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const UtcSeconds t0 = detail::synth_start_time(rng);
  GeoPoint p = detail::synth_start_point(cfg, rng);
  double heading = (unif(rng) * 2.0 - 1.0) * kPi;
  std::vector<TrackReport> rs{{t0, p, "synth"}};
  for (std::size_t i = 1; i <= cfg.static_steps; ++i) {
    if (i % (cfg.static_run + 1) == 0) {
      heading += 0.05 * normal(rng);
      p = advance(p, {cfg.static_jump_km * std::cos(heading), cfg.static_jump_km * std::sin(heading)});
    }
    rs.push_back({t0 + static_cast<UtcSeconds>(i) * 7200, p, "synth"});
  }
  return Track(id, std::move(rs));
}

struct SynthFleet {
  std::vector<SynthTrack> hq2;
  std::vector<Track> lq4;
  std::vector<Track> static_jump;

  std::vector<Track> all_reported() const {
    std::vector<Track> out;
    for (const auto& h : hq2) out.push_back(h.reported);
    out.insert(out.end(), lq4.begin(), lq4.end());
    out.insert(out.end(), static_jump.begin(), static_jump.end());
    return out;
  }
};

/// Mixed fleet; every track draws from its own substream of `seed`.
inline SynthFleet simulate_fleet(const SynthConfig& cfg, std::size_t n_hq2, std::size_t n_lq4, std::size_t n_static,
                                 std::uint64_t seed) {
  SynthFleet f;
  auto name = [](const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%03zu", prefix, i);
    return std::string(buf);
  };
  for (std::size_t i = 0; i < n_hq2; ++i) {
    const auto id = name("hq2", i);
    Rng rng = make_rng(seed, "synth/" + id);
    f.hq2.push_back(simulate_hq2(cfg, id, rng));
  }
  for (std::size_t i = 0; i < n_lq4; ++i) {
    const auto id = name("lq4", i);
    Rng rng = make_rng(seed, "synth/" + id);
    f.lq4.push_back(simulate_lq4(cfg, id, rng));
  }
  for (std::size_t i = 0; i < n_static; ++i) {
    const auto id = name("static", i);
    Rng rng = make_rng(seed, "synth/" + id);
    f.static_jump.push_back(simulate_static_jump(cfg, id, rng));
  }
  return f;
}

/// Ground truth for scoring: per HQ2 track parameters, fixes and true positions.
inline nlohmann::json truth_to_json(const SynthFleet& f) {
  nlohmann::json tracks = nlohmann::json::array();
  for (const auto& h : f.hq2) {
    nlohmann::json pos = nlohmann::json::array();
    for (const auto& p : h.true_positions) pos.push_back({p.lon_deg(), p.lat_deg()});
    const auto& tp = h.params;
    tracks.push_back({{"track_id", h.reported.id()},
                      {"class", "HQ2"},
                      {"params",
                       {{"mu_s", tp.mu_s},
                        {"alpha_s", tp.alpha_s},
                        {"sigma_s", tp.sigma_s},
                        {"sigma_theta", tp.sigma_theta},
                        {"tau_x", tp.tau_x},
                        {"tau_y", tp.tau_y},
                        {"tau_s", tp.tau_s},
                        {"tau_theta", tp.tau_theta}}},
                      {"beta", h.beta},
                      {"fixes", fixes_to_json({{h.reported.id(), h.injected}})},
                      {"true_positions_deg", pos}});
  }
  for (const auto& t : f.lq4) tracks.push_back({{"track_id", t.id()}, {"class", "LQ4"}});
  for (const auto& t : f.static_jump) tracks.push_back({{"track_id", t.id()}, {"class", "STATIC_JUMP"}});
  return {{"tracks", tracks}};
}

}  // namespace navunc
