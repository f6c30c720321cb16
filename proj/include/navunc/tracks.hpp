// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "navunc/error.hpp"
#include "navunc/geo.hpp"
#include "navunc/stats.hpp"
#include "navunc/timeutil.hpp"

namespace navunc {

struct TrackReport {
  UtcSeconds time = 0;
  GeoPoint pos;
  std::string source_id;
};

/// One voyage segment: at least three reports with strictly increasing times.
class Track {
public:
  Track() = default;

  Track(std::string id, std::vector<TrackReport> reports) : id_(std::move(id)), reports_(std::move(reports)) {
    if (reports_.size() < 3) throw DataError("track " + id_ + ": fewer than 3 reports");
    std::vector<double> gaps;
    gaps.reserve(reports_.size() - 1);
    for (std::size_t i = 1; i < reports_.size(); ++i) {
      if (reports_[i].time <= reports_[i - 1].time)
        throw DataError("track " + id_ + ": timestamps not strictly increasing at report " +
                        std::to_string(i));
      gaps.push_back(static_cast<double>(reports_[i].time - reports_[i - 1].time) / 3600.0);
    }
    cadence_hours_ = stats::median(std::move(gaps));
  }

  const std::string& id() const { return id_; }
  const std::vector<TrackReport>& reports() const { return reports_; }
  std::size_t size() const { return reports_.size(); }
  const TrackReport& operator[](std::size_t i) const { return reports_[i]; }
  double cadence_hours() const { return cadence_hours_; }

  std::vector<GeoPoint> positions() const {
    std::vector<GeoPoint> out;
    out.reserve(reports_.size());
    for (const auto& r : reports_) out.push_back(r.pos);
    return out;
  }

  double duration_days() const {
    return static_cast<double>(reports_.back().time - reports_.front().time) / kSecondsPerDay;
  }

  /// Circular mean longitude in degrees; fixes the track-local clock.
  double mean_lon_deg() const {
    std::vector<double> lons;
    lons.reserve(reports_.size());
    for (const auto& r : reports_) lons.push_back(r.pos.lon);
    return stats::circular_mean(lons) * kRadToDeg;
  }

private:
  std::string id_;
  std::vector<TrackReport> reports_;
  double cadence_hours_ = 0.0;
};

/// Per-step empirical motion. Step t runs from report t to report t+1.
struct Kinematics {
  std::vector<double> speed;       // km/hr
  std::vector<double> heading;     // rad, east = 0, counterclockwise
  std::vector<double> dt_hours;
  std::vector<Displacement> steps;  // km

  std::size_t size() const { return speed.size(); }
};

struct FixSchedule {
  std::vector<std::size_t> indices;  // report indices, ascending
  std::vector<Displacement> jumps;   // reported minus predicted, km

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }
  bool contains(std::size_t report) const {
    return std::binary_search(indices.begin(), indices.end(), report);
  }
};

enum class TrackLabel { HQ2, LQ4, STATIC_JUMP, OTHER };

inline const char* to_string(TrackLabel l) {
  switch (l) {
    case TrackLabel::HQ2: return "HQ2";
    case TrackLabel::LQ4: return "LQ4";
    case TrackLabel::STATIC_JUMP: return "STATIC_JUMP";
    case TrackLabel::OTHER: return "OTHER";
  }
  return "OTHER";
}

struct ClassEvidence {
  double cadence_hours = 0.0;
  double median_speed = 0.0;       // km/hr over all steps
  double static_fraction = 0.0;    // share of steps slower than the static threshold
  double median_move_km = 0.0;     // median length of the non-static steps
  double median_jump_km = 0.0;     // median |J| of detected fixes (0 when none)
  double fix_rate_per_day = 0.0;
};

struct TrackClass {
  TrackLabel label = TrackLabel::OTHER;
  ClassEvidence evidence;
};

/// Operational constants for classification.
struct ClassifyConfig {
  double static_speed_kmh = 0.5;
  double static_fraction = 0.5;
  double static_jump_km = 40.0;
  double hq2_max_cadence_hours = 2.5;
  double hq2_min_fix_rate = 0.3;
  double hq2_max_fix_rate = 1.5;
  double lq4_max_cadence_hours = 5.0;
  double lq4_max_fix_rate = 0.1;
};

// ---------------------------------------------------------------------------
// CSV input/output

namespace detail {
inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& s, std::size_t line, const char* what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(line, std::string("bad ") + what + " '" + s + "'");
  }
}
}  // namespace detail

/// Reads the track CSV (`id,timestamp_iso8601,lon_deg,lat_deg[,source_id]`). Reports are
/// grouped by id and time-sorted; exact duplicate rows are dropped, conflicting rows with
/// the same timestamp are a data error. Ids with fewer than three reports are skipped and
/// listed in `dropped` when given. Tracks come back ordered by id.
inline std::vector<Track> parse_tracks(std::istream& in, std::vector<std::string>* dropped = nullptr) {
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  std::map<std::string, std::vector<std::pair<TrackReport, std::size_t>>> groups;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty()) continue;
    auto cols = detail::split_csv(line);
    for (auto& c : cols) c = detail::trim(c);
    if (!have_header) {
      if (cols.size() < 4 || cols[0] != "id" || cols[1] != "timestamp_iso8601" || cols[2] != "lon_deg" ||
          cols[3] != "lat_deg")
        throw ParseError(lineno, "expected header id,timestamp_iso8601,lon_deg,lat_deg");
      have_header = true;
      continue;
    }
    if (cols.size() != 4 && cols.size() != 5) throw ParseError(lineno, "expected 4 or 5 columns");
    if (cols[0].empty()) throw ParseError(lineno, "empty track id");
    const auto t = parse_iso8601(cols[1]);
    if (!t) throw ParseError(lineno, "bad timestamp '" + cols[1] + "'");
    const double lon = detail::parse_double(cols[2], lineno, "longitude");
    const double lat = detail::parse_double(cols[3], lineno, "latitude");
    if (!(lon >= -180.0 && lon <= 360.0)) throw ParseError(lineno, "longitude out of range");
    if (!(lat > -90.0 && lat < 90.0)) throw ParseError(lineno, "latitude out of range");
    TrackReport r{*t, GeoPoint::from_degrees(lon, lat), cols.size() == 5 ? cols[4] : std::string{}};
    groups[cols[0]].emplace_back(std::move(r), lineno);
  }
  if (!have_header) return {};

  std::vector<Track> out;
  for (auto& [id, rows] : groups) {
    std::stable_sort(rows.begin(), rows.end(),
                     [](const auto& a, const auto& b) { return a.first.time < b.first.time; });
    std::vector<TrackReport> reports;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i > 0 && rows[i].first.time == rows[i - 1].first.time) {
        if (rows[i].first.pos == rows[i - 1].first.pos) continue;
        throw DataError("track " + id + ": conflicting reports at " + format_iso8601(rows[i].first.time) +
                        " (lines " + std::to_string(rows[i - 1].second) + " and " +
                        std::to_string(rows[i].second) + ")");
      }
      reports.push_back(std::move(rows[i].first));
    }
    if (reports.size() < 3) {
      if (dropped) dropped->push_back(id);
      continue;
    }
    out.emplace_back(id, std::move(reports));
  }
  return out;
}

inline void write_tracks(std::ostream& os, const std::vector<Track>& tracks) {
  os << "id,timestamp_iso8601,lon_deg,lat_deg\n";
  char buf[64];
  for (const auto& t : tracks) {
    for (const auto& r : t.reports()) {
      std::snprintf(buf, sizeof buf, "%.8f,%.8f", r.pos.lon_deg(), r.pos.lat_deg());
      os << t.id() << ',' << format_iso8601(r.time) << ',' << buf << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Splits wherever the gap between consecutive reports exceeds `max_gap_hours`;
/// segments shorter than `min_reports` are dropped. Segment ids get a `#k` suffix when
/// the track is split.
inline std::vector<Track> segment_track(const Track& t, double max_gap_hours = 12.0,
                                        std::size_t min_reports = 10) {
  std::vector<std::vector<TrackReport>> pieces(1);
  const auto& rs = t.reports();
  for (std::size_t i = 0; i < rs.size(); ++i) {
    if (i > 0 && static_cast<double>(rs[i].time - rs[i - 1].time) / 3600.0 > max_gap_hours)
      pieces.emplace_back();
    pieces.back().push_back(rs[i]);
  }
  std::vector<Track> out;
  if (pieces.size() == 1) {
    if (rs.size() >= min_reports) out.push_back(t);
    return out;
  }
  for (std::size_t k = 0; k < pieces.size(); ++k) {
    if (pieces[k].size() < std::max<std::size_t>(min_reports, 3)) continue;
    out.emplace_back(t.id() + "#" + std::to_string(k), std::move(pieces[k]));
  }
  return out;
}

inline Kinematics empirical_kinematics(const Track& t, const EarthModel& earth = {}) {
  Kinematics k;
  const auto& rs = t.reports();
  const std::size_t n = rs.size() - 1;
  k.speed.reserve(n);
  k.heading.reserve(n);
  k.dt_hours.reserve(n);
  k.steps.reserve(n);
  for (std::size_t i = 1; i < rs.size(); ++i) {
    const double dt = static_cast<double>(rs[i].time - rs[i - 1].time) / 3600.0;
    if (!(dt > 0.0)) throw DataError("track " + t.id() + ": zero time step at report " + std::to_string(i));
    const Displacement d = step_displacement(rs[i - 1].pos, rs[i].pos, earth);
    k.steps.push_back(d);
    k.dt_hours.push_back(dt);
    k.speed.push_back(d.norm() / dt);
    k.heading.push_back((d.dx == 0.0 && d.dy == 0.0) ? 0.0 : wrap_angle(std::atan2(d.dy, d.dx)));
  }
  return k;
}

/// Residual of report i against a constant-velocity prediction that carries the
/// reference step forward over the step's duration.
inline Displacement prediction_residual(const Kinematics& k, std::size_t ref_step, std::size_t i) {
  const double scale = k.dt_hours[i - 1] / k.dt_hours[ref_step];
  return k.steps[i - 1] - scale * k.steps[ref_step];
}

/// Flags celestial corrections: a report whose constant-velocity prediction misses by
/// at least `threshold_km` in either component. The prediction carries forward the most
/// recent step that did not itself end in a candidate jump, so the step just after a
/// jump is not flagged again. Within one track-local civil day only the largest jump
/// survives.
inline FixSchedule detect_fixes(const Track& t, const Kinematics& k, const EarthModel& /*earth*/ = {},
                                double threshold_km = 7.0) {
  if (t.size() < 3) throw DataError("track " + t.id() + ": fix detection needs at least 3 reports");
  const double lon_deg = t.mean_lon_deg();
  struct Candidate {
    std::size_t index;
    Displacement jump;
  };
  std::map<std::int64_t, Candidate> best_per_day;
  std::size_t ref = 0;
  for (std::size_t i = 2; i < t.size(); ++i) {
    const Displacement r = prediction_residual(k, ref, i);
    const bool jump = std::abs(r.dx) >= threshold_km || std::abs(r.dy) >= threshold_km;
    if (!jump) {
      ref = i - 1;
      continue;
    }
    const std::int64_t day = local_day_index(t[i].time, lon_deg);
    auto it = best_per_day.find(day);
    if (it == best_per_day.end())
      best_per_day.emplace(day, Candidate{i, r});
    else if (r.norm() > it->second.jump.norm())
      it->second = Candidate{i, r};
  }
  FixSchedule fs;
  for (const auto& [day, c] : best_per_day) {
    fs.indices.push_back(c.index);
    fs.jumps.push_back(c.jump);
  }
  // Day keys ascend with time, so indices are already sorted.
  return fs;
}

/// q-quantile (nearest rank) of |latitudinal prediction residual| pooled over every
/// report that has a preceding step, using the plain previous-step predictor.
inline double threshold_from_quantile(const std::vector<Track>& tracks, double q = 0.8,
                                      const EarthModel& earth = {}) {
  std::vector<double> pool;
  for (const auto& t : tracks) {
    if (t.size() < 3) continue;
    const Kinematics k = empirical_kinematics(t, earth);
    for (std::size_t i = 2; i < t.size(); ++i) pool.push_back(std::abs(prediction_residual(k, i - 2, i).dy));
  }
  if (pool.empty()) throw DataError("threshold_from_quantile: no residuals to pool");
  return stats::quantile_nearest_rank(std::move(pool), q);
}

inline TrackClass classify_track(const Track& t, const Kinematics& k, const FixSchedule& fs,
                                 const ClassifyConfig& cfg = {}) {
  TrackClass c;
  auto& e = c.evidence;
  e.cadence_hours = t.cadence_hours();
  e.median_speed = k.size() ? stats::median(k.speed) : 0.0;
  std::vector<double> moves;
  std::size_t n_static = 0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    if (k.speed[i] < cfg.static_speed_kmh)
      ++n_static;
    else
      moves.push_back(k.steps[i].norm());
  }
  e.static_fraction = k.size() ? static_cast<double>(n_static) / static_cast<double>(k.size()) : 0.0;
  e.median_move_km = moves.empty() ? 0.0 : stats::median(moves);
  std::vector<double> jumps;
  for (const auto& j : fs.jumps) jumps.push_back(j.norm());
  e.median_jump_km = jumps.empty() ? 0.0 : stats::median(jumps);
  const double days = t.duration_days();
  e.fix_rate_per_day = days > 0.0 ? static_cast<double>(fs.size()) / days : 0.0;

  if (e.static_fraction >= cfg.static_fraction && e.median_move_km > cfg.static_jump_km)
    c.label = TrackLabel::STATIC_JUMP;
  else if (e.cadence_hours <= cfg.hq2_max_cadence_hours && e.fix_rate_per_day >= cfg.hq2_min_fix_rate &&
           e.fix_rate_per_day <= cfg.hq2_max_fix_rate)
    c.label = TrackLabel::HQ2;
  else if (e.cadence_hours > cfg.hq2_max_cadence_hours && e.cadence_hours <= cfg.lq4_max_cadence_hours &&
           e.fix_rate_per_day < cfg.lq4_max_fix_rate)
    c.label = TrackLabel::LQ4;
  else
    c.label = TrackLabel::OTHER;
  return c;
}

// ---------------------------------------------------------------------------
// Fix schedule export

inline nlohmann::json fixes_to_json(const std::vector<std::pair<std::string, FixSchedule>>& all) {
  auto arr = nlohmann::json::array();
  for (const auto& [id, fs] : all)
    for (std::size_t i = 0; i < fs.size(); ++i)
      arr.push_back({{"track_id", id}, {"report_index", fs.indices[i]}, {"jx_km", fs.jumps[i].dx},
                     {"jy_km", fs.jumps[i].dy}});
  return arr;
}

/// Inverse of fixes_to_json; schedules keyed by track id.
inline std::map<std::string, FixSchedule> fixes_from_json(const nlohmann::json& arr) {
  std::map<std::string, FixSchedule> out;
  if (!arr.is_array()) throw DataError("fix schedule JSON: expected an array");
  for (const auto& e : arr) {
    auto& fs = out[e.at("track_id").get<std::string>()];
    fs.indices.push_back(e.at("report_index").get<std::size_t>());
    fs.jumps.push_back({e.at("jx_km").get<double>(), e.at("jy_km").get<double>()});
  }
  for (auto& [id, fs] : out) {
    std::vector<std::size_t> order(fs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return fs.indices[a] < fs.indices[b]; });
    FixSchedule sorted;
    for (auto i : order) {
      sorted.indices.push_back(fs.indices[i]);
      sorted.jumps.push_back(fs.jumps[i]);
    }
    fs = std::move(sorted);
  }
  return out;
}

}  // namespace navunc
