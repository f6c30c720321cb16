// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "navunc/synth.hpp"
#include "navunc/tracks.hpp"

using namespace navunc;

namespace {

constexpr UtcSeconds kStart = -2680992000;  // 1885-01-16T00:00:00Z (calendar.timegm)

/// Straight-line track: constant displacement per step from (lon0, lat0).
Track straight_track(const std::string& id, std::size_t n, double hours, Displacement step, double lon0 = -40.0,
                     double lat0 = 30.0, UtcSeconds start = kStart) {
  std::vector<TrackReport> rs;
  GeoPoint p = GeoPoint::from_degrees(lon0, lat0);
  for (std::size_t i = 0; i < n; ++i) {
    rs.push_back({start + static_cast<UtcSeconds>(i * hours * 3600), p, ""});
    p = advance(p, step);
  }
  return Track(id, rs);
}

}  // namespace

TEST(Time, Iso8601RoundTrip) {
  const auto t = parse_iso8601("1885-01-16T00:00:00Z");
  ASSERT_TRUE(t);
  EXPECT_EQ(*t, kStart);
  EXPECT_EQ(format_iso8601(*t), "1885-01-16T00:00:00Z");
  EXPECT_EQ(*parse_iso8601("1885-01-16 02:30"), kStart + 9000);
  EXPECT_FALSE(parse_iso8601("1885-02-30T00:00:00Z"));
  EXPECT_FALSE(parse_iso8601("1885-01-16T00:00:00+05:00"));
  EXPECT_EQ(utc_month(kStart), 1u);
}

TEST(ParseTracks, HeaderOnlyIsEmpty) {
  std::istringstream in("id,timestamp_iso8601,lon_deg,lat_deg\n");
  EXPECT_TRUE(parse_tracks(in).empty());
}

TEST(ParseTracks, SingleIdThreeRows) {
  std::istringstream in(
      "id,timestamp_iso8601,lon_deg,lat_deg\n"
      "A,1885-01-16T00:00:00Z,-40.00,30.00\n"
      "A,1885-01-16T02:00:00Z,-39.80,30.00\n"
      "A,1885-01-16T04:00:00Z,-39.60,30.01\n");
  const auto tracks = parse_tracks(in);
  ASSERT_EQ(tracks.size(), 1u);
  EXPECT_EQ(tracks[0].id(), "A");
  EXPECT_EQ(tracks[0].size(), 3u);
  EXPECT_DOUBLE_EQ(tracks[0].cadence_hours(), 2.0);
  EXPECT_NEAR(tracks[0][2].pos.lat_deg(), 30.01, 1e-12);
}

TEST(ParseTracks, InterleavedIdsAreGroupedAndSorted) {
  std::istringstream in(
      "id,timestamp_iso8601,lon_deg,lat_deg\n"
      "B,1885-01-16T04:00:00Z,10.2,-5\n"
      "A,1885-01-16T02:00:00Z,-39.8,30\n"
      "B,1885-01-16T00:00:00Z,10.0,-5\n"
      "A,1885-01-16T00:00:00Z,-40.0,30\n"
      "B,1885-01-16T02:00:00Z,10.1,-5\n"
      "A,1885-01-16T04:00:00Z,-39.6,30\n");
  const auto tracks = parse_tracks(in);
  ASSERT_EQ(tracks.size(), 2u);
  EXPECT_EQ(tracks[0].id(), "A");
  EXPECT_EQ(tracks[1].id(), "B");
  const double expected_a[] = {-40.0, -39.8, -39.6};
  const double expected_b[] = {10.0, 10.1, 10.2};
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(tracks[0][i].time, kStart + i * 7200);
    EXPECT_NEAR(tracks[0][i].pos.lon_deg(), expected_a[i], 1e-12);
    EXPECT_NEAR(tracks[1][i].pos.lon_deg(), expected_b[i], 1e-12);
  }
}

TEST(ParseTracks, MalformedRowReportsLine) {
  std::istringstream in(
      "id,timestamp_iso8601,lon_deg,lat_deg\n"
      "A,1885-01-16T00:00:00Z,-40.0,30\n"
      "A,1885-01-16T02:00:00Z,abc,30\n");
  try {
    parse_tracks(in);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(ParseTracks, ConflictingDuplicateTimestampIsDataError) {
  std::istringstream dup(
      "id,timestamp_iso8601,lon_deg,lat_deg\n"
      "A,1885-01-16T00:00:00Z,-40.0,30\n"
      "A,1885-01-16T00:00:00Z,-40.0,30\n"
      "A,1885-01-16T02:00:00Z,-39.8,30\n"
      "A,1885-01-16T04:00:00Z,-39.6,30\n");
  EXPECT_EQ(parse_tracks(dup).at(0).size(), 3u);
  std::istringstream conflict(
      "id,timestamp_iso8601,lon_deg,lat_deg\n"
      "A,1885-01-16T00:00:00Z,-40.0,30\n"
      "A,1885-01-16T00:00:00Z,-41.0,30\n"
      "A,1885-01-16T02:00:00Z,-39.8,30\n");
  EXPECT_THROW(parse_tracks(conflict), DataError);
}

TEST(ParseTracks, WriteReadRoundTripsToPrintedPrecision) {
  const auto t = straight_track("ship-1", 12, 2.0, {15.3, -4.1});
  std::stringstream ss;
  write_tracks(ss, {t});
  const auto back = parse_tracks(ss);
  ASSERT_EQ(back.size(), 1u);
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_EQ(back[0][i].time, t[i].time);
    EXPECT_NEAR(back[0][i].pos.lon_deg(), t[i].pos.lon_deg(), 5e-9);
    EXPECT_NEAR(back[0][i].pos.lat_deg(), t[i].pos.lat_deg(), 5e-9);
  }
}

TEST(SegmentTrack, NoGapsKeepsTrack) {
  const auto t = straight_track("A", 20, 2.0, {20, 0});
  const auto segs = segment_track(t);
  ASSERT_EQ(segs.size(), 1u);
  EXPECT_EQ(segs[0].size(), 20u);
  EXPECT_EQ(segs[0].id(), "A");
}

TEST(SegmentTrack, OneDayGapSplitsInTwo) {
  auto rs = straight_track("A", 30, 2.0, {20, 0}).reports();
  for (std::size_t i = 15; i < rs.size(); ++i) rs[i].time += 24 * 3600;
  const auto segs = segment_track(Track("A", rs));
  ASSERT_EQ(segs.size(), 2u);
  EXPECT_EQ(segs[0].size() + segs[1].size(), 30u);
  EXPECT_EQ(segs[0].reports().back().time, rs[14].time);
  EXPECT_EQ(segs[1].reports().front().time, rs[15].time);
}

TEST(SegmentTrack, GapAtThresholdDoesNotSplit) {
  auto rs = straight_track("A", 30, 2.0, {20, 0}).reports();
  for (std::size_t i = 15; i < rs.size(); ++i) rs[i].time += 10 * 3600;  // gap of exactly 12 h
  EXPECT_EQ(segment_track(Track("A", rs), 12.0).size(), 1u);
}

TEST(SegmentTrack, ShortPiecesDropped) {
  auto rs = straight_track("A", 30, 2.0, {20, 0}).reports();
  for (std::size_t i = 25; i < rs.size(); ++i) rs[i].time += 24 * 3600;
  const auto segs = segment_track(Track("A", rs));
  ASSERT_EQ(segs.size(), 1u);
  EXPECT_EQ(segs[0].size(), 25u);
}

TEST(Kinematics, StationaryPairHasZeroSpeedAndHeading) {
  std::vector<TrackReport> rs;
  const auto p = GeoPoint::from_degrees(0, 0);
  for (int i = 0; i < 3; ++i) rs.push_back({kStart + i * 7200, p, ""});
  const auto k = empirical_kinematics(Track("S", rs));
  EXPECT_EQ(k.speed[0], 0.0);
  EXPECT_EQ(k.heading[0], 0.0);
}

TEST(Kinematics, DueNorth) {
  const auto t = straight_track("N", 3, 2.0, {0, 22.24}, 0, 0);
  const auto k = empirical_kinematics(t);
  EXPECT_NEAR(k.speed[0], 11.12, 1e-9);
  EXPECT_NEAR(k.heading[0], kPi / 2, 1e-12);
  EXPECT_EQ(k.size(), 2u);
}

TEST(Kinematics, SyntheticFleetMedianSpeed) {
  SynthConfig cfg;
  cfg.truth.mu_s = 10.4;
  Rng rng(5);
  std::vector<double> speeds;
  for (int j = 0; j < 10; ++j) {
    const auto s = simulate_hq2(cfg, "hq2-" + std::to_string(j), rng);
    const auto k = empirical_kinematics(s.reported);
    speeds.insert(speeds.end(), k.speed.begin(), k.speed.end());
  }
  const double med = stats::median(speeds);
  EXPECT_GE(med, 6.0);
  EXPECT_LE(med, 15.0);
}

TEST(DetectFixes, LinearTrackHasNone) {
  const auto t = straight_track("L", 60, 2.0, {18, 7});
  EXPECT_TRUE(detect_fixes(t, empirical_kinematics(t)).empty());
}

TEST(DetectFixes, ShortTrackThrows) {
  const auto t = straight_track("L", 3, 2.0, {18, 7});
  EXPECT_NO_THROW(detect_fixes(t, empirical_kinematics(t)));
  EXPECT_THROW(detect_fixes(Track{}, Kinematics{}), DataError);
}

namespace {
/// Straight track at lon 0 with an offset applied from report `at` onward (a jump).
Track injected(const std::vector<std::pair<std::size_t, Displacement>>& jumps, std::size_t n = 48) {
  std::vector<TrackReport> rs;
  GeoPoint p = GeoPoint::from_degrees(0, 20);
  for (std::size_t i = 0; i < n; ++i) {
    Displacement step{20, 0};
    for (const auto& [at, d] : jumps)
      if (at == i) step = step + d;
    if (i > 0) p = advance(p, step);
    rs.push_back({kStart + static_cast<UtcSeconds>(i) * 7200, p, ""});
  }
  return Track("J", rs);
}
}  // namespace

TEST(DetectFixes, SingleMidnightJump) {
  // Report 24 is at 1885-01-18T00:00Z, local midnight at lon 0.
  const auto t = injected({{24, {30, 0}}});
  const auto fs = detect_fixes(t, empirical_kinematics(t));
  ASSERT_EQ(fs.size(), 1u);
  EXPECT_EQ(fs.indices[0], 24u);
  EXPECT_NEAR(fs.jumps[0].dx, 30.0, 1e-6);
  EXPECT_NEAR(fs.jumps[0].dy, 0.0, 1e-6);
}

TEST(DetectFixes, OnlyLargestJumpPerDay) {
  const auto t = injected({{20, {10, 0}}, {16, {0, -40}}});
  const auto fs = detect_fixes(t, empirical_kinematics(t));
  ASSERT_EQ(fs.size(), 1u);
  EXPECT_EQ(fs.indices[0], 16u);
  EXPECT_NEAR(fs.jumps[0].dy, -40.0, 1e-6);
}

TEST(DetectFixes, AtMostOnePerLocalDay) {
  SynthConfig cfg;
  Rng rng(17);
  for (int j = 0; j < 5; ++j) {
    const auto s = simulate_hq2(cfg, "t" + std::to_string(j), rng);
    const auto fs = detect_fixes(s.reported, empirical_kinematics(s.reported));
    const double lon = s.reported.mean_lon_deg();
    for (std::size_t i = 1; i < fs.size(); ++i)
      EXPECT_LT(local_day_index(s.reported[fs.indices[i - 1]].time, lon),
                local_day_index(s.reported[fs.indices[i]].time, lon));
  }
}

TEST(DetectFixes, NoiselessGenerativeTrackHasNoFixes) {
  SynthConfig cfg;
  cfg.truth.sigma_s = 0.0;
  cfg.truth.sigma_theta = 0.0;
  cfg.truth.tau_x = 0.0;
  cfg.truth.tau_y = 0.0;
  cfg.truth.tau_s = 0.0;
  cfg.truth.tau_theta = 0.0;
  cfg.truth.beta_sd = 0.0;
  Rng rng(3);
  for (int j = 0; j < 3; ++j) {
    const auto s = simulate_hq2(cfg, "q" + std::to_string(j), rng);
    EXPECT_TRUE(detect_fixes(s.reported, empirical_kinematics(s.reported)).empty());
  }
}

TEST(Threshold, ZeroResiduals) {
  const auto t = straight_track("L", 20, 2.0, {18, 7});
  EXPECT_NEAR(threshold_from_quantile({t}, 0.8), 0.0, 1e-9);
}

TEST(Threshold, NearestRankOnKnownResiduals) {
  // Northward steps alternate so that consecutive differences are 1, 2, ..., 100 km.
  std::vector<double> steps{0.0};
  for (int r = 1; r <= 100; ++r) steps.push_back(steps.back() + (r % 2 ? r : -r));
  std::vector<TrackReport> rs;
  GeoPoint p = GeoPoint::from_degrees(0, 0);
  for (std::size_t i = 0; i <= steps.size(); ++i) {
    rs.push_back({kStart + static_cast<UtcSeconds>(i) * 7200, p, ""});
    if (i < steps.size()) p = advance(p, {0, steps[i]});
  }
  EXPECT_NEAR(threshold_from_quantile({Track("R", rs)}, 0.8), 80.0, 1e-6);
}

TEST(Threshold, MonotoneInQuantile) {
  SynthConfig cfg;
  Rng rng(23);
  std::vector<Track> ts;
  for (int j = 0; j < 3; ++j) ts.push_back(simulate_hq2(cfg, "m" + std::to_string(j), rng).reported);
  double prev = -1.0;
  for (double q = 0.05; q <= 1.0; q += 0.05) {
    const double v = threshold_from_quantile(ts, q);
    EXPECT_GE(v, prev);
    prev = v;
  }
  EXPECT_THROW(threshold_from_quantile({}, 0.8), DataError);
}

TEST(Classify, GenerativeHq2) {
  SynthConfig cfg;
  cfg.fix_probability = 1.0;
  Rng rng(31);
  for (int j = 0; j < 5; ++j) {
    const auto s = simulate_hq2(cfg, "h" + std::to_string(j), rng);
    const auto k = empirical_kinematics(s.reported);
    EXPECT_EQ(classify_track(s.reported, k, detect_fixes(s.reported, k)).label, TrackLabel::HQ2);
  }
}

TEST(Classify, InterpolatedFourHourlyIsLq4) {
  SynthConfig cfg;
  Rng rng(37);
  const auto t = simulate_lq4(cfg, "l", rng);
  const auto k = empirical_kinematics(t);
  const auto c = classify_track(t, k, detect_fixes(t, k));
  EXPECT_EQ(c.label, TrackLabel::LQ4);
  EXPECT_NEAR(c.evidence.cadence_hours, 4.0, 1e-12);
}

TEST(Classify, StaticThenJumpTrack) {
  SynthConfig cfg;
  Rng rng(41);
  const auto t = simulate_static_jump(cfg, "s", rng);
  const auto k = empirical_kinematics(t);
  const auto c = classify_track(t, k, detect_fixes(t, k));
  EXPECT_EQ(c.label, TrackLabel::STATIC_JUMP);
  EXPECT_NEAR(c.evidence.median_move_km, 84.6, 1e-6);
}

TEST(ClassifyProperty, InvariantUnderLongitudeRotation) {
  SynthConfig cfg;
  Rng rng(43);
  std::vector<Track> ts;
  for (int j = 0; j < 4; ++j) ts.push_back(simulate_hq2(cfg, "r" + std::to_string(j), rng).reported);
  ts.push_back(simulate_lq4(cfg, "l", rng));
  ts.push_back(simulate_static_jump(cfg, "s", rng));
  for (const auto& t : ts) {
    const auto k = empirical_kinematics(t);
    const auto base = classify_track(t, k, detect_fixes(t, k)).label;
    for (double shift : {-97.0, 33.5, 151.0}) {
      std::vector<TrackReport> rs = t.reports();
      for (auto& r : rs) r.pos = GeoPoint::from_degrees(r.pos.lon_deg() + shift, r.pos.lat_deg());
      const Track rt(t.id(), rs);
      const auto rk = empirical_kinematics(rt);
      EXPECT_EQ(classify_track(rt, rk, detect_fixes(rt, rk)).label, base) << t.id() << " shift " << shift;
    }
  }
}

TEST(FixExport, JsonRoundTrip) {
  FixSchedule fs;
  fs.indices = {5, 17};
  fs.jumps = {{1.5, -2.0}, {30.25, 4.0}};
  const auto j = fixes_to_json({{"A", fs}});
  ASSERT_EQ(j.size(), 2u);
  EXPECT_EQ(j[1]["report_index"], 17);
  const auto back = fixes_from_json(j);
  EXPECT_EQ(back.at("A").indices, fs.indices);
  EXPECT_EQ(back.at("A").jumps, fs.jumps);
}
