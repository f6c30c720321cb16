// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "navunc/lincheck.hpp"
#include "navunc/mcmc/diagnostics.hpp"
#include "navunc/synth.hpp"

using namespace navunc;

namespace {

constexpr UtcSeconds kT0 = -2680992000;  // 1885-01-16T00:00:00Z

/// Equatorial track moving east 20 km per two-hour step.
Track eastward(std::size_t steps) {
  std::vector<TrackReport> rs;
  GeoPoint p = GeoPoint::from_degrees(-30, 0);
  for (std::size_t i = 0; i <= steps; ++i) {
    if (i) p = advance(p, {20.0, 0.0});
    rs.push_back({kT0 + static_cast<UtcSeconds>(i) * 7200, p, ""});
  }
  return Track("east", rs);
}

FixSchedule schedule(std::vector<std::size_t> idx) {
  FixSchedule fs;
  fs.indices = std::move(idx);
  for (std::size_t k = 0; k < fs.indices.size(); ++k) fs.jumps.push_back({1.0 + static_cast<double>(k), -2.0});
  return fs;
}

/// Records drawn from the linearized variance law itself.
std::vector<JumpRecord> law_records(std::size_t n, double tx, double ty, double ts, double th, double max_km,
                                    std::uint64_t seed) {
  Rng rng = make_rng(seed, "test/law");
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> d(0.0, max_km), lat(-0.6, 0.6);
  std::vector<JumpRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    JumpRecord r;
    r.track_id = "t" + std::to_string(i % 17);
    r.dx2 = std::pow(d(rng), 2);
    r.dy2 = std::pow(d(rng), 2);
    r.coslat = std::cos(lat(rng));
    const double vx = ts * ts * r.dx2 + th * th * r.dy2 + 2 * tx * tx * r.coslat * r.coslat;
    const double vy = ts * ts * r.dy2 + th * th * r.dx2 + 2 * ty * ty;
    r.jx = std::sqrt(vx) * z(rng);
    r.jy = std::sqrt(vy) * z(rng);
    out.push_back(r);
  }
  return out;
}

LincheckConfig quick_config() {
  LincheckConfig c;
  c.sampler.warmup = 500;
  c.sampler.draws = 500;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Segment statistics

TEST(SegmentStats, StraightEastwardSegment) {
  const auto t = eastward(14);
  const auto r = segment_stats(t, schedule({0, 11, 13}));
  ASSERT_EQ(r.size(), 2u);
  EXPECT_NEAR(r[0].dx2, 4000.0, 1e-6);
  EXPECT_NEAR(r[0].dy2, 0.0, 1e-12);
  EXPECT_EQ(r[0].jx, 2.0);
  EXPECT_EQ(r[0].jy, -2.0);
  EXPECT_NEAR(r[0].coslat, 1.0, 1e-12);
  EXPECT_EQ(r[0].track_id, "east");
  EXPECT_NEAR(r[1].dx2, 400.0, 1e-6);
}

TEST(SegmentStats, ConsecutiveFixesHaveNoDistance) {
  const auto r = segment_stats(eastward(8), schedule({3, 4}));
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].dx2, 0.0);
  EXPECT_EQ(r[0].dy2, 0.0);
}

TEST(SegmentStats, FewerThanTwoFixesGiveNothing) {
  EXPECT_TRUE(segment_stats(eastward(8), schedule({})).empty());
  EXPECT_TRUE(segment_stats(eastward(8), schedule({5})).empty());
  EXPECT_THROW(segment_stats(eastward(8), schedule({5, 3})), DataError);
}

TEST(SegmentStats, GenerativeJumpsFollowTheLinearizedVariance) {
  // Constant true speed and heading, no heading bias: only dead-reckoning and celestial
  // errors remain.
  SynthConfig sc;
  sc.truth.sigma_s = 0.0;
  sc.truth.sigma_theta = 0.0;
  sc.truth.beta_sd = 0.0;
  sc.fix_probability = 1.0;
  Rng rng = make_rng(11, "test/generative");
  double jx2 = 0, jy2 = 0, vx = 0, vy = 0;
  std::size_t n = 0;
  const auto& g = sc.truth;
  for (int k = 0; k < 150; ++k) {
    const auto s = simulate_hq2(sc, "g" + std::to_string(k), rng);
    for (const auto& r : segment_stats(s.reported, s.injected)) {
      jx2 += r.jx * r.jx;
      jy2 += r.jy * r.jy;
      vx += g.tau_s * g.tau_s * r.dx2 + g.tau_theta * g.tau_theta * r.dy2 + 2 * std::pow(g.tau_x * r.coslat, 2);
      vy += g.tau_s * g.tau_s * r.dy2 + g.tau_theta * g.tau_theta * r.dx2 + 2 * g.tau_y * g.tau_y;
      ++n;
    }
  }
  ASSERT_GT(n, 3000u);
  EXPECT_NEAR(jx2 / vx, 1.0, 0.10);
  EXPECT_NEAR(jy2 / vy, 1.0, 0.10);
}

// ---------------------------------------------------------------------------
// Binning

TEST(BinJumps, IdenticalRecordsShareOneBinWithZeroVariance) {
  std::vector<JumpRecord> rs(5, JumpRecord{"a", 3.0, -4.0, 900.0, 100.0, 0.9});
  const auto b = bin_jumps(rs);
  ASSERT_EQ(b.cells.size(), 1u);
  EXPECT_EQ(b.cells[0].n, 5u);
  EXPECT_EQ(b.cells[0].ix, 1);
  EXPECT_EQ(b.cells[0].iy, 0);
  EXPECT_EQ(b.cells[0].vx, 0.0);
  EXPECT_EQ(b.cells[0].vy, 0.0);
  EXPECT_DOUBLE_EQ(b.cells[0].coslat, 0.9);
}

TEST(BinJumps, TwoPointVariance) {
  const auto b = bin_jumps({{"a", 10.0, 0.0, 25.0, 25.0, 1.0}, {"b", -10.0, 0.0, 36.0, 16.0, 1.0}});
  ASSERT_EQ(b.retained().size(), 1u);
  EXPECT_DOUBLE_EQ(b.cells[0].vx, 200.0);
  EXPECT_DOUBLE_EQ(b.cells[0].dx2, 30.5);
  EXPECT_DOUBLE_EQ(b.cells[0].dy2, 20.5);
}

TEST(BinJumps, SingletonsAreKeptButNotRetained) {
  const auto b = bin_jumps({{"a", 1, 1, 0, 0, 1}, {"a", 2, 2, 0, 0, 1}, {"a", 3, 3, 2500, 0, 1}});
  EXPECT_EQ(b.cells.size(), 2u);
  EXPECT_EQ(b.retained().size(), 1u);
  EXPECT_EQ(b.total(), 3u);
}

TEST(BinJumps, MedianRegressor) {
  const std::vector<JumpRecord> rs{{"a", 0, 0, 1, 0, 1}, {"a", 0, 0, 4, 0, 1}, {"a", 0, 0, 100, 0, 0.5}};
  EXPECT_DOUBLE_EQ(bin_jumps(rs, 20, Regressor::median).cells[0].dx2, 4.0);
  EXPECT_DOUBLE_EQ(bin_jumps(rs, 20, Regressor::mean).cells[0].dx2, 35.0);
}

TEST(BinJumps, LargeFleetIsConserved) {
  SynthConfig sc;
  Rng rng = make_rng(12, "test/fleet");
  std::vector<JumpRecord> all;
  for (int k = 0; all.size() < 20694; ++k) {
    const auto s = simulate_hq2(sc, "f" + std::to_string(k), rng);
    const auto r = segment_stats(s.reported, s.injected);
    all.insert(all.end(), r.begin(), r.end());
  }
  const auto b = bin_jumps(all);
  EXPECT_EQ(b.total(), all.size());
  for (std::size_t i = 1; i < b.cells.size(); ++i)
    EXPECT_TRUE(std::pair(b.cells[i - 1].ix, b.cells[i - 1].iy) < std::pair(b.cells[i].ix, b.cells[i].iy));
  for (const auto& c : b.retained()) EXPECT_GE(c.n, 2u);
}

TEST(BinJumps, Validation) {
  EXPECT_THROW(bin_jumps({{"a", 1, 1, -1, 0, 1}}), DataError);
  EXPECT_THROW(bin_jumps({{"a", NAN, 1, 1, 0, 1}}), DataError);
  EXPECT_THROW(bin_jumps({}, 0.0), ConfigError);
  EXPECT_TRUE(bin_jumps({}).cells.empty());
}

// ---------------------------------------------------------------------------
// Linearized fit

TEST(LinearizedModel, GradientMatchesFiniteDifferences) {
  const auto bins = bin_jumps(law_records(600, 30, 25, 0.2, 0.1, 120, 1)).retained();
  detail::LinearizedModel m(bins);
  const std::vector<double> x{std::log(28.0), std::log(26.0), std::log(0.15), std::log(0.2)};
  std::vector<double> g(4);
  m.log_density_gradient(x, g);
  for (std::size_t i = 0; i < 4; ++i) {
    auto xp = x, xm = x;
    const double h = 1e-5;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (m.log_density(xp) - m.log_density(xm)) / (2 * h);
    EXPECT_NEAR(g[i], fd, 1e-5 * std::max(1.0, std::abs(fd))) << i;
  }
}

TEST(FitLinearized, PureCelestialJumpsRecoverTauY) {
  const auto bins = bin_jumps(law_records(3000, 33.0, 24.5, 0.0, 0.0, 55, 2));
  ASSERT_GE(bins.retained().size(), 3u);
  const auto s = fit_linearized(bins, quick_config());
  EXPECT_NEAR(stats::median(s.column("tau_y")), 24.5, 0.05 * 24.5);
  EXPECT_NEAR(stats::median(s.column("tau_x")), 33.0, 0.05 * 33.0);
}

TEST(FitLinearized, RecoversScalesFromTheVarianceLaw) {
  const auto s = fit_linearized(bin_jumps(law_records(6000, 31.0, 24.5, 0.15, 0.2, 220, 3)), quick_config());
  EXPECT_NEAR(stats::median(s.column("tau_x")), 31.0, 0.05 * 31.0);
  EXPECT_NEAR(stats::median(s.column("tau_y")), 24.5, 0.05 * 24.5);
  EXPECT_NEAR(stats::median(s.column("tau_s")), 0.15, 0.15 * 0.15);
  EXPECT_NEAR(stats::median(s.column("tau_theta")), 0.2, 0.15 * 0.2);
  const auto d = mcmc::diagnostics(s);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_LT(d.rhat[c], 1.05);
}

TEST(FitLinearized, DoublingJumpsDoublesCelestialScalesOnly) {
  const auto recs = law_records(4000, 30.0, 25.0, 0.2, 0.15, 200, 4);
  auto scaled = recs;
  for (auto& r : scaled) {
    r.jx *= 2;
    r.jy *= 2;
    r.dx2 *= 4;
    r.dy2 *= 4;
  }
  const auto a = fit_linearized(bin_jumps(recs, 20.0), quick_config());
  const auto b = fit_linearized(bin_jumps(scaled, 40.0), quick_config());
  const auto da = mcmc::diagnostics(a), db = mcmc::diagnostics(b);
  const std::vector<std::pair<const char*, double>> shift{
      {"log_tau_x", std::log(2.0)}, {"log_tau_y", std::log(2.0)}, {"log_tau_s", 0.0}, {"log_tau_theta", 0.0}};
  for (const auto& [name, d] : shift) {
    const auto ia = a.index_of(name), ib = b.index_of(name);
    const auto ca = a.column(name), cb = b.column(name);
    const double tol = 4.0 * std::sqrt(stats::variance(ca) / da.ess[ia] + stats::variance(cb) / db.ess[ib]);
    EXPECT_NEAR(stats::mean(cb) - stats::mean(ca), d, tol) << name;
  }
}

TEST(FitLinearized, DeterministicUnderSeed) {
  const auto bins = bin_jumps(law_records(800, 30, 25, 0.2, 0.1, 150, 5));
  auto cfg = quick_config();
  cfg.sampler.draws = 100;
  const auto a = fit_linearized(bins, cfg), b = fit_linearized(bins, cfg);
  EXPECT_EQ(a.column("tau_x"), b.column("tau_x"));
  EXPECT_EQ(a.column("tau_theta"), b.column("tau_theta"));
  cfg.sampler.seed = 2;
  EXPECT_NE(fit_linearized(bins, cfg).column("tau_x"), a.column("tau_x"));
}

TEST(FitLinearized, Errors) {
  std::vector<JumpRecord> flat;
  for (int k = 0; k < 3; ++k)
    for (int i = 0; i < 4; ++i) flat.push_back({"a", 5.0, 5.0, std::pow(30.0 * k, 2), 0.0, 1.0});
  EXPECT_THROW(fit_linearized(bin_jumps(flat)), InferenceError);
  flat.resize(8);
  EXPECT_THROW(fit_linearized(bin_jumps(flat)), DataError);
}

TEST(LincheckSummary, HasQuantilesAndRhat) {
  const auto s = fit_linearized(bin_jumps(law_records(800, 30, 25, 0.2, 0.1, 150, 6)), quick_config());
  const auto j = lincheck_summary_json(s);
  for (const char* k : {"tau_x", "tau_y", "tau_s", "tau_theta"}) {
    ASSERT_TRUE(j.contains(k));
    EXPECT_LE(j[k]["q05"].get<double>(), j[k]["q50"].get<double>());
    EXPECT_LE(j[k]["q50"].get<double>(), j[k]["q95"].get<double>());
    EXPECT_TRUE(j[k].contains("rhat"));
  }
}

// ---------------------------------------------------------------------------
// CSV

TEST(JumpCsv, RoundTripIsExact) {
  const auto recs = law_records(50, 30, 25, 0.2, 0.1, 150, 7);
  std::stringstream ss;
  write_jump_csv(ss, recs);
  const auto back = read_jump_csv(ss);
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].track_id, recs[i].track_id);
    EXPECT_EQ(back[i].jx, recs[i].jx);
    EXPECT_EQ(back[i].jy, recs[i].jy);
    EXPECT_EQ(back[i].dx2, recs[i].dx2);
    EXPECT_EQ(back[i].dy2, recs[i].dy2);
    EXPECT_EQ(back[i].coslat, recs[i].coslat);
  }
}

TEST(JumpCsv, BadRowsAreParseErrors) {
  std::istringstream short_row("track_id,jx_km,jy_km,dx2_km2,dy2_km2,coslat\na,1,2,3\n");
  EXPECT_THROW(read_jump_csv(short_row), ParseError);
  std::istringstream bad("a,1,2,x,4,1\n");
  EXPECT_THROW(read_jump_csv(bad), ParseError);
  std::istringstream neg("a,1,2,-3,4,1\n");
  EXPECT_THROW(read_jump_csv(neg), ParseError);
}
