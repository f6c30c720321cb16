// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "navunc/mcmc/diagnostics.hpp"
#include "navunc/ssm.hpp"
#include "navunc/stats.hpp"
#include "navunc/synth.hpp"

using namespace navunc;

namespace {

constexpr UtcSeconds kT0 = -2680992000;  // 1885-01-16T00:00:00Z

/// Eastward equatorial track at 10 km/h with 2-hour reports and one +15 km jump at report 4.
Track small_track() {
  std::vector<TrackReport> rs;
  GeoPoint p = GeoPoint::from_degrees(-30.0, 0.0);
  for (int i = 0; i < 7; ++i) {
    if (i > 0) p = advance(p, {i == 4 ? 35.0 : 20.0, i % 2 ? 1.0 : -1.0});
    rs.push_back({kT0 + i * 7200, p, ""});
  }
  return Track("small", std::move(rs));
}

FixSchedule small_fixes() {
  FixSchedule fs;
  fs.indices = {2, 4};
  fs.jumps = {{0.0, 0.0}, {15.0, 0.0}};
  return fs;
}

SsmParams some_params(std::size_t n_beta) {
  SsmParams p;
  p.mu_s = 10.0;
  p.alpha_s = 0.5;
  p.sigma_s = 1.0;
  p.sigma_theta = 0.1;
  p.tau_x = 30.0;
  p.tau_y = 25.0;
  p.tau_s = 0.2;
  p.tau_theta = 0.2;
  p.beta.assign(n_beta, 0.05);
  return p;
}

SsmLatents latents_from(const Kinematics& k) { return {k.speed, k.heading}; }

SynthConfig short_config(std::size_t steps = 150) {
  SynthConfig c;
  c.steps = steps;
  return c;
}

SsmConfig quick_fit() {
  SsmConfig c;
  c.sampler.warmup = 600;
  c.sampler.draws = 300;
  c.sampler.thin = 2;
  return c;
}

struct Fitted {
  SynthTrack truth;
  SsmFit fit;
};

/// One 300-step track at the generative scales, fitted with the default configuration.
const Fitted& recovery_fit() {
  static const Fitted f = [] {
    Rng rng = make_rng(1, "test/recovery");
    auto t = simulate_hq2(SynthConfig{}, "rec", rng);
    auto fit = fit_track(t.reported, t.injected);
    return Fitted{std::move(t), std::move(fit)};
  }();
  return f;
}

}  // namespace

TEST(SsmData, IntervalsAndMasks) {
  const auto t = small_track();
  const auto k = empirical_kinematics(t);
  const auto d = SsmData::build(t, k, small_fixes());
  EXPECT_EQ(d.T, 6u);
  ASSERT_EQ(d.n_beta(), 1u);
  // Every step uses the single interval's bias, including those before the first fix.
  for (std::size_t s = 0; s < d.T; ++s) EXPECT_EQ(d.beta_index[s], 0u);
  EXPECT_EQ(d.fix_step, (std::vector<char>{0, 1, 0, 1, 0, 0}));

  FixSchedule none;
  EXPECT_THROW(SsmData::build(t, k, none), DataError);
}

TEST(SsmData, BetaIntervalsAreHalfOpen) {
  std::vector<TrackReport> rs;
  GeoPoint p = GeoPoint::from_degrees(0.0, 10.0);
  for (int i = 0; i < 10; ++i) {
    if (i) p = advance(p, {20.0, 0.0});
    rs.push_back({kT0 + i * 7200, p, ""});
  }
  const Track t("iv", rs);
  FixSchedule fs;
  fs.indices = {3, 5, 8};
  fs.jumps.assign(3, {});
  const auto d = SsmData::build(t, empirical_kinematics(t), fs);
  ASSERT_EQ(d.n_beta(), 2u);
  // Step s ends at report s+1; beta_1 covers reports [3, 5) and everything earlier.
  const std::vector<std::size_t> expect{0, 0, 0, 0, 1, 1, 1, 1, 1};
  for (std::size_t s = 0; s < d.T; ++s) EXPECT_EQ(d.beta_index[s], expect[s]) << "step " << s;
}

TEST(SsmLogPosterior, TruncatedNormalTransition) {
  const auto t = small_track();
  const auto k = empirical_kinematics(t);
  const auto d = SsmData::build(t, k, small_fixes());
  SsmPriors pr;
  detail::SsmTerms terms(d, pr);
  auto p = some_params(d.n_beta());
  SsmLatents l = latents_from(k);
  l.s.assign(d.T, 10.0);
  const auto x = terms.layout().pack(p, l);
  EXPECT_NEAR(std::exp(terms.trans_s(x, 1)), 0.3989422804014327, 1e-15);
}

TEST(SsmLogPosterior, OneSigmaFixTerm) {
  const auto t = small_track();
  const auto k = empirical_kinematics(t);
  const auto d = SsmData::build(t, k, small_fixes());
  SsmPriors pr;
  detail::SsmTerms terms(d, pr);
  const auto p = some_params(d.n_beta());
  const auto x = terms.layout().pack(p, latents_from(k));
  const std::size_t r = d.fixes[1];
  const double sx = p.tau_x * d.coslat[r];
  const Displacement at{d.q[r].dx - sx, d.q[r].dy};
  const double y_term = -std::log(p.tau_y * std::sqrt(2.0 * kPi));
  EXPECT_NEAR(terms.fix_term(x, 1, at) - y_term, -0.5 - std::log(sx * std::sqrt(2.0 * kPi)), 1e-12);
}

TEST(SsmLogPosterior, ModeDominanceAtZeroNoise) {
  const auto t = small_track();
  const auto k = empirical_kinematics(t);
  const auto fs = small_fixes();
  auto p = some_params(1);
  p.beta = {0.0};
  p.tau_x = p.tau_y = 1e-3;
  p.tau_s = p.tau_theta = 1e-3;
  // Latents equal to the empirical kinematics reproduce every observation exactly.
  const SsmLatents exact = latents_from(k);
  const double best = log_posterior(p, exact, t, k, fs);
  ASSERT_TRUE(std::isfinite(best));
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    SsmLatents l = exact;
    const std::size_t i = static_cast<std::size_t>(trial) % l.s.size();
    if (trial % 2)
      l.s[i] *= std::exp(0.01 * n(rng));
    else
      l.theta[i] += 0.01 * n(rng);
    EXPECT_LT(log_posterior(p, l, t, k, fs), best);
  }
}

TEST(SsmLogPosterior, HeadingWrapInvariance) {
  const auto t = small_track();
  const auto k = empirical_kinematics(t);
  const auto d = SsmData::build(t, k, small_fixes());
  auto d2 = d;
  for (auto& h : d2.th_hat) h += 2.0 * kPi;
  const auto p = some_params(d.n_beta());
  SsmLatents l = latents_from(k);
  for (auto& h : l.theta) h += 0.05;
  EXPECT_NEAR(log_posterior(p, l, d), log_posterior(p, l, d2), 1e-12);
}

TEST(SsmLogPosterior, SupportViolationsAreMinusInfinity) {
  const auto t = small_track();
  const auto k = empirical_kinematics(t);
  const auto d = SsmData::build(t, k, small_fixes());
  const auto l = latents_from(k);
  auto check = [&](auto mutate) {
    auto p = some_params(d.n_beta());
    auto ll = l;
    mutate(p, ll);
    const double v = log_posterior(p, ll, d);
    EXPECT_FALSE(std::isnan(v));
    EXPECT_EQ(v, -std::numeric_limits<double>::infinity());
  };
  check([](SsmParams& p, SsmLatents&) { p.tau_x = -1.0; });
  check([](SsmParams& p, SsmLatents&) { p.tau_s = 0.0; });
  check([](SsmParams& p, SsmLatents&) { p.alpha_s = 1.0; });
  check([](SsmParams& p, SsmLatents&) { p.mu_s = -0.5; });
  check([](SsmParams& p, SsmLatents&) { p.sigma_theta = std::nan(""); });
  check([](SsmParams&, SsmLatents& l) { l.s[2] = -1.0; });
  check([](SsmParams&, SsmLatents& l) { l.theta[1] = std::numeric_limits<double>::infinity(); });

  auto p = some_params(d.n_beta());
  auto bad = l;
  bad.s.pop_back();
  EXPECT_THROW(log_posterior(p, bad, d), DataError);
  p.beta.clear();
  EXPECT_THROW(log_posterior(p, l, d), DataError);
}

TEST(SsmModel, GradientMatchesFiniteDifferences) {
  Rng rng = make_rng(2, "test/grad");
  const auto h = simulate_hq2(short_config(60), "g", rng);
  auto data = std::make_shared<const SsmData>(SsmData::build(h.reported, empirical_kinematics(h.reported), h.injected));
  auto pr = std::make_shared<const SsmPriors>();
  const auto [p0, l0] = initial_state(*data);
  SsmModel centred(data, pr);
  const auto x = centred.layout().pack(p0, l0);

  auto check = [](const auto& model, std::vector<double> y) {
    std::vector<double> g(y.size());
    const double lp = model.log_density_gradient(y, g);
    EXPECT_NEAR(lp, model.log_density(y), 1e-9 * std::abs(lp));
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double h = 1e-6 * std::max(1.0, std::abs(y[i]));
      auto a = y, b = y;
      a[i] += h;
      b[i] -= h;
      const double fd = (model.log_density(a) - model.log_density(b)) / (2.0 * h);
      EXPECT_NEAR(g[i], fd, 1e-4 * std::max(1.0, std::abs(fd))) << "coordinate " << i;
    }
  };
  check(centred, x);
  for (int mode = 1; mode < 4; ++mode) {
    SsmNcModel nc(data, pr, mode & 1, mode & 2);
    const auto y = nc.from_centered(x);
    const auto back = nc.to_centered(y);
    for (std::size_t i = 0; i < x.size(); ++i) ASSERT_NEAR(back[i], x[i], 1e-12);
    check(nc, y);
  }
}

TEST(SsmModel, NonCentredDensityDiffersByTheJacobianOnly) {
  Rng rng = make_rng(3, "test/nc");
  const auto h = simulate_hq2(short_config(40), "nc", rng);
  auto data = std::make_shared<const SsmData>(SsmData::build(h.reported, empirical_kinematics(h.reported), h.injected));
  auto pr = std::make_shared<const SsmPriors>();
  const auto [p0, l0] = initial_state(*data);
  SsmModel centred(data, pr);
  SsmNcModel nc(data, pr, true, true);
  const auto x = centred.layout().pack(p0, l0);
  const double T = static_cast<double>(data->T);
  const double jac =
      T * std::log(p0.sigma_s) - 0.5 * std::log(1.0 - p0.alpha_s * p0.alpha_s) + (T - 1.0) * std::log(p0.sigma_theta);
  EXPECT_NEAR(nc.log_density(nc.from_centered(x)) - centred.log_density(x), jac, 1e-8);
}

TEST(SsmModel, IncrementalDeltasMatchFullEvaluation) {
  Rng rng = make_rng(4, "test/incr");
  const auto h = simulate_hq2(short_config(80), "inc", rng);
  auto data = std::make_shared<const SsmData>(SsmData::build(h.reported, empirical_kinematics(h.reported), h.injected));
  auto pr = std::make_shared<const SsmPriors>();
  SsmModel m(data, pr);
  SsmConfig cfg;
  const auto [p0, l0] = initial_state(*data);
  auto x = m.layout().pack(p0, l0);
  m.reset(x);
  const auto moves = ssm_moves(*data, cfg);
  const auto space = ssm_space(*data, cfg);
  std::mt19937_64 r(3);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int it = 0; it < 1500; ++it) {
    const auto& mv = moves[static_cast<std::size_t>(it) % moves.size()];
    auto xp = x;
    for (auto c : mv.coords) {
      const auto& sup = space.coordinate(c).support;
      xp[c] = sup.constrain(sup.unconstrain(xp[c]) + 0.02 * n(r));
    }
    const double delta = m.log_density_delta(mv.coords, x, xp);
    ASSERT_NEAR(delta, m.log_density(xp) - m.log_density(x), 1e-8) << mv.name;
    m.commit(mv.coords, xp);
    x = xp;
  }
  EXPECT_NEAR(m.cached_total(), m.log_density(x), 1e-8);
}

TEST(SsmInit, MasksFixesAndStaysInSupport) {
  Rng rng = make_rng(5, "test/init");
  const auto h = simulate_hq2(short_config(), "i", rng);
  const auto k = empirical_kinematics(h.reported);
  const auto d = SsmData::build(h.reported, k, h.injected);
  const auto [p, l] = initial_state(d);
  ASSERT_EQ(l.s.size(), d.T);
  for (double s : l.s) EXPECT_GT(s, 0.0);
  // Smoothed speeds ignore the fix steps, whose empirical speed includes the jump.
  for (std::size_t t = 0; t < d.T; ++t)
    if (d.fix_step[t]) {
      EXPECT_LT(std::abs(l.s[t] - p.mu_s), 5.0) << "step " << t;
    }
  EXPECT_GT(p.alpha_s, 0.0);
  EXPECT_LT(p.alpha_s, 1.0);
  EXPECT_TRUE(std::isfinite(log_posterior(p, l, d)));
}

TEST(PositionUncertainty, DegenerateDrawsGiveZero) {
  const auto t = small_track();
  const auto q = cumulative_displacements(t.positions());
  const auto u = uncertainty_from_draws(t, 10, [&](std::size_t, std::size_t r) { return q[r]; });
  for (const auto& r : u.km) {
    EXPECT_NEAR(r.std_x, 0.0, 1e-9);
    EXPECT_NEAR(r.bias_y, 0.0, 1e-9);
    EXPECT_NEAR(r.rmse_x, 0.0, 1e-9);
  }
}

TEST(PositionUncertainty, GaussianNoiseGivesRandomComponent) {
  const auto t = small_track();
  const auto q = cumulative_displacements(t.positions());
  const std::size_t n = 20000;
  std::mt19937_64 rng(9);
  std::normal_distribution<double> noise(0.0, 20.0);
  std::vector<std::vector<Displacement>> draws(n, std::vector<Displacement>(t.size()));
  for (auto& d : draws)
    for (std::size_t r = 0; r < t.size(); ++r) d[r] = q[r] + Displacement{noise(rng), noise(rng)};
  const auto u = uncertainty_from_draws(t, n, [&](std::size_t i, std::size_t r) { return draws[i][r]; });
  for (const auto& r : u.km) {
    // Monte-Carlo sd of the sd is 20/sqrt(2n) = 0.1 km; sd of the mean is 0.14 km.
    EXPECT_NEAR(r.std_x, 20.0, 0.5);
    EXPECT_NEAR(r.std_y, 20.0, 0.5);
    EXPECT_LT(r.bias_x, 0.6);
    EXPECT_LT(r.bias_y, 0.6);
  }
}

TEST(PositionUncertainty, ConstantOffsetIsSystematic) {
  const auto t = small_track();  // on the equator, so degrees use 111.19 km in both axes
  const auto q = cumulative_displacements(t.positions());
  const auto u = uncertainty_from_draws(t, 50, [&](std::size_t, std::size_t r) { return q[r] + Displacement{18.0, 0.0}; });
  for (std::size_t r = 0; r < t.size(); ++r) {
    EXPECT_NEAR(u.km[r].bias_x, 18.0, 1e-9);
    EXPECT_NEAR(u.km[r].std_x, 0.0, 1e-9);
    EXPECT_NEAR(u.deg[r].bias_x, 18.0 / 111.19 / std::cos(t[r].pos.lat), 1e-12);
  }
  EXPECT_NEAR(u.deg[0].bias_x, 0.16188506160625957, 1e-12);
}

TEST(PositionUncertaintyProperty, BiasVarianceIdentity) {
  std::vector<TrackReport> rs;
  GeoPoint p = GeoPoint::from_degrees(10.0, 48.0);
  for (int i = 0; i < 30; ++i) {
    if (i) p = advance(p, {15.0, -7.0});
    rs.push_back({kT0 + i * 7200, p, ""});
  }
  const Track t("bv", rs);
  const auto q = cumulative_displacements(t.positions());
  std::mt19937_64 rng(10);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::vector<Displacement>> draws(777, std::vector<Displacement>(t.size()));
  for (auto& d : draws)
    for (std::size_t r = 0; r < t.size(); ++r)
      d[r] = q[r] + Displacement{3.0 + 40.0 * n(rng), -2.0 * static_cast<double>(r) + 1e3 * n(rng)};
  const auto u = uncertainty_from_draws(t, draws.size(), [&](std::size_t i, std::size_t r) { return draws[i][r]; });
  for (const auto& r : u.km) {
    EXPECT_NEAR(r.rmse_x * r.rmse_x, r.std_x * r.std_x + r.bias_x * r.bias_x, 1e-9 * std::max(1.0, r.rmse_x * r.rmse_x));
    EXPECT_NEAR(r.rmse_y * r.rmse_y, r.std_y * r.std_y + r.bias_y * r.bias_y, 1e-9 * std::max(1.0, r.rmse_y * r.rmse_y));
  }
}

TEST(PosteriorPredictive, ZeroNoiseDrawReproducesLatentPath) {
  Rng rng = make_rng(6, "test/ppc0");
  const auto h = simulate_hq2(short_config(60), "z", rng);
  auto data = std::make_shared<const SsmData>(SsmData::build(h.reported, empirical_kinematics(h.reported), h.injected));
  auto pr = std::make_shared<const SsmPriors>();
  SsmModel m(data, pr);
  auto [p, l] = initial_state(*data);
  p.tau_x = p.tau_y = p.tau_s = p.tau_theta = 0.0;
  std::fill(p.beta.begin(), p.beta.end(), 0.0);
  auto x = m.layout().pack(p, l);
  auto names = ssm_coordinate_names(*data);
  auto extra = m.generated_names();
  names.insert(names.end(), extra.begin(), extra.end());
  mcmc::PosteriorSamples s(names);
  auto g = m.generated(x);
  x.insert(x.end(), g.begin(), g.end());
  s.add_draw(0, 0, x);
  const auto rep = posterior_predictive(s, h.reported, h.injected, 3, 1);
  ASSERT_EQ(rep.q.size(), 3u);
  for (const auto& q : rep.q)
    for (std::size_t r = 0; r < q.size(); ++r) {
      EXPECT_NEAR(q[r].dx, s.at(0, s.index_of("px[" + std::to_string(r) + "]")), 1e-9);
      EXPECT_NEAR(q[r].dy, s.at(0, s.index_of("py[" + std::to_string(r) + "]")), 1e-9);
    }
  ASSERT_EQ(rep.tracks.size(), 3u);
  EXPECT_EQ(rep.tracks[0].size(), h.reported.size());
  for (std::size_t r = 0; r < h.reported.size(); ++r) EXPECT_EQ(rep.tracks[0][r].time, h.reported[r].time);
}

TEST(PosteriorPredictive, FixResidualSpreadMatchesCelestialScale) {
  Rng rng = make_rng(7, "test/ppc1");
  const auto h = simulate_hq2(short_config(60), "f", rng);
  auto data = std::make_shared<const SsmData>(SsmData::build(h.reported, empirical_kinematics(h.reported), h.injected));
  auto pr = std::make_shared<const SsmPriors>();
  SsmModel m(data, pr);
  auto [p, l] = initial_state(*data);
  p.tau_x = 33.1;
  p.tau_y = 24.4;
  auto x = m.layout().pack(p, l);
  auto names = ssm_coordinate_names(*data);
  auto extra = m.generated_names();
  names.insert(names.end(), extra.begin(), extra.end());
  mcmc::PosteriorSamples s(names);
  auto g = m.generated(x);
  x.insert(x.end(), g.begin(), g.end());
  s.add_draw(0, 0, x);
  const auto rep = posterior_predictive(s, h.reported, h.injected, 4000, 2);
  for (auto r : data->fixes) {
    std::vector<double> ex, ey;
    for (const auto& q : rep.q) {
      ex.push_back(q[r].dx - s.at(0, s.index_of("px[" + std::to_string(r) + "]")));
      ey.push_back(q[r].dy - s.at(0, s.index_of("py[" + std::to_string(r) + "]")));
    }
    // Monte-Carlo sd of a 4000-sample sd is about 1.1%.
    EXPECT_NEAR(std::sqrt(stats::variance(ex)), 33.1 * data->coslat[r], 0.05 * 33.1 * data->coslat[r]);
    EXPECT_NEAR(std::sqrt(stats::variance(ey)), 24.4, 0.05 * 24.4);
  }
}

TEST(PosteriorPredictive, SeededAndRequiresDraws) {
  const auto& f = recovery_fit();
  const auto a = posterior_predictive(f.fit.samples, f.truth.reported, f.truth.injected, 5, 11);
  const auto b = posterior_predictive(f.fit.samples, f.truth.reported, f.truth.injected, 5, 11);
  EXPECT_EQ(a.source_draw, b.source_draw);
  EXPECT_EQ(a.q[4][100], b.q[4][100]);
  mcmc::PosteriorSamples empty(f.fit.samples.names());
  EXPECT_THROW(posterior_predictive(empty, f.truth.reported, f.truth.injected, 5, 11), DataError);
}

TEST(SsmFit, GenerativeRecoveryAtDefaultScales) {
  const auto& f = recovery_fit();
  const auto& s = f.fit.samples;
  const std::pair<const char*, double> truth[] = {{"tau_x", f.truth.params.tau_x},
                                                   {"tau_y", f.truth.params.tau_y},
                                                   {"tau_s", f.truth.params.tau_s},
                                                   {"tau_theta", f.truth.params.tau_theta}};
  const auto dg = mcmc::diagnostics(s);
  for (const auto& [name, v] : truth) {
    const auto c = s.column(name);
    const double q05 = stats::quantile(c, 0.05), q95 = stats::quantile(c, 0.95), med = stats::median(c);
    EXPECT_LE(q05, v) << name;
    EXPECT_GE(q95, v) << name;
    EXPECT_NEAR(med, v, 0.4 * v) << name;
    EXPECT_LT(dg.rhat[s.index_of(name)], 1.1) << name;
  }
}

TEST(SsmFit, LatentSpeedsArePositive) {
  const auto& s = recovery_fit().fit.samples;
  for (std::size_t t = 0; t < recovery_fit().fit.data.T; ++t)
    for (double v : s.column("s[" + std::to_string(t + 1) + "]")) ASSERT_GT(v, 0.0);
}

TEST(SsmFit, FixPositionsLieInTheSmootherBand) {
  const auto& f = recovery_fit();
  const auto u = position_uncertainty(f.fit.samples, f.truth.reported);
  const auto& d = f.fit.data;
  for (std::size_t k = 0; k < d.fixes.size(); ++k) {
    const std::size_t r = d.fixes[k];
    const Displacement reckoned = d.q[r] - f.truth.injected.jumps[k];
    const double lox = std::min(reckoned.dx, d.q[r].dx) - 3 * u.km[r].std_x;
    const double hix = std::max(reckoned.dx, d.q[r].dx) + 3 * u.km[r].std_x;
    const double loy = std::min(reckoned.dy, d.q[r].dy) - 3 * u.km[r].std_y;
    const double hiy = std::max(reckoned.dy, d.q[r].dy) + 3 * u.km[r].std_y;
    EXPECT_GE(u.mean[r].dx, lox) << "fix " << r;
    EXPECT_LE(u.mean[r].dx, hix) << "fix " << r;
    EXPECT_GE(u.mean[r].dy, loy) << "fix " << r;
    EXPECT_LE(u.mean[r].dy, hiy) << "fix " << r;
  }
}

TEST(SsmFit, BiasVarianceIdentityOnFittedTrack) {
  const auto& f = recovery_fit();
  const auto u = position_uncertainty(f.fit.samples, f.truth.reported);
  ASSERT_EQ(u.km.size(), f.truth.reported.size());
  for (const auto& r : u.km) {
    EXPECT_NEAR(r.rmse_x * r.rmse_x, r.std_x * r.std_x + r.bias_x * r.bias_x, 1e-9 * std::max(1.0, r.rmse_x * r.rmse_x));
    EXPECT_NEAR(r.rmse_y * r.rmse_y, r.std_y * r.std_y + r.bias_y * r.bias_y, 1e-9 * std::max(1.0, r.rmse_y * r.rmse_y));
  }
  // Reported positions at the origin are the reference, so report 0 carries no uncertainty.
  EXPECT_EQ(u.km[0].rmse_x, 0.0);
}

TEST(SsmFit, LaterFixesPullEarlierPositions) {
  // Same track twice; in the second, the reports from one fix onward sit 30 km further east.
  Rng rng = make_rng(8, "test/smooth");
  auto cfg = short_config();
  const auto h = simulate_hq2(cfg, "sm", rng);
  ASSERT_GE(h.injected.size(), 4u);
  const std::size_t r = h.injected.indices[h.injected.size() / 2];
  std::vector<TrackReport> rs = h.reported.reports();
  for (std::size_t i = r; i < rs.size(); ++i) rs[i].pos = advance(rs[i].pos, {30.0, 0.0});
  const Track shifted("sm", rs);
  FixSchedule fs = h.injected;
  for (std::size_t k = 0; k < fs.size(); ++k)
    if (fs.indices[k] == r) fs.jumps[k].dx += 30.0;

  const auto base = fit_track(h.reported, h.injected, quick_fit());
  const auto moved = fit_track(shifted, fs, quick_fit());
  const auto ub = position_uncertainty(base.samples, h.reported);
  const auto um = position_uncertainty(moved.samples, shifted);
  const double shift = um.mean[r - 1].dx - ub.mean[r - 1].dx;
  EXPECT_GE(shift, 5.0);
  EXPECT_LT(shift, 30.0);
}

TEST(SsmFit, LowNoiseTrackIsRecovered) {
  // Exactly zero noise makes the posterior of the noise scales improper at 0; the fixture
  // uses 1% of the generative noise scales (fix noise about 0.3 km).
  SynthConfig cfg = short_config(100);
  for (double* v : {&cfg.truth.tau_x, &cfg.truth.tau_y, &cfg.truth.tau_s, &cfg.truth.tau_theta, &cfg.truth.beta_sd})
    *v *= 0.01;
  Rng rng = make_rng(9, "test/lownoise");
  const auto h = simulate_hq2(cfg, "ln", rng);
  const auto fit = fit_track(h.reported, h.injected, quick_fit());
  const auto mean = posterior_mean_positions(fit.samples, h.reported);
  const auto truth = cumulative_displacements(h.true_positions);
  const auto est = cumulative_displacements(mean);
  for (std::size_t r = 0; r < truth.size(); ++r) EXPECT_LT((est[r] - truth[r]).norm(), 1.5) << "report " << r;
}

TEST(SsmFitProperty, LongitudeRotationLeavesTheLikelihoodInputsUnchanged) {
  Rng rng = make_rng(10, "test/rotate");
  const auto h = simulate_hq2(short_config(100), "rot", rng);
  std::vector<TrackReport> rs = h.reported.reports();
  for (auto& r : rs) r.pos = GeoPoint::from_degrees(r.pos.lon_deg() + 137.5, r.pos.lat_deg());
  const Track rotated("rot", rs);
  const auto a = SsmData::build(h.reported, empirical_kinematics(h.reported), h.injected);
  const auto b = SsmData::build(rotated, empirical_kinematics(rotated), h.injected);
  for (std::size_t t = 0; t < a.T; ++t) {
    EXPECT_NEAR(a.s_hat[t], b.s_hat[t], 1e-9);
    EXPECT_NEAR(wrap_angle(a.th_hat[t] - b.th_hat[t]), 0.0, 1e-9);
  }
  for (std::size_t r = 0; r <= a.T; ++r) {
    EXPECT_NEAR((a.q[r] - b.q[r]).norm(), 0.0, 1e-9);
    EXPECT_NEAR(a.coslat[r], b.coslat[r], 1e-12);
  }
  const auto [p, l] = initial_state(a);
  EXPECT_NEAR(log_posterior(p, l, a), log_posterior(p, l, b), 1e-7);
}

TEST(SsmFitProperty, LongitudeRotationEquivariance) {
  Rng rng = make_rng(10, "test/rotate");
  const auto h = simulate_hq2(short_config(), "rot", rng);
  const double shift_deg = 37.5;
  std::vector<TrackReport> rs = h.reported.reports();
  for (auto& r : rs) r.pos = GeoPoint::from_degrees(r.pos.lon_deg() + shift_deg, r.pos.lat_deg());
  const Track rotated("rot", rs);
  const auto a = fit_track(h.reported, h.injected);
  const auto b = fit_track(rotated, h.injected);
  const auto da = mcmc::diagnostics(a.samples), db = mcmc::diagnostics(b.samples);
  // Two runs on the same posterior differ by Monte-Carlo error only; the tolerance is four
  // combined standard errors of the mean.
  auto mcse2 = [](const mcmc::PosteriorSamples& s, const mcmc::Diagnostics& d, std::size_t col) {
    return stats::variance(s.column(col)) / d.ess[col];
  };
  for (const char* name : {"tau_x", "tau_y", "tau_s", "tau_theta"}) {
    const std::size_t c = a.samples.index_of(name);
    const double tol = 4.0 * std::sqrt(mcse2(a.samples, da, c) + mcse2(b.samples, db, c));
    EXPECT_NEAR(stats::mean(a.samples.column(c)), stats::mean(b.samples.column(c)), tol) << name;
  }
  const auto pa = posterior_mean_positions(a.samples, h.reported);
  const auto pb = posterior_mean_positions(b.samples, rotated);
  for (std::size_t r = 0; r < pa.size(); r += 10) {
    const std::size_t cx = a.samples.index_of("px[" + std::to_string(r) + "]");
    const std::size_t cy = a.samples.index_of("py[" + std::to_string(r) + "]");
    const double kx = kKmPerDegreeReporting * std::cos(pa[r].lat), ky = kKmPerDegreeReporting;
    const double tx = 4.0 * std::sqrt(mcse2(a.samples, da, cx) + mcse2(b.samples, db, cx)) / kx + 1e-9;
    const double ty = 4.0 * std::sqrt(mcse2(a.samples, da, cy) + mcse2(b.samples, db, cy)) / ky + 1e-9;
    EXPECT_NEAR(wrap_angle(pb[r].lon - pa[r].lon - shift_deg * kDegToRad) * kRadToDeg, 0.0, tx) << r;
    EXPECT_NEAR(pb[r].lat_deg(), pa[r].lat_deg(), ty) << r;
  }
}

TEST(SsmFit, RandomWalkKernelRunsAndNamesColumns) {
  Rng rng = make_rng(11, "test/rw");
  const auto h = simulate_hq2(short_config(40), "rw", rng);
  SsmConfig cfg;
  cfg.kernel = SsmKernel::random_walk;
  cfg.sampler.warmup = 200;
  cfg.sampler.draws = 100;
  cfg.sampler.thin = 1;
  const auto fit = fit_track(h.reported, h.injected, cfg);
  EXPECT_EQ(fit.samples.n_draws(), 400u);
  EXPECT_TRUE(fit.samples.has("px[40]"));
  EXPECT_TRUE(fit.samples.has("theta[40]"));
}

TEST(SsmFit, NoFixesIsADataErrorNamingTheTrack) {
  const auto t = small_track();
  try {
    fit_track(t, FixSchedule{});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("small"), std::string::npos);
  }
}
