// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <future>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "navunc/error.hpp"
#include "navunc/mcmc.hpp"
#include "navunc/stats.hpp"

namespace navunc {

/// The four pooled uncertainty parameters.
enum class TauFamily { tau_x = 0, tau_y = 1, tau_s = 2, tau_theta = 3 };

inline constexpr std::array<TauFamily, 4> kTauFamilies{TauFamily::tau_x, TauFamily::tau_y, TauFamily::tau_s,
                                                       TauFamily::tau_theta};

inline const char* family_name(TauFamily f) {
  switch (f) {
    case TauFamily::tau_x: return "tau_x";
    case TauFamily::tau_y: return "tau_y";
    case TauFamily::tau_s: return "tau_s";
    case TauFamily::tau_theta: return "tau_theta";
  }
  return "?";
}

/// Posterior draws of one track's uncertainty parameters.
struct TrackTauDraws {
  std::string id;
  std::array<std::vector<double>, 4> tau;  // indexed by TauFamily

  const std::vector<double>& operator[](TauFamily f) const { return tau[static_cast<std::size_t>(f)]; }
  std::vector<double>& operator[](TauFamily f) { return tau[static_cast<std::size_t>(f)]; }
};

using PooledInput = std::vector<TrackTauDraws>;

/// Pulls tau_x/tau_y/tau_s/tau_theta columns out of a per-track posterior.
inline TrackTauDraws tau_draws(const std::string& id, const mcmc::PosteriorSamples& s) {
  TrackTauDraws t{id, {}};
  for (auto f : kTauFamilies) t[f] = s.column(family_name(f));
  return t;
}

struct HierPriors {
  std::array<double, 4> prior_median{30.0, 25.0, 0.2, 0.2};  // per TauFamily
  double log_mu_sd = 1.0;
  double gamma_scale = 1.0;  // half-normal
  double eta_scale = 1.0;    // half-normal
};

struct HierConfig {
  HierPriors priors;
  mcmc::SamplerConfig sampler = [] {
    mcmc::SamplerConfig c;
    c.chains = 4;
    c.warmup = 1000;
    c.draws = 1000;
    c.stream = "hier";
    c.init_jitter = 0.5;
    return c;
  }();
  mcmc::NutsConfig nuts;
  std::size_t min_draws_per_track = 100;
  std::size_t max_draws_per_track = 500;  // evenly thinned above this
  // Lower bound on the log-scale spreads, entering as sqrt(spread^2 + min_spread^2). Keeps the
  // posterior proper when a track's draws (or all track medians) coincide.
  double min_spread = 1e-6;
  bool parallel_families = true;
};

/// Sufficient statistics of one track's log draws.
struct LogDrawStats {
  double n = 0;
  double mean = 0;
  double ss = 0;  // sum of squared deviations from the mean
};

namespace detail {

/// Density of one family with the track medians integrated out: log mu, gamma, then
/// eta_j per track. Given the draws' log mean ybar_j and sum of squares S_j,
///   ybar_j ~ N(log mu, gamma^2 + eta_j^2 / n_j),  S_j contributes -(n_j-1) log eta_j - S_j / (2 eta_j^2).
class HierFamilyModel {
public:
  HierFamilyModel(std::vector<LogDrawStats> tracks, double prior_log_median, const HierPriors& pr, double min_spread)
      : t_(std::move(tracks)), m0_(prior_log_median), pr_(pr), eps2_(min_spread * min_spread) {}

  std::size_t n_tracks() const { return t_.size(); }
  std::size_t dim() const { return 2 + t_.size(); }
  static std::size_t eta_j(std::size_t j) { return 2 + j; }
  const std::vector<LogDrawStats>& tracks() const { return t_; }

  double log_density(std::span<const double> x) const {
    std::vector<double> g(x.size());
    return log_density_gradient(x, g);
  }

  double log_density_gradient(std::span<const double> x, std::span<double> g) const {
    std::fill(g.begin(), g.end(), 0.0);
    const double a = x[0], gamma = x[1];
    if (!(gamma > 0.0) || !std::isfinite(a) || !std::isfinite(gamma)) return stats::kNegInf;
    const double psd = pr_.log_mu_sd;
    double lp = stats::normal_logpdf(a, m0_, psd) + stats::halfnormal_logpdf(gamma, pr_.gamma_scale);
    g[0] = -(a - m0_) / (psd * psd);
    g[1] = -gamma / (pr_.gamma_scale * pr_.gamma_scale);
    const double gs2 = gamma * gamma + eps2_;
    for (std::size_t j = 0; j < t_.size(); ++j) {
      const double eta = x[eta_j(j)];
      if (!(eta > 0.0) || !std::isfinite(eta)) {
        std::fill(g.begin(), g.end(), 0.0);
        return stats::kNegInf;
      }
      const auto& s = t_[j];
      lp += stats::halfnormal_logpdf(eta, pr_.eta_scale);
      double& ge = g[eta_j(j)];
      ge = -eta / (pr_.eta_scale * pr_.eta_scale);
      const double hs2 = eta * eta + eps2_, hs = std::sqrt(hs2);
      const double dh = eta / hs;  // d hs / d eta
      // Within-track scatter.
      lp += -(s.n - 1.0) * (std::log(hs) + stats::kLogSqrt2Pi) - 0.5 * std::log(s.n) - 0.5 * s.ss / hs2;
      ge += (-(s.n - 1.0) / hs + s.ss / (hs2 * hs)) * dh;
      // Track mean around the population median.
      const double v = gs2 + hs2 / s.n, d = s.mean - a;
      lp += -0.5 * std::log(v) - stats::kLogSqrt2Pi - 0.5 * d * d / v;
      const double dv = -0.5 / v + 0.5 * d * d / (v * v);
      g[0] += d / v;
      g[1] += dv * 2.0 * gamma;
      ge += dv * 2.0 * hs / s.n * dh;
    }
    if (!std::isfinite(lp)) {
      std::fill(g.begin(), g.end(), 0.0);
      return stats::kNegInf;
    }
    return lp;
  }

  /// Mean and sd of log mu_j given (log mu, gamma, eta_j).
  std::pair<double, double> track_conditional(std::span<const double> x, std::size_t j) const {
    const auto& s = t_[j];
    const double gs2 = x[1] * x[1] + eps2_, hs2 = x[eta_j(j)] * x[eta_j(j)] + eps2_;
    const double prec = 1.0 / gs2 + s.n / hs2;
    return {(x[0] / gs2 + s.n * s.mean / hs2) / prec, std::sqrt(1.0 / prec)};
  }

  std::vector<std::string> generated_names() const { return {"mu"}; }
  std::vector<double> generated(std::span<const double> x) const { return {std::exp(x[0])}; }

private:
  std::vector<LogDrawStats> t_;
  double m0_;
  HierPriors pr_;
  double eps2_;
};

inline std::vector<double> thin_evenly(const std::vector<double>& v, std::size_t max_n) {
  if (v.size() <= max_n) return v;
  std::vector<double> out(max_n);
  for (std::size_t k = 0; k < max_n; ++k) out[k] = v[k * v.size() / max_n];
  return out;
}

}  // namespace detail

struct FamilyPosterior {
  TauFamily family = TauFamily::tau_x;
  std::vector<std::string> track_ids;  // order of the log_mu[j]/eta[j] columns
  mcmc::PosteriorSamples samples;      // log_mu, gamma, eta[j], mu, log_mu[j]

  std::vector<double> mu() const { return samples.column("mu"); }
  std::vector<double> gamma() const { return samples.column("gamma"); }
};

struct PopulationPosterior {
  std::array<FamilyPosterior, 4> families;

  const FamilyPosterior& operator[](TauFamily f) const { return families[static_cast<std::size_t>(f)]; }
  FamilyPosterior& operator[](TauFamily f) { return families[static_cast<std::size_t>(f)]; }
};

/// Log-scale sufficient statistics of one track's draws for one family, after thinning.
inline LogDrawStats log_draw_stats(const std::vector<double>& draws, std::size_t max_draws) {
  const auto v = detail::thin_evenly(draws, max_draws);
  LogDrawStats s;
  s.n = static_cast<double>(v.size());
  for (double d : v) s.mean += std::log(d);
  s.mean /= s.n;
  for (double d : v) s.ss += (std::log(d) - s.mean) * (std::log(d) - s.mean);
  return s;
}

/// Checks the pooled input and returns it ordered by track id.
inline PooledInput validated_input(PooledInput in, const HierConfig& cfg) {
  if (in.size() < 3) throw DataError("pool: need at least 3 tracks, got " + std::to_string(in.size()));
  std::sort(in.begin(), in.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t j = 1; j < in.size(); ++j)
    if (in[j].id == in[j - 1].id) throw DataError("pool: duplicate track id '" + in[j].id + "'");
  for (const auto& t : in)
    for (auto f : kTauFamilies) {
      const auto& v = t[f];
      if (v.size() < cfg.min_draws_per_track)
        throw DataError("pool: track '" + t.id + "' has " + std::to_string(v.size()) + " draws of " +
                        family_name(f) + ", need at least " + std::to_string(cfg.min_draws_per_track));
      for (double d : v)
        if (!(d > 0.0) || !std::isfinite(d))
          throw DataError("pool: track '" + t.id + "' has a non-positive or non-finite " + family_name(f) + " draw");
    }
  return in;
}

/// Pools one family. `in` must already be validated and ordered.
inline FamilyPosterior pool_family(const PooledInput& in, TauFamily f, const HierConfig& cfg) {
  std::vector<LogDrawStats> st;
  FamilyPosterior out;
  out.family = f;
  for (const auto& t : in) {
    st.push_back(log_draw_stats(t[f], cfg.max_draws_per_track));
    out.track_ids.push_back(t.id);
  }
  const double m0 = std::log(cfg.priors.prior_median[static_cast<std::size_t>(f)]);
  detail::HierFamilyModel model(st, m0, cfg.priors, cfg.min_spread);

  mcmc::ParameterSpace sp;
  sp.add_block("population", {{"log_mu", mcmc::Support::unbounded(), 0.1}, {"gamma", mcmc::Support::positive(), 0.2}});
  std::vector<mcmc::Coordinate> etas;
  for (std::size_t j = 0; j < st.size(); ++j)
    etas.push_back({"eta[" + std::to_string(j + 1) + "]", mcmc::Support::positive(), 0.1});
  sp.add_block("tracks", std::move(etas));

  // Start at the per-track moment estimates.
  std::vector<double> init(model.dim());
  std::vector<double> means;
  for (std::size_t j = 0; j < st.size(); ++j) {
    init[detail::HierFamilyModel::eta_j(j)] = std::sqrt(st[j].ss / st[j].n) + cfg.min_spread + 1e-3;
    means.push_back(st[j].mean);
  }
  init[0] = stats::mean(means);
  init[1] = std::sqrt(stats::variance(means)) + cfg.min_spread + 1e-3;

  auto sc = cfg.sampler;
  sc.stream = cfg.sampler.stream + "/" + family_name(f);
  mcmc::NutsSampler<detail::HierFamilyModel> sampler(std::move(sp), sc, cfg.nuts);
  mcmc::PosteriorSamples draws;
  try {
    draws = sampler.run(model, init);
  } catch (const InferenceError& e) {
    throw InferenceError(std::string("pool ") + family_name(f) + ": " + e.what());
  }

  // Track medians from their exact Gaussian conditionals, one per posterior draw.
  auto names = draws.names();
  for (std::size_t j = 0; j < st.size(); ++j) names.push_back("log_mu[" + std::to_string(j + 1) + "]");
  out.samples = mcmc::PosteriorSamples(names);
  out.samples.meta() = draws.meta();
  Rng rng = make_rng(cfg.sampler.seed, sc.stream + "/tracks");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> row;
  for (std::size_t i = 0; i < draws.n_draws(); ++i) {
    const auto r = draws.row(i);
    row.assign(r.begin(), r.end());
    for (std::size_t j = 0; j < st.size(); ++j) {
      const auto [m, sd] = model.track_conditional(r, j);
      row.push_back(m + sd * normal(rng));
    }
    out.samples.add_draw(draws.chain(i), draws.draw_index(i), row);
  }
  return out;
}

/// Second-stage lognormal-lognormal pooling of per-track posterior draws, each family
/// independently. Tracks are processed in id order, so input order does not matter.
inline PopulationPosterior pool(PooledInput input, const HierConfig& cfg = {}) {
  const auto in = validated_input(std::move(input), cfg);
  PopulationPosterior out;
  if (cfg.parallel_families) {
    std::array<std::future<FamilyPosterior>, 4> jobs;
    for (auto f : kTauFamilies)
      jobs[static_cast<std::size_t>(f)] = std::async(std::launch::async, [&in, f, &cfg] { return pool_family(in, f, cfg); });
    for (auto f : kTauFamilies) out[f] = jobs[static_cast<std::size_t>(f)].get();
  } else {
    for (auto f : kTauFamilies) out[f] = pool_family(in, f, cfg);
  }
  return out;
}

struct Hyperparameters {
  double mu_tau_s = 0, gamma_tau_s = 0;
  double mu_tau_theta = 0, gamma_tau_theta = 0;
  double mu_tau_x = 0, gamma_tau_x = 0;
  double mu_tau_y = 0, gamma_tau_y = 0;

  double mu(TauFamily f) const {
    switch (f) {
      case TauFamily::tau_x: return mu_tau_x;
      case TauFamily::tau_y: return mu_tau_y;
      case TauFamily::tau_s: return mu_tau_s;
      case TauFamily::tau_theta: return mu_tau_theta;
    }
    return 0.0;
  }
  double gamma(TauFamily f) const {
    switch (f) {
      case TauFamily::tau_x: return gamma_tau_x;
      case TauFamily::tau_y: return gamma_tau_y;
      case TauFamily::tau_s: return gamma_tau_s;
      case TauFamily::tau_theta: return gamma_tau_theta;
    }
    return 0.0;
  }
};

/// Posterior means of the population medians (natural units) and log-scale spreads.
inline Hyperparameters empirical_hyperparameters(const PopulationPosterior& p) {
  auto m = [&](TauFamily f) { return stats::mean(p[f].mu()); };
  auto g = [&](TauFamily f) { return stats::mean(p[f].gamma()); };
  Hyperparameters h;
  h.mu_tau_s = m(TauFamily::tau_s);
  h.gamma_tau_s = g(TauFamily::tau_s);
  h.mu_tau_theta = m(TauFamily::tau_theta);
  h.gamma_tau_theta = g(TauFamily::tau_theta);
  h.mu_tau_x = m(TauFamily::tau_x);
  h.gamma_tau_x = g(TauFamily::tau_x);
  h.mu_tau_y = m(TauFamily::tau_y);
  h.gamma_tau_y = g(TauFamily::tau_y);
  return h;
}

inline nlohmann::json hyperparameters_to_json(const Hyperparameters& h) {
  return {{"mu_tau_s", h.mu_tau_s},         {"gamma_tau_s", h.gamma_tau_s}, {"mu_tau_theta", h.mu_tau_theta},
          {"gamma_tau_theta", h.gamma_tau_theta}, {"mu_tau_x", h.mu_tau_x},       {"gamma_tau_x", h.gamma_tau_x},
          {"mu_tau_y", h.mu_tau_y},         {"gamma_tau_y", h.gamma_tau_y}};
}

inline Hyperparameters hyperparameters_from_json(const nlohmann::json& j) {
  try {
    Hyperparameters h;
    h.mu_tau_s = j.at("mu_tau_s").get<double>();
    h.gamma_tau_s = j.at("gamma_tau_s").get<double>();
    h.mu_tau_theta = j.at("mu_tau_theta").get<double>();
    h.gamma_tau_theta = j.at("gamma_tau_theta").get<double>();
    h.mu_tau_x = j.at("mu_tau_x").get<double>();
    h.gamma_tau_x = j.at("gamma_tau_x").get<double>();
    h.mu_tau_y = j.at("mu_tau_y").get<double>();
    h.gamma_tau_y = j.at("gamma_tau_y").get<double>();
    for (auto f : kTauFamilies)
      if (!(h.mu(f) > 0.0) || !(h.gamma(f) >= 0.0)) throw DataError("hyperparameters: medians must be positive");
    return h;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("hyperparameters: ") + e.what());
  }
}

struct QuantileSummary {
  double q05 = 0, q25 = 0, q50 = 0, q75 = 0, q95 = 0, std = 0;
};

inline QuantileSummary summarize(const std::vector<double>& v) {
  return {stats::quantile(v, 0.05), stats::quantile(v, 0.25), stats::quantile(v, 0.50),
          stats::quantile(v, 0.75), stats::quantile(v, 0.95), std::sqrt(stats::variance(v))};
}

/// Population summary: quantiles and std of each population median, plus the spreads
/// and convergence diagnostics of the hyperparameters.
inline nlohmann::json population_summary_json(const PopulationPosterior& p) {
  nlohmann::json out = nlohmann::json::object();
  auto q = [](const QuantileSummary& s) {
    return nlohmann::json{{"q05", s.q05}, {"q25", s.q25}, {"q50", s.q50}, {"q75", s.q75}, {"q95", s.q95}, {"std", s.std}};
  };
  for (auto f : kTauFamilies) {
    const auto& fp = p[f];
    const auto d = mcmc::diagnostics(fp.samples);
    nlohmann::json e;
    e["mu"] = q(summarize(fp.mu()));
    e["gamma"] = q(summarize(fp.gamma()));
    e["rhat"] = {{"log_mu", d.rhat[fp.samples.index_of("log_mu")]}, {"gamma", d.rhat[fp.samples.index_of("gamma")]}};
    e["n_tracks"] = fp.track_ids.size();
    out[family_name(f)] = std::move(e);
  }
  return out;
}

}  // namespace navunc
