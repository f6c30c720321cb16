// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "navunc/error.hpp"
#include "navunc/geo.hpp"
#include "navunc/mcmc.hpp"
#include "navunc/rng.hpp"
#include "navunc/stats.hpp"
#include "navunc/tracks.hpp"

namespace navunc {

struct SsmParams {
  double mu_s = 10.0;
  double alpha_s = 0.5;
  double sigma_s = 1.0;
  double sigma_theta = 0.1;
  double tau_x = 30.0;
  double tau_y = 25.0;
  double tau_s = 0.2;
  double tau_theta = 0.2;
  std::vector<double> beta;  // one per interval between consecutive fixes
};

/// Latent motion per step; step t runs from report t-1 to report t (t = 1..T stored at t-1).
struct SsmLatents {
  std::vector<double> s;
  std::vector<double> theta;
};

struct SsmPriors {
  double tau_xy_scale = 50.0;  // half-normal scales
  double tau_s_scale = 0.5;
  double tau_theta_scale = 0.5;
  double sigma_s_scale = 2.0;
  double sigma_theta_scale = 0.3;
  std::optional<double> mu_s_mean;  // defaults to the empirical mean speed
  double mu_s_sd = 10.0;
};

enum class SsmKernel { nuts, random_walk };

struct SsmConfig {
  SsmPriors priors;
  SsmKernel kernel = SsmKernel::nuts;
  mcmc::SamplerConfig sampler = [] {
    mcmc::SamplerConfig c;
    c.chains = 4;
    c.warmup = 1000;
    c.draws = 500;
    c.thin = 2;
    c.stream = "ssm";
    c.init_jitter = 0.5;
    return c;
  }();
  mcmc::NutsConfig nuts;
  // NUTS only: sample speed innovations / heading increments instead of the latents.
  bool speed_noncentred = false;
  bool heading_noncentred = false;
  // Random-walk kernel only.
  std::size_t block_steps = 5;   // latent blocks; moves span two adjacent blocks
  std::size_t window_steps = 10;
  bool interval_moves = true;  // joint heading/bias and speed-level moves per fix interval
};

/// Observed quantities of one track in the form the likelihood needs.
struct SsmData {
  std::string track_id;
  std::size_t T = 0;  // steps
  std::vector<double> dt;      // hours, per step
  std::vector<double> s_hat;   // per step
  std::vector<double> th_hat;  // per step
  std::vector<char> fix_step;  // step ends at a fix report
  std::vector<char> heading_observed;
  std::vector<std::size_t> fixes;       // report indices
  std::vector<std::size_t> beta_index;  // per step, into beta; npos when there is no beta
  std::vector<std::pair<std::size_t, std::size_t>> interval_steps;  // [first, last] step per beta
  std::vector<Displacement> q;  // per report, from the first report
  std::vector<double> coslat;   // per report (reported latitude)
  double mean_speed = 0.0;

  std::size_t n_beta() const { return interval_steps.size(); }

  static SsmData build(const Track& t, const Kinematics& k, const FixSchedule& fs, const EarthModel& earth = {}) {
    if (fs.empty()) throw DataError("track " + t.id() + ": no celestial fixes; refusing to fit");
    SsmData d;
    d.track_id = t.id();
    d.T = k.size();
    d.dt = k.dt_hours;
    d.s_hat = k.speed;
    d.th_hat = k.heading;
    d.fix_step.assign(d.T, 0);
    d.heading_observed.assign(d.T, 1);
    for (auto r : fs.indices) {
      if (r == 0 || r > d.T) throw DataError("track " + t.id() + ": fix index out of range");
      d.fix_step[r - 1] = 1;
    }
    for (std::size_t i = 0; i < d.T; ++i)
      if (d.s_hat[i] == 0.0) d.heading_observed[i] = 0;  // heading of a zero step is a convention
    d.fixes = fs.indices;
    const std::size_t m = d.fixes.size();
    d.beta_index.assign(d.T, static_cast<std::size_t>(-1));
    if (m >= 2) {
      const std::size_t nb = m - 1;
      d.interval_steps.assign(nb, {d.T, 0});
      for (std::size_t step = 0; step < d.T; ++step) {
        const std::size_t report = step + 1;
        // beta_k covers reports in [t_k, t_{k+1}); earlier/later reports use the first/last.
        std::size_t kk = 0;
        while (kk + 1 < nb && report >= d.fixes[kk + 1]) ++kk;
        d.beta_index[step] = kk;
        auto& iv = d.interval_steps[kk];
        iv.first = std::min(iv.first, step);
        iv.second = std::max(iv.second, step);
      }
    }
    d.q = cumulative_displacements(t.positions(), earth);
    d.coslat.resize(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) d.coslat[i] = std::cos(t[i].pos.lat);
    d.mean_speed = k.size() ? stats::mean(k.speed) : 0.0;
    return d;
  }
};

/// Coordinate layout of the flat sampler vector.
struct SsmLayout {
  static constexpr std::size_t tau_x = 0, tau_y = 1, tau_s = 2, tau_theta = 3, mu_s = 4, alpha_s = 5, sigma_s = 6,
                               sigma_theta = 7, n_params = 8;
  std::size_t n_beta = 0;
  std::size_t T = 0;

  std::size_t beta(std::size_t k) const { return n_params + k; }
  std::size_t s(std::size_t step) const { return n_params + n_beta + step; }
  std::size_t theta(std::size_t step) const { return n_params + n_beta + T + step; }
  std::size_t dim() const { return n_params + n_beta + 2 * T; }

  static const std::vector<std::string>& param_names() {
    static const std::vector<std::string> names{"tau_x", "tau_y", "tau_s", "tau_theta",
                                                "mu_s",  "alpha_s", "sigma_s", "sigma_theta"};
    return names;
  }

  std::vector<double> pack(const SsmParams& p, const SsmLatents& l) const {
    std::vector<double> x(dim());
    x[tau_x] = p.tau_x;
    x[tau_y] = p.tau_y;
    x[tau_s] = p.tau_s;
    x[tau_theta] = p.tau_theta;
    x[mu_s] = p.mu_s;
    x[alpha_s] = p.alpha_s;
    x[sigma_s] = p.sigma_s;
    x[sigma_theta] = p.sigma_theta;
    for (std::size_t k = 0; k < n_beta; ++k) x[beta(k)] = p.beta.at(k);
    for (std::size_t t = 0; t < T; ++t) {
      x[s(t)] = l.s.at(t);
      x[theta(t)] = l.theta.at(t);
    }
    return x;
  }
};

namespace detail {

/// Shared evaluation of every term of the SSM log posterior on a flat vector.
class SsmTerms {
public:
  SsmTerms(const SsmData& d, const SsmPriors& pr) : d_(d), pr_(pr), lay_{d.n_beta(), d.T} {
    mu_mean_ = pr.mu_s_mean.value_or(d.mean_speed);
    mu_norm_ = -stats::log_std_normal_ccdf(-mu_mean_ / pr.mu_s_sd);
  }

  const SsmLayout& layout() const { return lay_; }

  double trans_s(std::span<const double> x, std::size_t t) const {
    const double mu = x[SsmLayout::mu_s], a = x[SsmLayout::alpha_s], sg = x[SsmLayout::sigma_s];
    const double st = x[lay_.s(t)];
    if (t == 0) return stats::truncnorm_lower_logpdf(st, mu, sg / std::sqrt(1.0 - a * a), 0.0);
    return stats::truncnorm_lower_logpdf(st, mu + a * (x[lay_.s(t - 1)] - mu), sg, 0.0);
  }

  double trans_theta(std::span<const double> x, std::size_t t) const {
    if (t == 0) return 0.0;  // flat initial heading
    return stats::normal_logpdf(x[lay_.theta(t)], x[lay_.theta(t - 1)], x[SsmLayout::sigma_theta]);
  }

  double beta_at(std::span<const double> x, std::size_t t) const {
    const auto k = d_.beta_index[t];
    return k == static_cast<std::size_t>(-1) ? 0.0 : x[lay_.beta(k)];
  }

  double obs(std::span<const double> x, std::size_t t) const {
    if (d_.fix_step[t]) return 0.0;
    const double st = x[lay_.s(t)];
    double lp = stats::normal_logpdf(d_.s_hat[t], st, x[SsmLayout::tau_s] * st);
    if (d_.heading_observed[t]) {
      const double r = wrap_angle(d_.th_hat[t] - x[lay_.theta(t)] - beta_at(x, t));
      lp += stats::normal_logpdf(r, 0.0, x[SsmLayout::tau_theta]);
    }
    return lp;
  }

  Displacement step(std::span<const double> x, std::size_t t) const {
    const double len = d_.dt[t] * x[lay_.s(t)];
    const double th = x[lay_.theta(t)];
    return {len * std::cos(th), len * std::sin(th)};
  }

  double fix_term(std::span<const double> x, std::size_t k, const Displacement& p) const {
    const std::size_t r = d_.fixes[k];
    return stats::normal_logpdf(d_.q[r].dx, p.dx, x[SsmLayout::tau_x] * d_.coslat[r]) +
           stats::normal_logpdf(d_.q[r].dy, p.dy, x[SsmLayout::tau_y]);
  }

  double prior(std::span<const double> x) const {
    double lp = stats::halfnormal_logpdf(x[SsmLayout::tau_x], pr_.tau_xy_scale) +
                stats::halfnormal_logpdf(x[SsmLayout::tau_y], pr_.tau_xy_scale) +
                stats::halfnormal_logpdf(x[SsmLayout::tau_s], pr_.tau_s_scale) +
                stats::halfnormal_logpdf(x[SsmLayout::tau_theta], pr_.tau_theta_scale) +
                stats::halfnormal_logpdf(x[SsmLayout::sigma_s], pr_.sigma_s_scale) +
                stats::halfnormal_logpdf(x[SsmLayout::sigma_theta], pr_.sigma_theta_scale);
    const double mu = x[SsmLayout::mu_s];
    lp += mu < 0.0 ? stats::kNegInf : stats::normal_logpdf(mu, mu_mean_, pr_.mu_s_sd) + mu_norm_;
    // alpha_s ~ U(0,1) and beta_k ~ U(-pi, pi] contribute constants.
    lp -= static_cast<double>(lay_.n_beta) * std::log(2.0 * kPi);
    return lp;
  }

  bool in_support(std::span<const double> x) const {
    for (std::size_t i = 0; i < SsmLayout::n_params; ++i)
      if (!std::isfinite(x[i])) return false;
    for (std::size_t i : {SsmLayout::tau_x, SsmLayout::tau_y, SsmLayout::tau_s, SsmLayout::tau_theta,
                          SsmLayout::sigma_s, SsmLayout::sigma_theta})
      if (!(x[i] > 0.0)) return false;
    if (!(x[SsmLayout::mu_s] >= 0.0)) return false;
    if (!(x[SsmLayout::alpha_s] > 0.0 && x[SsmLayout::alpha_s] < 1.0)) return false;
    for (std::size_t t = 0; t < d_.T; ++t)
      if (!(x[lay_.s(t)] > 0.0) || !std::isfinite(x[lay_.s(t)]) || !std::isfinite(x[lay_.theta(t)])) return false;
    for (std::size_t k = 0; k < lay_.n_beta; ++k)
      if (!std::isfinite(x[lay_.beta(k)])) return false;
    return true;
  }

  double total(std::span<const double> x) const {
    if (!in_support(x)) return stats::kNegInf;
    double lp = prior(x);
    Displacement p{};
    std::size_t next_fix = 0;
    for (std::size_t t = 0; t < d_.T; ++t) {
      lp += trans_s(x, t) + trans_theta(x, t) + obs(x, t);
      p = p + step(x, t);
      if (next_fix < d_.fixes.size() && d_.fixes[next_fix] == t + 1) lp += fix_term(x, next_fix++, p);
    }
    return std::isnan(lp) ? stats::kNegInf : lp;
  }

  /// Log posterior and its gradient with respect to every coordinate of x.
  double total_gradient(std::span<const double> x, std::span<double> g) const {
    std::fill(g.begin(), g.end(), 0.0);
    if (!in_support(x)) return stats::kNegInf;
    double lp = prior(x);
    using L = SsmLayout;
    const double mu = x[L::mu_s], a = x[L::alpha_s], sg = x[L::sigma_s], sth = x[L::sigma_theta];
    const double ts = x[L::tau_s], tth = x[L::tau_theta], tx = x[L::tau_x], ty = x[L::tau_y];

    g[L::tau_x] -= tx / (pr_.tau_xy_scale * pr_.tau_xy_scale);
    g[L::tau_y] -= ty / (pr_.tau_xy_scale * pr_.tau_xy_scale);
    g[L::tau_s] -= ts / (pr_.tau_s_scale * pr_.tau_s_scale);
    g[L::tau_theta] -= tth / (pr_.tau_theta_scale * pr_.tau_theta_scale);
    g[L::sigma_s] -= sg / (pr_.sigma_s_scale * pr_.sigma_s_scale);
    g[L::sigma_theta] -= sth / (pr_.sigma_theta_scale * pr_.sigma_theta_scale);
    g[L::mu_s] -= (mu - mu_mean_) / (pr_.mu_s_sd * pr_.mu_s_sd);

    // Truncated-normal speed transitions: partials in (value, mean, sd).
    auto tn = [](double v, double m, double sd, double& dv, double& dm, double& dsd) {
      const double z = (v - m) / sd;
      const double a0 = -m / sd;
      const double log_tail = stats::log_std_normal_ccdf(a0);
      const double lam = std::exp(-0.5 * a0 * a0 - stats::kLogSqrt2Pi - log_tail);
      dv = -z / sd;
      dm = z / sd - lam / sd;
      dsd = (z * z - 1.0) / sd + lam * m / (sd * sd);
      return -0.5 * z * z - std::log(sd) - stats::kLogSqrt2Pi - log_tail;
    };
    const double root = std::sqrt(1.0 - a * a);
    for (std::size_t t = 0; t < d_.T; ++t) {
      const double st = x[lay_.s(t)];
      double dv, dm, dsd;
      if (t == 0) {
        lp += tn(st, mu, sg / root, dv, dm, dsd);
        g[L::mu_s] += dm;
        g[L::sigma_s] += dsd / root;
        g[L::alpha_s] += dsd * sg * a / (root * root * root);
      } else {
        const double sp = x[lay_.s(t - 1)];
        lp += tn(st, mu + a * (sp - mu), sg, dv, dm, dsd);
        g[L::mu_s] += dm * (1.0 - a);
        g[L::alpha_s] += dm * (sp - mu);
        g[lay_.s(t - 1)] += dm * a;
        g[L::sigma_s] += dsd;
      }
      g[lay_.s(t)] += dv;

      if (t > 0) {
        const double z = (x[lay_.theta(t)] - x[lay_.theta(t - 1)]) / sth;
        lp += -0.5 * z * z - std::log(sth) - stats::kLogSqrt2Pi;
        g[lay_.theta(t)] -= z / sth;
        g[lay_.theta(t - 1)] += z / sth;
        g[L::sigma_theta] += (z * z - 1.0) / sth;
      }

      if (!d_.fix_step[t]) {
        const double sd = ts * st;
        const double z = (d_.s_hat[t] - st) / sd;
        const double dsd_ = (z * z - 1.0) / sd;
        lp += -0.5 * z * z - std::log(sd) - stats::kLogSqrt2Pi;
        g[lay_.s(t)] += z / sd + dsd_ * ts;
        g[L::tau_s] += dsd_ * st;
        if (d_.heading_observed[t]) {
          const double r = wrap_angle(d_.th_hat[t] - x[lay_.theta(t)] - beta_at(x, t));
          const double dr = -r / (tth * tth);
          lp += -0.5 * r * r / (tth * tth) - std::log(tth) - stats::kLogSqrt2Pi;
          g[lay_.theta(t)] -= dr;
          const auto k = d_.beta_index[t];
          if (k != static_cast<std::size_t>(-1)) g[lay_.beta(k)] -= dr;
          g[L::tau_theta] += (r * r / (tth * tth) - 1.0) / tth;
        }
      }
    }

    // Fixes: gradient in the path, then back through the cumulative sum of steps.
    std::vector<Displacement> gp(d_.T + 1);
    Displacement p{};
    std::size_t next_fix = 0;
    for (std::size_t t = 0; t < d_.T; ++t) {
      p = p + step(x, t);
      if (next_fix < d_.fixes.size() && d_.fixes[next_fix] == t + 1) {
        const std::size_t r = t + 1;
        const double sx = tx * d_.coslat[r];
        const double zx = (d_.q[r].dx - p.dx) / sx, zy = (d_.q[r].dy - p.dy) / ty;
        gp[r] = {zx / sx, zy / ty};
        lp += -0.5 * (zx * zx + zy * zy) - std::log(sx) - std::log(ty) - 2.0 * stats::kLogSqrt2Pi;
        g[L::tau_x] += (zx * zx - 1.0) / sx * d_.coslat[r];
        g[L::tau_y] += (zy * zy - 1.0) / ty;
        ++next_fix;
      }
    }
    Displacement acc{};
    for (std::size_t t = d_.T; t-- > 0;) {
      acc = acc + gp[t + 1];
      const double th = x[lay_.theta(t)], st = x[lay_.s(t)], dt = d_.dt[t];
      const double c = std::cos(th), sn = std::sin(th);
      g[lay_.s(t)] += dt * (acc.dx * c + acc.dy * sn);
      g[lay_.theta(t)] += dt * st * (-acc.dx * sn + acc.dy * c);
    }
    if (!std::isfinite(lp)) {
      std::fill(g.begin(), g.end(), 0.0);
      return stats::kNegInf;
    }
    return lp;
  }

  const SsmData& data() const { return d_; }

private:
  const SsmData& d_;
  const SsmPriors& pr_;
  SsmLayout lay_;
  double mu_mean_ = 0.0;
  double mu_norm_ = 0.0;
};

}  // namespace detail

/// Log posterior of the state-space model at (params, latents) for one track.
inline double log_posterior(const SsmParams& params, const SsmLatents& latents, const SsmData& data,
                            const SsmPriors& priors = {}) {
  detail::SsmTerms terms(data, priors);
  if (latents.s.size() != data.T || latents.theta.size() != data.T || params.beta.size() != data.n_beta())
    throw DataError("log_posterior: latent or bias vector has the wrong length");
  return terms.total(terms.layout().pack(params, latents));
}

inline double log_posterior(const SsmParams& params, const SsmLatents& latents, const Track& track,
                            const Kinematics& k, const FixSchedule& fs, const SsmPriors& priors = {}) {
  return log_posterior(params, latents, SsmData::build(track, k, fs), priors);
}

/// Incremental sampler model. Caches per-step terms and the true displacement path so a
/// window move costs its own footprint plus one pass over later fixes.
class SsmModel {
public:
  SsmModel(std::shared_ptr<const SsmData> data, std::shared_ptr<const SsmPriors> priors)
      : data_(std::move(data)), priors_(std::move(priors)), terms_(std::make_shared<detail::SsmTerms>(*data_, *priors_)) {}

  const SsmLayout& layout() const { return terms_->layout(); }

  double log_density(std::span<const double> x) const { return terms_->total(x); }
  double log_density_gradient(std::span<const double> x, std::span<double> g) const {
    return terms_->total_gradient(x, g);
  }

  void reset(std::span<const double> x) {
    const auto& d = *data_;
    ts_.assign(d.T, 0.0);
    th_.assign(d.T, 0.0);
    ob_.assign(d.T, 0.0);
    fx_.assign(d.fixes.size(), 0.0);
    p_.assign(d.T + 1, Displacement{});
    for (std::size_t t = 0; t < d.T; ++t) {
      ts_[t] = terms_->trans_s(x, t);
      th_[t] = terms_->trans_theta(x, t);
      ob_[t] = terms_->obs(x, t);
      p_[t + 1] = p_[t] + terms_->step(x, t);
    }
    for (std::size_t k = 0; k < d.fixes.size(); ++k) fx_[k] = terms_->fix_term(x, k, p_[d.fixes[k]]);
    prior_ = terms_->prior(x);
  }

  double log_density_delta(std::span<const std::size_t> coords, std::span<const double> cur,
                           std::span<const double> prop) {
    (void)cur;
    const auto& d = *data_;
    const auto& lay = layout();
    pending_.clear();
    bool params = false;
    std::size_t lo = d.T, hi = 0;
    bool latent_moved = false;
    for (auto c : coords) {
      if (c < SsmLayout::n_params) {
        params = true;
      } else if (c < lay.s(0)) {
        const auto& iv = d.interval_steps[c - SsmLayout::n_params];
        lo = std::min(lo, iv.first);
        hi = std::max(hi, iv.second);
      } else {
        const std::size_t step = c < lay.theta(0) ? c - lay.s(0) : c - lay.theta(0);
        lo = std::min(lo, step);
        hi = std::max(hi, step);
        latent_moved = true;
      }
    }
    if (params && lo <= hi) {
      // Mixed parameter/latent move: rescore from scratch.
      pending_.rebuild = true;
      const double lp = terms_->total(prop);
      return lp == stats::kNegInf ? lp : lp - cached_total();
    }
    if (params) {
      // Parameter moves touch every step; rescore from the cached path.
      pending_.full = true;
      pending_.ts.resize(d.T);
      pending_.th.resize(d.T);
      pending_.ob.resize(d.T);
      pending_.fx.resize(d.fixes.size());
      double delta = 0.0;
      if (!terms_->in_support(prop)) return stats::kNegInf;
      pending_.prior = terms_->prior(prop);
      delta += pending_.prior - prior_;
      for (std::size_t t = 0; t < d.T; ++t) {
        pending_.ts[t] = terms_->trans_s(prop, t);
        pending_.th[t] = terms_->trans_theta(prop, t);
        pending_.ob[t] = terms_->obs(prop, t);
        delta += pending_.ts[t] - ts_[t] + pending_.th[t] - th_[t] + pending_.ob[t] - ob_[t];
      }
      for (std::size_t k = 0; k < d.fixes.size(); ++k) {
        pending_.fx[k] = terms_->fix_term(prop, k, p_[d.fixes[k]]);
        delta += pending_.fx[k] - fx_[k];
      }
      return std::isnan(delta) ? stats::kNegInf : delta;
    }

    for (std::size_t t = lo; t <= hi; ++t)
      if (!(prop[lay.s(t)] > 0.0) || !std::isfinite(prop[lay.s(t)]) || !std::isfinite(prop[lay.theta(t)]))
        return stats::kNegInf;
    pending_.lo = lo;
    pending_.hi = hi;
    double delta = 0.0;
    const std::size_t trans_hi = std::min(hi + 1, d.T - 1);
    pending_.ts.resize(trans_hi - lo + 1);
    pending_.th.resize(trans_hi - lo + 1);
    for (std::size_t t = lo; t <= trans_hi; ++t) {
      pending_.ts[t - lo] = terms_->trans_s(prop, t);
      pending_.th[t - lo] = terms_->trans_theta(prop, t);
      delta += pending_.ts[t - lo] - ts_[t] + pending_.th[t - lo] - th_[t];
    }
    pending_.ob.resize(hi - lo + 1);
    for (std::size_t t = lo; t <= hi; ++t) {
      pending_.ob[t - lo] = terms_->obs(prop, t);
      delta += pending_.ob[t - lo] - ob_[t];
    }
    // Path: reports lo+1..hi+1 recomputed, later reports shifted by a constant.
    pending_.p.resize(hi - lo + 1);
    pending_.shift = Displacement{};
    if (latent_moved) {
      Displacement p = p_[lo];
      for (std::size_t t = lo; t <= hi; ++t) {
        p = p + terms_->step(prop, t);
        pending_.p[t - lo] = p;
      }
      pending_.shift = p - p_[hi + 1];
    } else {
      for (std::size_t t = lo; t <= hi; ++t) pending_.p[t - lo] = p_[t + 1];
    }
    pending_.fx_first = std::lower_bound(d.fixes.begin(), d.fixes.end(), lo + 1) - d.fixes.begin();
    pending_.fx.clear();
    for (std::size_t k = pending_.fx_first; k < d.fixes.size(); ++k) {
      const std::size_t r = d.fixes[k];
      const Displacement p = r <= hi + 1 ? pending_.p[r - 1 - lo] : p_[r] + pending_.shift;
      pending_.fx.push_back(terms_->fix_term(prop, k, p));
      delta += pending_.fx.back() - fx_[k];
    }
    return std::isnan(delta) ? stats::kNegInf : delta;
  }

  void commit(std::span<const std::size_t> coords, std::span<const double> prop) {
    (void)coords;
    const auto& d = *data_;
    if (pending_.rebuild) {
      reset(prop);
      return;
    }
    if (pending_.full) {
      ts_ = pending_.ts;
      th_ = pending_.th;
      ob_ = pending_.ob;
      fx_ = pending_.fx;
      prior_ = pending_.prior;
      return;
    }
    const std::size_t lo = pending_.lo, hi = pending_.hi;
    for (std::size_t i = 0; i < pending_.ts.size(); ++i) {
      ts_[lo + i] = pending_.ts[i];
      th_[lo + i] = pending_.th[i];
    }
    for (std::size_t i = 0; i < pending_.ob.size(); ++i) ob_[lo + i] = pending_.ob[i];
    for (std::size_t t = lo; t <= hi; ++t) p_[t + 1] = pending_.p[t - lo];
    if (pending_.shift.dx != 0.0 || pending_.shift.dy != 0.0)
      for (std::size_t r = hi + 2; r <= d.T; ++r) p_[r] = p_[r] + pending_.shift;
    for (std::size_t i = 0; i < pending_.fx.size(); ++i) fx_[pending_.fx_first + i] = pending_.fx[i];
    (void)prop;
  }

  std::vector<std::string> generated_names() const {
    std::vector<std::string> out;
    for (std::size_t r = 0; r <= data_->T; ++r) out.push_back("px[" + std::to_string(r) + "]");
    for (std::size_t r = 0; r <= data_->T; ++r) out.push_back("py[" + std::to_string(r) + "]");
    return out;
  }

  std::vector<double> generated(std::span<const double> x) const {
    const std::size_t T = data_->T;
    std::vector<double> out(2 * (T + 1), 0.0);
    Displacement p{};
    for (std::size_t t = 0; t < T; ++t) {
      p = p + terms_->step(x, t);
      out[t + 1] = p.dx;
      out[T + 1 + t + 1] = p.dy;
    }
    return out;
  }

  /// Sum of the cached terms; equals log_density at the current point.
  double cached_total() const {
    double lp = prior_;
    for (std::size_t t = 0; t < ts_.size(); ++t) lp += ts_[t] + th_[t] + ob_[t];
    for (double f : fx_) lp += f;
    return lp;
  }

private:
  struct Pending {
    bool full = false;
    bool rebuild = false;
    std::size_t lo = 0, hi = 0;
    std::vector<double> ts, th, ob, fx;
    std::vector<Displacement> p;
    Displacement shift;
    std::size_t fx_first = 0;
    double prior = 0.0;
    void clear() { full = rebuild = false; }
  };

  std::shared_ptr<const SsmData> data_;
  std::shared_ptr<const SsmPriors> priors_;
  std::shared_ptr<const detail::SsmTerms> terms_;
  std::vector<double> ts_, th_, ob_, fx_;
  std::vector<Displacement> p_;
  double prior_ = 0.0;
  Pending pending_;
};

/// Non-centred form of the model for gradient-based sampling. The flat vector keeps the
/// parameter and bias slots of SsmLayout; the speed slots hold standardized innovations
/// eta_t and the heading slots hold theta_1 followed by standardized increments xi_t:
///   s_1 = mu + sigma_s / sqrt(1 - alpha^2) eta_1,  s_t = mu + alpha (s_{t-1} - mu) + sigma_s eta_t,
///   theta_t = theta_{t-1} + sigma_theta xi_t.
/// The density includes the Jacobian of that map, so it is the same posterior.
class SsmNcModel {
public:
  SsmNcModel(std::shared_ptr<const SsmData> data, std::shared_ptr<const SsmPriors> priors, bool speed_nc = true,
             bool heading_nc = false)
      : data_(std::move(data)),
        priors_(std::move(priors)),
        terms_(std::make_shared<detail::SsmTerms>(*data_, *priors_)),
        speed_nc_(speed_nc),
        heading_nc_(heading_nc) {}

  bool speed_noncentred() const { return speed_nc_; }
  bool heading_noncentred() const { return heading_nc_; }

  const SsmLayout& layout() const { return terms_->layout(); }

  /// Non-centred vector -> centred (s, theta) vector.
  std::vector<double> to_centered(std::span<const double> y) const {
    const auto& lay = layout();
    std::vector<double> x(y.begin(), y.end());
    const std::size_t T = data_->T;
    if (T == 0) return x;
    const double mu = y[SsmLayout::mu_s], a = y[SsmLayout::alpha_s], sg = y[SsmLayout::sigma_s],
                 sth = y[SsmLayout::sigma_theta];
    if (speed_nc_) {
      x[lay.s(0)] = mu + sg / std::sqrt(1.0 - a * a) * y[lay.s(0)];
      for (std::size_t t = 1; t < T; ++t) x[lay.s(t)] = mu + a * (x[lay.s(t - 1)] - mu) + sg * y[lay.s(t)];
    }
    if (heading_nc_)
      for (std::size_t t = 1; t < T; ++t) x[lay.theta(t)] = x[lay.theta(t - 1)] + sth * y[lay.theta(t)];
    return x;
  }

  /// Centred -> non-centred; inverse of to_centered.
  std::vector<double> from_centered(std::span<const double> x) const {
    const auto& lay = layout();
    std::vector<double> y(x.begin(), x.end());
    const std::size_t T = data_->T;
    if (T == 0) return y;
    const double mu = x[SsmLayout::mu_s], a = x[SsmLayout::alpha_s], sg = x[SsmLayout::sigma_s],
                 sth = x[SsmLayout::sigma_theta];
    if (speed_nc_) {
      y[lay.s(0)] = (x[lay.s(0)] - mu) * std::sqrt(1.0 - a * a) / sg;
      for (std::size_t t = 1; t < T; ++t) y[lay.s(t)] = (x[lay.s(t)] - mu - a * (x[lay.s(t - 1)] - mu)) / sg;
    }
    if (heading_nc_)
      for (std::size_t t = 1; t < T; ++t) y[lay.theta(t)] = (x[lay.theta(t)] - x[lay.theta(t - 1)]) / sth;
    return y;
  }

  double log_density(std::span<const double> y) const {
    if (!params_ok(y)) return stats::kNegInf;
    const double lp = terms_->total(to_centered(y));
    return lp == stats::kNegInf ? lp : lp + log_jacobian(y);
  }

  double log_density_gradient(std::span<const double> y, std::span<double> gy) const {
    std::fill(gy.begin(), gy.end(), 0.0);
    if (!params_ok(y)) return stats::kNegInf;
    const auto& lay = layout();
    const std::size_t T = data_->T;
    const auto x = to_centered(y);
    std::vector<double> gx(x.size());
    double lp = terms_->total_gradient(x, gx);
    if (lp == stats::kNegInf) return lp;
    lp += log_jacobian(y);
    for (std::size_t i = 0; i < lay.s(0); ++i) gy[i] = gx[i];
    if (!speed_nc_)
      for (std::size_t t = 0; t < T; ++t) gy[lay.s(t)] = gx[lay.s(t)];
    if (!heading_nc_)
      for (std::size_t t = 0; t < T; ++t) gy[lay.theta(t)] = gx[lay.theta(t)];

    const double mu = y[SsmLayout::mu_s], a = y[SsmLayout::alpha_s], sg = y[SsmLayout::sigma_s],
                 sth = y[SsmLayout::sigma_theta];
    const double root = std::sqrt(1.0 - a * a);
    if (T > 0 && speed_nc_) {
      // Speeds: adjoint of the AR recursion.
      double lam_next = 0.0;
      for (std::size_t t = T; t-- > 0;) {
        const double lam = gx[lay.s(t)] + a * lam_next;
        if (t == 0) {
          const double eta = y[lay.s(0)];
          gy[lay.s(0)] = sg / root * lam;
          gy[SsmLayout::mu_s] += lam;
          gy[SsmLayout::sigma_s] += lam * eta / root;
          gy[SsmLayout::alpha_s] += lam * eta * sg * a / (root * root * root);
        } else {
          gy[lay.s(t)] = sg * lam;
          gy[SsmLayout::mu_s] += lam * (1.0 - a);
          gy[SsmLayout::alpha_s] += lam * (x[lay.s(t - 1)] - mu);
          gy[SsmLayout::sigma_s] += lam * y[lay.s(t)];
        }
        lam_next = lam;
      }
      gy[SsmLayout::sigma_s] += static_cast<double>(T) / sg;
      gy[SsmLayout::alpha_s] += a / (root * root);
    }
    if (T > 0 && heading_nc_) {
      // Headings: suffix sums of the centred gradient.
      double acc = 0.0;
      for (std::size_t t = T; t-- > 0;) {
        acc += gx[lay.theta(t)];
        if (t == 0) {
          gy[lay.theta(0)] = acc;
        } else {
          gy[lay.theta(t)] = sth * acc;
          gy[SsmLayout::sigma_theta] += gx[lay.theta(t)] * (x[lay.theta(t)] - x[lay.theta(0)]) / sth;
        }
      }
      gy[SsmLayout::sigma_theta] += static_cast<double>(T - 1) / sth;
    }
    return lp;
  }

  std::vector<std::string> generated_names() const {
    std::vector<std::string> out;
    for (std::size_t t = 0; t < data_->T; ++t) out.push_back("s[" + std::to_string(t + 1) + "]");
    for (std::size_t t = 0; t < data_->T; ++t) out.push_back("theta[" + std::to_string(t + 1) + "]");
    for (std::size_t r = 0; r <= data_->T; ++r) out.push_back("px[" + std::to_string(r) + "]");
    for (std::size_t r = 0; r <= data_->T; ++r) out.push_back("py[" + std::to_string(r) + "]");
    return out;
  }

  std::vector<double> generated(std::span<const double> y) const {
    const auto& lay = layout();
    const std::size_t T = data_->T;
    const auto x = to_centered(y);
    std::vector<double> out(2 * T + 2 * (T + 1), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      out[t] = x[lay.s(t)];
      out[T + t] = x[lay.theta(t)];
    }
    Displacement p{};
    for (std::size_t t = 0; t < T; ++t) {
      p = p + terms_->step(x, t);
      out[2 * T + t + 1] = p.dx;
      out[2 * T + (T + 1) + t + 1] = p.dy;
    }
    return out;
  }

private:
  bool params_ok(std::span<const double> y) const {
    const double a = y[SsmLayout::alpha_s];
    return a > 0.0 && a < 1.0 && y[SsmLayout::sigma_s] > 0.0 && y[SsmLayout::sigma_theta] > 0.0 &&
           std::isfinite(y[SsmLayout::mu_s]);
  }
  double log_jacobian(std::span<const double> y) const {
    const std::size_t T = data_->T;
    if (T == 0) return 0.0;
    const double a = y[SsmLayout::alpha_s];
    double lj = 0.0;
    if (speed_nc_) lj += static_cast<double>(T) * std::log(y[SsmLayout::sigma_s]) - 0.5 * std::log(1.0 - a * a);
    if (heading_nc_) lj += static_cast<double>(T - 1) * std::log(y[SsmLayout::sigma_theta]);
    return lj;
  }

  std::shared_ptr<const SsmData> data_;
  std::shared_ptr<const SsmPriors> priors_;
  std::shared_ptr<const detail::SsmTerms> terms_;
  bool speed_nc_ = true;
  bool heading_nc_ = false;
};

// ---------------------------------------------------------------------------
// Fitting

namespace detail {

inline std::vector<double> median_filter(const std::vector<double>& v, std::size_t half) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t a = i >= half ? i - half : 0, b = std::min(v.size() - 1, i + half);
    out[i] = stats::median(std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(a),
                                               v.begin() + static_cast<std::ptrdiff_t>(b) + 1));
  }
  return out;
}

/// Replaces masked entries by linear interpolation between the nearest kept neighbours.
inline std::vector<double> fill_masked(std::vector<double> v, const std::vector<char>& masked) {
  const std::size_t n = v.size();
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < n; ++i)
    if (!masked[i]) kept.push_back(i);
  if (kept.empty()) return v;
  for (std::size_t i = 0; i < n; ++i) {
    if (!masked[i]) continue;
    auto it = std::lower_bound(kept.begin(), kept.end(), i);
    if (it == kept.begin()) {
      v[i] = v[kept.front()];
    } else if (it == kept.end()) {
      v[i] = v[kept.back()];
    } else {
      const std::size_t b = *it, a = *(it - 1);
      const double w = static_cast<double>(i - a) / static_cast<double>(b - a);
      v[i] = (1.0 - w) * v[a] + w * v[b];
    }
  }
  return v;
}

}  // namespace detail

/// Starting point: smoothed empirical speed and heading with fix steps masked, per
/// interval circular-mean heading bias, and scale parameters at their prior medians.
inline std::pair<SsmParams, SsmLatents> initial_state(const SsmData& d, const SsmPriors& pr = {}) {
  std::vector<char> mask(d.T);
  for (std::size_t t = 0; t < d.T; ++t) mask[t] = d.fix_step[t] || !d.heading_observed[t];
  std::vector<double> speed = detail::fill_masked(d.s_hat, d.fix_step);
  speed = detail::median_filter(speed, 2);
  for (auto& v : speed) v = std::max(v, 0.1);
  // Unwrap headings so that smoothing does not straddle the branch cut.
  std::vector<double> head(d.T);
  double prev = 0.0;
  bool have = false;
  for (std::size_t t = 0; t < d.T; ++t) {
    if (mask[t]) {
      head[t] = prev;
      continue;
    }
    head[t] = have ? prev + wrap_angle(d.th_hat[t] - prev) : d.th_hat[t];
    prev = head[t];
    have = true;
  }
  head = detail::fill_masked(head, mask);
  head = detail::median_filter(head, 2);

  SsmParams p;
  constexpr double kHalfNormalMedian = 0.6744897501960817;
  p.tau_x = p.tau_y = kHalfNormalMedian * pr.tau_xy_scale;
  p.mu_s = std::max(stats::mean(speed), 0.1);
  p.alpha_s = 0.8;
  p.beta.assign(d.n_beta(), 0.0);
  for (std::size_t k = 0; k < d.n_beta(); ++k) {
    std::vector<double> r;
    for (std::size_t t = d.interval_steps[k].first; t <= d.interval_steps[k].second; ++t)
      if (!mask[t]) r.push_back(wrap_angle(d.th_hat[t] - head[t]));
    p.beta[k] = r.empty() ? 0.0 : stats::circular_mean(r);
  }

  // Noise and process scales from robust spreads around the smoothed path.
  auto robust_sd = [](std::vector<double> v, double fallback) {
    if (v.size() < 3) return fallback;
    const double med = stats::median(v);
    for (auto& e : v) e = std::abs(e - med);
    return 1.4826 * stats::median(std::move(v));
  };
  std::vector<double> rs, rh, ds, dh;
  for (std::size_t t = 0; t < d.T; ++t) {
    if (!d.fix_step[t] && speed[t] > 0.0) rs.push_back(d.s_hat[t] / speed[t] - 1.0);
    if (!mask[t]) {
      const auto b = d.beta_index[t];
      rh.push_back(wrap_angle(d.th_hat[t] - head[t] - (b == static_cast<std::size_t>(-1) ? 0.0 : p.beta[b])));
    }
    if (t > 0) {
      ds.push_back(speed[t] - speed[t - 1]);
      dh.push_back(head[t] - head[t - 1]);
    }
  }
  p.tau_s = std::clamp(robust_sd(rs, 0.2), 0.02, 2.0);
  p.tau_theta = std::clamp(robust_sd(rh, 0.2), 0.02, 2.0);
  p.sigma_s = std::clamp(robust_sd(ds, 0.5), 0.05, 5.0);
  p.sigma_theta = std::clamp(robust_sd(dh, 0.05), 0.005, 1.0);
  return {p, SsmLatents{speed, head}};
}

inline std::vector<std::string> ssm_coordinate_names(const SsmData& d) {
  auto names = SsmLayout::param_names();
  for (std::size_t k = 0; k < d.n_beta(); ++k) names.push_back("beta[" + std::to_string(k + 1) + "]");
  for (std::size_t t = 0; t < d.T; ++t) names.push_back("s[" + std::to_string(t + 1) + "]");
  for (std::size_t t = 0; t < d.T; ++t) names.push_back("theta[" + std::to_string(t + 1) + "]");
  return names;
}

inline mcmc::ParameterSpace ssm_space(const SsmData& d, const SsmConfig& cfg) {
  using mcmc::Coordinate;
  using mcmc::Support;
  mcmc::ParameterSpace sp;
  sp.add_block("celestial", {Coordinate{"tau_x", Support::positive(), 0.1}, Coordinate{"tau_y", Support::positive(), 0.1}});
  sp.add_block("reckoning",
               {Coordinate{"tau_s", Support::positive(), 0.05}, Coordinate{"tau_theta", Support::positive(), 0.05}});
  sp.add_block("speed_process", {Coordinate{"mu_s", Support::positive(), 0.05},
                                 Coordinate{"alpha_s", Support::interval(0.0, 1.0), 0.2},
                                 Coordinate{"sigma_s", Support::positive(), 0.1}});
  sp.add_block("heading_process", {Coordinate{"sigma_theta", Support::positive(), 0.1}});
  if (d.n_beta()) {
    std::vector<Coordinate> b;
    for (std::size_t k = 0; k < d.n_beta(); ++k)
      b.push_back(Coordinate{"beta[" + std::to_string(k + 1) + "]", Support::circular(), 0.03});
    sp.add_block("beta", std::move(b));
  }
  const std::size_t bs = std::max<std::size_t>(cfg.block_steps, 1);
  for (std::size_t a = 0; a < d.T; a += bs) {
    std::vector<Coordinate> c;
    for (std::size_t t = a; t < std::min(d.T, a + bs); ++t)
      c.push_back(Coordinate{"s[" + std::to_string(t + 1) + "]", Support::positive(), 0.05});
    sp.add_block("s" + std::to_string(a / bs), std::move(c));
  }
  for (std::size_t a = 0; a < d.T; a += bs) {
    std::vector<Coordinate> c;
    for (std::size_t t = a; t < std::min(d.T, a + bs); ++t)
      c.push_back(Coordinate{"theta[" + std::to_string(t + 1) + "]", Support::unbounded(), 0.05});
    sp.add_block("theta" + std::to_string(a / bs), std::move(c));
  }
  return sp;
}

/// Coordinates of the non-centred model: parameters and biases as in ssm_space, then
/// eta_s[1..T], theta_start and xi_theta[2..T].
inline mcmc::ParameterSpace ssm_nc_space(const SsmData& d, bool speed_nc = true, bool heading_nc = false) {
  using mcmc::Coordinate;
  using mcmc::Support;
  mcmc::ParameterSpace sp;
  sp.add_block("celestial", {Coordinate{"tau_x", Support::positive(), 0.1}, Coordinate{"tau_y", Support::positive(), 0.1}});
  sp.add_block("reckoning",
               {Coordinate{"tau_s", Support::positive(), 0.05}, Coordinate{"tau_theta", Support::positive(), 0.05}});
  sp.add_block("speed_process", {Coordinate{"mu_s", Support::positive(), 0.05},
                                 Coordinate{"alpha_s", Support::interval(0.0, 1.0), 0.2},
                                 Coordinate{"sigma_s", Support::positive(), 0.1}});
  sp.add_block("heading_process", {Coordinate{"sigma_theta", Support::positive(), 0.1}});
  if (d.n_beta()) {
    std::vector<Coordinate> b;
    for (std::size_t k = 0; k < d.n_beta(); ++k)
      b.push_back(Coordinate{"beta[" + std::to_string(k + 1) + "]", Support::circular(), 0.03});
    sp.add_block("beta", std::move(b));
  }
  if (d.T) {
    std::vector<Coordinate> e, h;
    for (std::size_t t = 0; t < d.T; ++t) {
      const std::string n = std::to_string(t + 1);
      e.push_back(speed_nc ? Coordinate{"eta_s[" + n + "]", Support::unbounded(), 0.1}
                           : Coordinate{"s_latent[" + n + "]", Support::positive(), 0.05});
      if (!heading_nc)
        h.push_back(Coordinate{"theta_latent[" + n + "]", Support::unbounded(), 0.05});
      else if (t == 0)
        h.push_back(Coordinate{"theta_start", Support::unbounded(), 0.05});
      else
        h.push_back(Coordinate{"xi_theta[" + n + "]", Support::unbounded(), 0.1});
    }
    sp.add_block("speed_innovations", std::move(e));
    sp.add_block("heading_innovations", std::move(h));
  }
  return sp;
}

inline std::vector<mcmc::Move> ssm_moves(const SsmData& d, const SsmConfig& cfg) {
  SsmLayout lay{d.n_beta(), d.T};
  std::vector<mcmc::Move> moves;
  const auto& pn = SsmLayout::param_names();
  for (std::size_t i = 0; i < SsmLayout::n_params; ++i) moves.push_back({pn[i], {i}});
  moves.push_back({"speed_process", {SsmLayout::mu_s, SsmLayout::alpha_s, SsmLayout::sigma_s}});
  for (std::size_t k = 0; k < d.n_beta(); ++k) moves.push_back({"beta[" + std::to_string(k + 1) + "]", {lay.beta(k)}});
  const std::size_t bs = std::max<std::size_t>(cfg.block_steps, 1);
  const std::size_t ws = std::max(cfg.window_steps, bs);
  for (std::size_t a = 0; a < d.T; a += bs) {
    const std::size_t b = std::min(d.T, a + ws);
    mcmc::Move ms{"s_window" + std::to_string(a / bs), {}}, mt{"theta_window" + std::to_string(a / bs), {}};
    for (std::size_t t = a; t < b; ++t) {
      ms.coords.push_back(lay.s(t));
      mt.coords.push_back(lay.theta(t));
    }
    moves.push_back(std::move(ms));
    moves.push_back(std::move(mt));
    if (b == d.T) break;
  }
  if (cfg.interval_moves) {
    for (std::size_t k = 0; k < d.n_beta(); ++k) {
      const auto [a, b] = d.interval_steps[k];
      // Rotate the true headings of an interval against its bias: observations stay put,
      // the path swings.
      mcmc::Move rot{"rotate[" + std::to_string(k + 1) + "]", {}, {}, 0.02};
      mcmc::Move lvl{"speed_level[" + std::to_string(k + 1) + "]", {}, {}, 0.02};
      for (std::size_t t = a; t <= b; ++t) {
        rot.coords.push_back(lay.theta(t));
        rot.direction.push_back(1.0);
        lvl.coords.push_back(lay.s(t));
        lvl.direction.push_back(1.0);
      }
      rot.coords.push_back(lay.beta(k));
      rot.direction.push_back(-1.0);
      moves.push_back(std::move(rot));
      moves.push_back(std::move(lvl));
    }
  }
  return moves;
}

struct SsmFit {
  SsmData data;
  mcmc::PosteriorSamples samples;  // parameters, biases, latents and px/py per report
};

/// Fits one track. Samples cover every parameter, the heading biases, the latent speeds
/// and headings, and the true displacement path px/py (km from the first report).
inline SsmFit fit_track(const Track& track, const FixSchedule& fs, const SsmConfig& cfg = {},
                        const EarthModel& earth = {}) {
  const auto k = empirical_kinematics(track, earth);
  auto data = std::make_shared<const SsmData>(SsmData::build(track, k, fs, earth));
  auto priors = std::make_shared<const SsmPriors>(cfg.priors);
  SsmModel model(data, priors);
  const auto [p0, l0] = initial_state(*data, cfg.priors);
  const auto init = model.layout().pack(p0, l0);
  try {
    if (cfg.kernel == SsmKernel::nuts) {
      SsmNcModel nc(data, priors, cfg.speed_noncentred, cfg.heading_noncentred);
      mcmc::NutsSampler<SsmNcModel> sampler(ssm_nc_space(*data, cfg.speed_noncentred, cfg.heading_noncentred),
                                            cfg.sampler, cfg.nuts);
      return SsmFit{*data, sampler.run(nc, nc.from_centered(init))};
    }
    mcmc::Sampler<SsmModel> sampler(ssm_space(*data, cfg), cfg.sampler, ssm_moves(*data, cfg));
    return SsmFit{*data, sampler.run(model, init)};
  } catch (const InferenceError& e) {
    throw InferenceError("track " + track.id() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Position summaries

struct ReportUncertainty {
  double std_x = 0, std_y = 0;    // random
  double bias_x = 0, bias_y = 0;  // systematic, |mean - reported|
  double rmse_x = 0, rmse_y = 0;  // overall
};

struct PositionUncertainty {
  std::vector<ReportUncertainty> km;
  std::vector<ReportUncertainty> deg;
  std::vector<Displacement> mean;  // ensemble/posterior mean displacement per report

  double mean_random_x_km() const {
    double s = 0;
    for (const auto& r : km) s += r.std_x;
    return km.empty() ? 0.0 : s / static_cast<double>(km.size());
  }
  double mean_random_y_km() const {
    double s = 0;
    for (const auto& r : km) s += r.std_y;
    return km.empty() ? 0.0 : s / static_cast<double>(km.size());
  }
};

inline constexpr double kKmPerDegreeReporting = 111.19;

/// Per-report random/systematic/overall uncertainty from position draws in
/// displacement space. `draw(i, r)` returns draw i of report r; the spread uses the
/// population (1/n) moments so that overall^2 = random^2 + systematic^2 exactly.
template <class DrawFn>
PositionUncertainty uncertainty_from_draws(const Track& track, std::size_t n_draws, DrawFn&& draw,
                                           const EarthModel& earth = {}) {
  if (n_draws == 0) throw DataError("position uncertainty: no draws");
  const auto q = cumulative_displacements(track.positions(), earth);
  PositionUncertainty out;
  const double n = static_cast<double>(n_draws);
  // Moments of the offsets from the reported position, accumulated in extended
  // precision: cumulative displacements reach thousands of km and rounding in their mean
  // would otherwise show up in the decomposition.
  std::vector<Displacement> d(n_draws);
  for (std::size_t r = 0; r < track.size(); ++r) {
    long double sx = 0, sy = 0;
    for (std::size_t i = 0; i < n_draws; ++i) {
      d[i] = draw(i, r) - q[r];
      sx += d[i].dx;
      sy += d[i].dy;
    }
    const double mx = static_cast<double>(sx / n), my = static_cast<double>(sy / n);
    long double vx = 0, vy = 0, ex = 0, ey = 0;
    for (const auto& v : d) {
      vx += static_cast<long double>(v.dx - mx) * (v.dx - mx);
      vy += static_cast<long double>(v.dy - my) * (v.dy - my);
      ex += static_cast<long double>(v.dx) * v.dx;
      ey += static_cast<long double>(v.dy) * v.dy;
    }
    ReportUncertainty u;
    u.std_x = static_cast<double>(std::sqrt(vx / n));
    u.std_y = static_cast<double>(std::sqrt(vy / n));
    u.bias_x = std::abs(mx);
    u.bias_y = std::abs(my);
    u.rmse_x = static_cast<double>(std::sqrt(ex / n));
    u.rmse_y = static_cast<double>(std::sqrt(ey / n));
    out.km.push_back(u);
    const double kx = kKmPerDegreeReporting * std::cos(track[r].pos.lat), ky = kKmPerDegreeReporting;
    out.deg.push_back({u.std_x / kx, u.std_y / ky, u.bias_x / kx, u.bias_y / ky, u.rmse_x / kx, u.rmse_y / ky});
    out.mean.push_back(q[r] + Displacement{mx, my});
  }
  return out;
}

/// Uncertainty of the latent positions stored as px[r]/py[r] columns.
inline PositionUncertainty position_uncertainty(const mcmc::PosteriorSamples& s, const Track& track,
                                                const EarthModel& earth = {}) {
  std::vector<std::size_t> cx(track.size()), cy(track.size());
  for (std::size_t r = 0; r < track.size(); ++r) {
    cx[r] = s.index_of("px[" + std::to_string(r) + "]");
    cy[r] = s.index_of("py[" + std::to_string(r) + "]");
  }
  return uncertainty_from_draws(
      track, s.n_draws(), [&](std::size_t i, std::size_t r) { return Displacement{s.at(i, cx[r]), s.at(i, cy[r])}; },
      earth);
}

/// Geographic position of a displacement-space draw: the reported position moved by the
/// draw's offset from the reported displacement.
inline GeoPoint displacement_to_position(const Track& track, const std::vector<Displacement>& q, std::size_t r,
                                         const Displacement& p, const EarthModel& earth = {}) {
  return advance(track[r].pos, p - q[r], earth);
}

/// Posterior mean positions as (lon, lat) per report.
inline std::vector<GeoPoint> posterior_mean_positions(const mcmc::PosteriorSamples& s, const Track& track,
                                                      const EarthModel& earth = {}) {
  const auto u = position_uncertainty(s, track, earth);
  const auto q = cumulative_displacements(track.positions(), earth);
  std::vector<GeoPoint> out;
  for (std::size_t r = 0; r < track.size(); ++r) out.push_back(displacement_to_position(track, q, r, u.mean[r], earth));
  return out;
}

/// Geographic position draws, draw x report, from the px/py columns.
inline std::vector<std::vector<GeoPoint>> posterior_position_draws(const mcmc::PosteriorSamples& s, const Track& track,
                                                                   const EarthModel& earth = {}) {
  const auto q = cumulative_displacements(track.positions(), earth);
  std::vector<std::size_t> cx(track.size()), cy(track.size());
  for (std::size_t r = 0; r < track.size(); ++r) {
    cx[r] = s.index_of("px[" + std::to_string(r) + "]");
    cy[r] = s.index_of("py[" + std::to_string(r) + "]");
  }
  std::vector<std::vector<GeoPoint>> out(s.n_draws());
  for (std::size_t i = 0; i < s.n_draws(); ++i) {
    out[i].reserve(track.size());
    for (std::size_t r = 0; r < track.size(); ++r)
      out[i].push_back(displacement_to_position(track, q, r, Displacement{s.at(i, cx[r]), s.at(i, cy[r])}, earth));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Posterior predictive replicates

struct ReplicateSet {
  std::vector<std::vector<Displacement>> q;  // replicate x report, km from the first report
  std::vector<std::size_t> source_draw;     // posterior draw behind each replicate
  std::vector<Track> tracks;                // same timestamps as the original
};

/// Replicates from one joint posterior draw each: celestial draws
/// around the latent path at fixes and dead-reckoned accumulation of replicated speed
/// and heading observations elsewhere.
inline ReplicateSet posterior_predictive(const mcmc::PosteriorSamples& s, const Track& track, const FixSchedule& fs,
                                         std::size_t n_replicates, std::uint64_t seed, const EarthModel& earth = {}) {
  if (s.empty()) throw DataError("posterior_predictive: no posterior draws");
  const auto k = empirical_kinematics(track, earth);
  const SsmData d = SsmData::build(track, k, fs, earth);
  const std::size_t T = d.T;
  const std::size_t ctx = s.index_of("tau_x"), cty = s.index_of("tau_y"), cts = s.index_of("tau_s"),
                    ctt = s.index_of("tau_theta");
  std::vector<std::size_t> cs(T), ch(T), cpx(T + 1), cpy(T + 1), cb(d.n_beta());
  for (std::size_t t = 0; t < T; ++t) {
    cs[t] = s.index_of("s[" + std::to_string(t + 1) + "]");
    ch[t] = s.index_of("theta[" + std::to_string(t + 1) + "]");
  }
  for (std::size_t r = 0; r <= T; ++r) {
    cpx[r] = s.index_of("px[" + std::to_string(r) + "]");
    cpy[r] = s.index_of("py[" + std::to_string(r) + "]");
  }
  for (std::size_t b = 0; b < d.n_beta(); ++b) cb[b] = s.index_of("beta[" + std::to_string(b + 1) + "]");

  Rng rng = make_rng(seed, "ppc/" + track.id());
  std::uniform_int_distribution<std::size_t> pick(0, s.n_draws() - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  ReplicateSet out;
  for (std::size_t rep = 0; rep < n_replicates; ++rep) {
    const std::size_t i = pick(rng);
    const auto row = s.row(i);
    std::vector<Displacement> q(T + 1);
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t r = t + 1;
      if (d.fix_step[t]) {
        q[r] = Displacement{row[cpx[r]] + row[ctx] * d.coslat[r] * normal(rng), row[cpy[r]] + row[cty] * normal(rng)};
      } else {
        const double st = row[cs[t]];
        const auto b = d.beta_index[t];
        const double beta = b == static_cast<std::size_t>(-1) ? 0.0 : row[cb[b]];
        const double sh = st + row[cts] * st * normal(rng);
        const double thh = row[ch[t]] + beta + row[ctt] * normal(rng);
        q[r] = q[r - 1] + Displacement{d.dt[t] * sh * std::cos(thh), d.dt[t] * sh * std::sin(thh)};
      }
    }
    std::vector<TrackReport> rs{track[0]};
    for (std::size_t r = 1; r <= T; ++r) rs.push_back({track[r].time, advance(rs.back().pos, q[r] - q[r - 1], earth), track[r].source_id});
    out.tracks.emplace_back(track.id() + "/rep" + std::to_string(rep), std::move(rs));
    out.q.push_back(std::move(q));
    out.source_draw.push_back(i);
  }
  return out;
}

}  // namespace navunc
