// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <random>
#include <span>
#include <thread>
#include <vector>

#include "navunc/error.hpp"
#include "navunc/mcmc/sampler.hpp"
#include "navunc/mcmc/samples.hpp"
#include "navunc/mcmc/space.hpp"
#include "navunc/rng.hpp"

namespace navunc::mcmc {

/// Models that return the log density together with its gradient with respect to the
/// constrained coordinates. Outside the support the return value is -inf and the
/// gradient is unspecified.
template <class M>
concept GradientModel = LogDensityModel<M> && requires(const M& m, std::span<const double> x, std::span<double> g) {
  { m.log_density_gradient(x, g) } -> std::convertible_to<double>;
};

struct NutsConfig {
  double target_accept = 0.8;
  std::size_t max_depth = 10;
  // Metric adaptation windows, as fractions of warmup when warmup is short.
  std::size_t init_buffer = 75;
  std::size_t term_buffer = 50;
  std::size_t base_window = 25;
  double max_delta_h = 1000.0;
};

namespace detail {

struct PhasePoint {
  std::vector<double> z, p, g;  // position, momentum, gradient of log target in z
  double lp = 0.0;
};

struct DualAveraging {
  double mu = 0.0, s_bar = 0.0, x_bar = 0.0;
  double counter = 0.0;
  double delta = 0.8, gamma = 0.05, kappa = 0.75, t0 = 10.0;

  void restart(double eps) {
    mu = std::log(10.0 * eps);
    s_bar = x_bar = counter = 0.0;
  }
  double learn(double stat) {
    counter += 1.0;
    stat = std::min(1.0, stat);
    const double eta = 1.0 / (counter + t0);
    s_bar = (1.0 - eta) * s_bar + eta * (delta - stat);
    const double x = mu - s_bar * std::sqrt(counter) / gamma;
    const double w = std::pow(counter, -kappa);
    x_bar = (1.0 - w) * x_bar + w * x;
    return std::exp(x);
  }
  double final_step() const { return std::exp(x_bar); }
};

}  // namespace detail

/// No-U-turn Hamiltonian Monte Carlo with multinomial trajectory sampling and a
/// diagonal metric. Coordinates move on the same unconstrained scale as the
/// random-walk kernel; circular coordinates are left unwrapped inside a trajectory and
/// wrapped when recorded. Warmup tunes the step size by dual averaging towards
/// `target_accept` and fits the metric from doubling windows of warmup draws.
template <GradientModel Model>
class NutsSampler {
public:
  NutsSampler(ParameterSpace space, SamplerConfig config, NutsConfig nuts = {})
      : space_(std::move(space)), config_(std::move(config)), nuts_(nuts) {
    if (config_.chains == 0 || config_.draws == 0 || config_.thin == 0)
      throw ConfigError("sampler: chains, draws and thin must be positive");
    if (!(nuts_.target_accept > 0.0 && nuts_.target_accept < 1.0))
      throw ConfigError("nuts: target_accept must lie in (0, 1)");
    if (nuts_.max_depth == 0 || nuts_.max_depth > 20) throw ConfigError("nuts: max_depth must lie in [1, 20]");
  }

  const ParameterSpace& space() const { return space_; }
  const SamplerConfig& config() const { return config_; }

  PosteriorSamples run(const Model& model, std::span<const double> init) const {
    if (init.size() != space_.dim()) throw InferenceError("initial vector has wrong dimension");
    for (std::size_t i = 0; i < init.size(); ++i)
      if (!space_.coordinate(i).support.contains(init[i]))
        throw InferenceError("initial value outside support: " + space_.coordinate(i).name);
    {
      std::vector<double> g(init.size());
      const double lp = model.log_density_gradient(init, g);
      if (std::isnan(lp)) throw InferenceError("log density is NaN at the initial point");
      if (lp == -std::numeric_limits<double>::infinity())
        throw InferenceError("log density is -inf at the initial point");
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!std::isfinite(g[i]))
          throw InferenceError("gradient is not finite at the initial point: " + space_.coordinate(i).name);
    }

    std::vector<PosteriorSamples> per_chain(config_.chains);
    std::vector<std::exception_ptr> errors(config_.chains);
    auto work = [&](std::size_t c) {
      try {
        per_chain[c] = run_chain(model, init, c);
      } catch (...) {
        errors[c] = std::current_exception();
      }
    };
    if (config_.parallel_chains && config_.chains > 1) {
      std::vector<std::thread> threads;
      for (std::size_t c = 0; c < config_.chains; ++c) threads.emplace_back(work, c);
      for (auto& t : threads) t.join();
    } else {
      for (std::size_t c = 0; c < config_.chains; ++c) work(c);
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);

    PosteriorSamples out = std::move(per_chain[0]);
    for (std::size_t c = 1; c < config_.chains; ++c) {
      out.append(per_chain[c]);
      for (auto& m : per_chain[c].meta()) out.meta().push_back(m);
    }
    return out;
  }

private:
  struct Chain {
    const NutsSampler& self;
    const Model& model;
    Rng& rng;
    std::vector<double> inv_metric;
    double eps = 0.1;
    std::vector<double> x, gx;  // scratch
    std::size_t n_leapfrog = 0;
    double sum_metro = 0.0;
    bool divergent = false;
    double h0 = 0.0;
    detail::PhasePoint cur;  // integrator state at the growing end of the trajectory

    // Log target on the unconstrained scale and its gradient, written into pt.
    void evaluate(detail::PhasePoint& pt) {
      const auto& sp = self.space_;
      const std::size_t d = pt.z.size();
      for (std::size_t i = 0; i < d; ++i) x[i] = sp.coordinate(i).support.constrain(pt.z[i]);
      double lp = model.log_density_gradient(x, gx);
      if (std::isnan(lp)) lp = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < d; ++i) {
        const auto& sup = sp.coordinate(i).support;
        if (!sup.contains(x[i])) lp = -std::numeric_limits<double>::infinity();
        lp += sup.log_jacobian(pt.z[i]);
        pt.g[i] = gx[i] * sup.dconstrain(pt.z[i]) + sup.dlog_jacobian(pt.z[i]);
      }
      pt.lp = lp;
      if (!std::isfinite(lp)) std::fill(pt.g.begin(), pt.g.end(), 0.0);
      for (double v : pt.g)
        if (!std::isfinite(v)) {
          pt.lp = -std::numeric_limits<double>::infinity();
          std::fill(pt.g.begin(), pt.g.end(), 0.0);
          break;
        }
    }

    double kinetic(const std::vector<double>& p) const {
      double k = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) k += inv_metric[i] * p[i] * p[i];
      return 0.5 * k;
    }
    double hamiltonian(const detail::PhasePoint& pt) const { return -pt.lp + kinetic(pt.p); }

    void leapfrog(detail::PhasePoint& pt, double step) {
      const std::size_t d = pt.z.size();
      for (std::size_t i = 0; i < d; ++i) pt.p[i] += 0.5 * step * pt.g[i];
      for (std::size_t i = 0; i < d; ++i) pt.z[i] += step * inv_metric[i] * pt.p[i];
      evaluate(pt);
      for (std::size_t i = 0; i < d; ++i) pt.p[i] += 0.5 * step * pt.g[i];
    }

    void sharp(const std::vector<double>& p, std::vector<double>& out) const {
      out.resize(p.size());
      for (std::size_t i = 0; i < p.size(); ++i) out[i] = inv_metric[i] * p[i];
    }

    static double dot(const std::vector<double>& a, const std::vector<double>& b) {
      double s = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
      return s;
    }
    static bool no_uturn(const std::vector<double>& sharp_minus, const std::vector<double>& sharp_plus,
                         const std::vector<double>& rho) {
      return dot(sharp_plus, rho) > 0.0 && dot(sharp_minus, rho) > 0.0;
    }
    static double log_sum_exp(double a, double b) {
      if (a == -std::numeric_limits<double>::infinity()) return b;
      if (b == -std::numeric_limits<double>::infinity()) return a;
      const double m = std::max(a, b);
      return m + std::log(std::exp(a - m) + std::exp(b - m));
    }

    bool build_tree(std::size_t depth, detail::PhasePoint& propose, std::vector<double>& sharp_beg,
                    std::vector<double>& sharp_end, std::vector<double>& rho, std::vector<double>& p_beg,
                    std::vector<double>& p_end, double sign, double& log_sum_weight) {
      const std::size_t d = cur.z.size();
      if (depth == 0) {
        leapfrog(cur, sign * eps);
        ++n_leapfrog;
        double h = hamiltonian(cur);
        if (std::isnan(h)) h = std::numeric_limits<double>::infinity();
        if (h - h0 > self.nuts_.max_delta_h) divergent = true;
        log_sum_weight = log_sum_exp(log_sum_weight, h0 - h);
        sum_metro += (h0 - h > 0.0) ? 1.0 : std::exp(h0 - h);
        propose = cur;
        sharp(cur.p, sharp_beg);
        sharp_end = sharp_beg;
        for (std::size_t i = 0; i < d; ++i) rho[i] += cur.p[i];
        p_beg = cur.p;
        p_end = p_beg;
        return !divergent;
      }

      std::vector<double> sharp_left_end(d), p_left_end(d), rho_left(d, 0.0);
      double lsw_left = -std::numeric_limits<double>::infinity();
      if (!build_tree(depth - 1, propose, sharp_beg, sharp_left_end, rho_left, p_beg, p_left_end, sign, lsw_left))
        return false;

      detail::PhasePoint propose_right = cur;
      std::vector<double> sharp_right_beg(d), p_right_beg(d), rho_right(d, 0.0);
      double lsw_right = -std::numeric_limits<double>::infinity();
      if (!build_tree(depth - 1, propose_right, sharp_right_beg, sharp_end, rho_right, p_right_beg, p_end, sign,
                      lsw_right))
        return false;

      const double lsw_subtree = log_sum_exp(lsw_left, lsw_right);
      log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
      if (lsw_right > lsw_subtree) {
        propose = propose_right;
      } else if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < std::exp(lsw_right - lsw_subtree)) {
        propose = propose_right;
      }

      std::vector<double> rho_subtree(d), ext(d);
      for (std::size_t i = 0; i < d; ++i) {
        rho_subtree[i] = rho_left[i] + rho_right[i];
        rho[i] += rho_subtree[i];
      }
      bool persist = no_uturn(sharp_beg, sharp_end, rho_subtree);
      for (std::size_t i = 0; i < d; ++i) ext[i] = rho_left[i] + p_right_beg[i];
      persist = persist && no_uturn(sharp_beg, sharp_right_beg, ext);
      for (std::size_t i = 0; i < d; ++i) ext[i] = rho_right[i] + p_left_end[i];
      persist = persist && no_uturn(sharp_left_end, sharp_end, ext);
      return persist;
    }

    // One NUTS transition from `z`; returns the acceptance statistic.
    double transition(detail::PhasePoint& z) {
      const std::size_t d = z.z.size();
      std::normal_distribution<double> normal(0.0, 1.0);
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      for (std::size_t i = 0; i < d; ++i) z.p[i] = normal(rng) / std::sqrt(inv_metric[i]);

      detail::PhasePoint fwd = z, bwd = z, sample = z;
      std::vector<double> sharp_fwd, sharp_bwd;
      sharp(z.p, sharp_fwd);
      sharp_bwd = sharp_fwd;
      std::vector<double> p_fwd_bwd = z.p, p_bwd_fwd = z.p;
      std::vector<double> sharp_fwd_bwd = sharp_fwd, sharp_bwd_fwd = sharp_fwd;
      std::vector<double> rho = z.p;
      h0 = hamiltonian(z);
      double log_sum_weight = 0.0;
      n_leapfrog = 0;
      sum_metro = 0.0;
      divergent = false;

      for (std::size_t depth = 0; depth < self.nuts_.max_depth; ++depth) {
        std::vector<double> rho_fwd(d, 0.0), rho_bwd(d, 0.0);
        detail::PhasePoint propose;
        double lsw_subtree = -std::numeric_limits<double>::infinity();
        bool valid;
        if (unif(rng) > 0.5) {
          rho_bwd = rho;
          p_bwd_fwd = bwd.p;
          sharp_bwd_fwd = sharp_bwd;
          cur = fwd;
          valid = build_tree(depth, propose, sharp_fwd_bwd, sharp_fwd, rho_fwd, p_fwd_bwd, fwd.p, 1.0, lsw_subtree);
          std::vector<double> keep_p = fwd.p;
          fwd = cur;
          fwd.p = keep_p;
        } else {
          rho_fwd = rho;
          p_fwd_bwd = fwd.p;
          sharp_fwd_bwd = sharp_fwd;
          cur = bwd;
          valid = build_tree(depth, propose, sharp_bwd_fwd, sharp_bwd, rho_bwd, p_bwd_fwd, bwd.p, -1.0, lsw_subtree);
          std::vector<double> keep_p = bwd.p;
          bwd = cur;
          bwd.p = keep_p;
        }
        if (!valid) break;

        if (lsw_subtree > log_sum_weight) {
          sample = propose;
        } else if (unif(rng) < std::exp(lsw_subtree - log_sum_weight)) {
          sample = propose;
        }
        log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

        for (std::size_t i = 0; i < d; ++i) rho[i] = rho_bwd[i] + rho_fwd[i];
        bool persist = no_uturn(sharp_bwd, sharp_fwd, rho);
        std::vector<double> ext(d);
        for (std::size_t i = 0; i < d; ++i) ext[i] = rho_bwd[i] + p_fwd_bwd[i];
        persist = persist && no_uturn(sharp_bwd, sharp_fwd_bwd, ext);
        for (std::size_t i = 0; i < d; ++i) ext[i] = rho_fwd[i] + p_bwd_fwd[i];
        persist = persist && no_uturn(sharp_bwd_fwd, sharp_fwd, ext);
        if (!persist) break;
      }
      z = sample;
      return n_leapfrog ? sum_metro / static_cast<double>(n_leapfrog) : 0.0;
    }

    // Doubles or halves eps until a single leapfrog step crosses 0.8 acceptance.
    void init_step_size(const detail::PhasePoint& z0) {
      const std::size_t d = z0.z.size();
      std::normal_distribution<double> normal(0.0, 1.0);
      detail::PhasePoint z = z0;
      for (std::size_t i = 0; i < d; ++i) z.p[i] = normal(rng) / std::sqrt(inv_metric[i]);
      const double h_start = hamiltonian(z);
      int direction = 0;
      for (int it = 0; it < 100; ++it) {
        detail::PhasePoint t = z;
        leapfrog(t, eps);
        double dh = h_start - hamiltonian(t);
        if (std::isnan(dh)) dh = -std::numeric_limits<double>::infinity();
        const int dir = dh > std::log(0.8) ? 1 : -1;
        if (direction == 0) direction = dir;
        if (dir != direction) break;
        eps = direction == 1 ? 2.0 * eps : 0.5 * eps;
        if (eps > 1e7 || eps < 1e-12) throw InferenceError("nuts: step size search diverged");
      }
    }
  };

  PosteriorSamples run_chain(const Model& shared_model, std::span<const double> init, std::size_t chain) const {
    const std::size_t dim = space_.dim();
    Rng rng = make_rng(config_.seed, config_.stream, chain);
    std::normal_distribution<double> normal(0.0, 1.0);
    Model model = shared_model;

    Chain ch{*this, model, rng, std::vector<double>(dim, 1.0), 0.1, std::vector<double>(dim), std::vector<double>(dim),
             0, 0.0, false, 0.0, {}};
    detail::PhasePoint z;
    z.z.resize(dim);
    z.p.assign(dim, 0.0);
    z.g.assign(dim, 0.0);
    std::vector<double> z0(dim);
    for (std::size_t i = 0; i < dim; ++i) z0[i] = space_.coordinate(i).support.unconstrain(init[i]);
    bool placed = false;
    if (config_.init_jitter > 0.0) {
      for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
        for (std::size_t i = 0; i < dim; ++i) z.z[i] = z0[i] + config_.init_jitter * space_.coordinate(i).init_scale * normal(rng);
        ch.evaluate(z);
        placed = std::isfinite(z.lp);
      }
    }
    if (!placed) {
      z.z = z0;
      ch.evaluate(z);
    }
    ch.init_step_size(z);

    detail::DualAveraging da;
    da.delta = nuts_.target_accept;
    da.restart(ch.eps);

    // Window schedule for metric adaptation.
    const std::size_t warmup = config_.warmup;
    std::size_t init_buffer = nuts_.init_buffer, term_buffer = nuts_.term_buffer, base = nuts_.base_window;
    const bool adapt_metric = warmup >= 20;
    if (adapt_metric && init_buffer + base + term_buffer > warmup) {
      init_buffer = static_cast<std::size_t>(0.15 * static_cast<double>(warmup));
      term_buffer = static_cast<std::size_t>(0.1 * static_cast<double>(warmup));
      base = warmup - init_buffer - term_buffer;
    }
    std::size_t window_size = base;
    std::size_t window_end = init_buffer + window_size;
    if (window_end + 2 * window_size > warmup - term_buffer) window_end = warmup - term_buffer;
    std::size_t wn = 0;
    std::vector<double> wmean(dim, 0.0), wm2(dim, 0.0);

    const std::size_t total = warmup + config_.draws * config_.thin;
    PosteriorSamples out(column_names(model));
    std::vector<double> row, x(dim);
    std::size_t recorded = 0, divergences = 0;
    double accept_sum = 0.0, leapfrog_sum = 0.0;

    for (std::size_t iter = 0; iter < total; ++iter) {
      const double stat = ch.transition(z);
      if (iter < warmup) {
        ch.eps = da.learn(stat);
        if (adapt_metric && iter >= init_buffer && iter < warmup - term_buffer) {
          ++wn;
          for (std::size_t i = 0; i < dim; ++i) {
            const double dlt = z.z[i] - wmean[i];
            wmean[i] += dlt / static_cast<double>(wn);
            wm2[i] += dlt * (z.z[i] - wmean[i]);
          }
          if (iter + 1 == window_end) {
            const double n = static_cast<double>(wn);
            for (std::size_t i = 0; i < dim; ++i) {
              const double var = wn > 1 ? wm2[i] / (n - 1.0) : 1.0;
              ch.inv_metric[i] = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0));
            }
            wn = 0;
            std::fill(wmean.begin(), wmean.end(), 0.0);
            std::fill(wm2.begin(), wm2.end(), 0.0);
            ch.init_step_size(z);
            da.restart(ch.eps);
            window_size *= 2;
            window_end = iter + 1 + window_size;
            if (window_end + 2 * window_size > warmup - term_buffer) window_end = warmup - term_buffer;
          }
        }
        if (iter + 1 == warmup) ch.eps = da.final_step();
      } else {
        accept_sum += stat;
        leapfrog_sum += static_cast<double>(ch.n_leapfrog);
        if (ch.divergent) ++divergences;
        const std::size_t k = iter - warmup;
        if (k % config_.thin == 0) {
          for (std::size_t i = 0; i < dim; ++i) x[i] = space_.coordinate(i).support.constrain(z.z[i]);
          row.assign(x.begin(), x.end());
          if constexpr (GeneratesQuantities<Model>) {
            auto g = model.generated(x);
            row.insert(row.end(), g.begin(), g.end());
          }
          out.add_draw(chain, recorded++, row);
        }
      }
    }
    MoveStats ms{"nuts", chain, accept_sum / static_cast<double>(config_.draws * config_.thin), ch.eps};
    ms.divergences = divergences;
    ms.mean_leapfrogs = leapfrog_sum / static_cast<double>(config_.draws * config_.thin);
    out.meta().push_back(ms);
    return out;
  }

  std::vector<std::string> column_names(const Model& model) const {
    auto names = space_.names();
    if constexpr (GeneratesQuantities<Model>) {
      auto extra = model.generated_names();
      names.insert(names.end(), extra.begin(), extra.end());
    }
    return names;
  }

  ParameterSpace space_;
  SamplerConfig config_;
  NutsConfig nuts_;
};

/// Adapts a pair of callables (log density, log density with gradient) to GradientModel.
template <class F, class G>
struct FunctionGradientModel {
  F f;
  G g;
  double log_density(std::span<const double> x) const { return f(x); }
  double log_density_gradient(std::span<const double> x, std::span<double> grad) const { return g(x, grad); }
};

/// Samples with NUTS given `lpg(x, grad) -> log density` over `space`.
template <class G>
PosteriorSamples sample_nuts(G&& lpg, const ParameterSpace& space, std::span<const double> init,
                             const SamplerConfig& config, const NutsConfig& nuts = {}) {
  using Gn = std::decay_t<G>;
  auto f = [lpg](std::span<const double> x) {
    std::vector<double> g(x.size());
    return lpg(x, std::span<double>(g));
  };
  using Fn = decltype(f);
  FunctionGradientModel<Fn, Gn> model{f, std::forward<G>(lpg)};
  NutsSampler<FunctionGradientModel<Fn, Gn>> sampler(space, config, nuts);
  return sampler.run(model, init);
}

}  // namespace navunc::mcmc
