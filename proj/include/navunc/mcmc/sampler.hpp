// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "navunc/error.hpp"
#include "navunc/mcmc/samples.hpp"
#include "navunc/mcmc/space.hpp"
#include "navunc/rng.hpp"

namespace navunc::mcmc {

/// A group of coordinates proposed jointly. Moves may overlap (e.g. sliding windows
/// built from adjacent blocks); by default there is one move per block. A move with a
/// `direction` proposes a single scalar step along that fixed unconstrained-space vector
/// (one entry per coordinate), starting from step size `scale`.
struct Move {
  std::string name;
  std::vector<std::size_t> coords;
  std::vector<double> direction = {};
  double scale = 0.1;
};

struct SamplerConfig {
  std::size_t chains = 4;
  std::size_t warmup = 1000;
  std::size_t draws = 1000;  // recorded per chain
  std::size_t thin = 1;
  std::uint64_t seed = 1;
  std::string stream = "mcmc";
  double init_jitter = 1.0;  // in units of each coordinate's init_scale
  bool parallel_chains = false;
};

/// Any model exposing the full log density of the constrained coordinate vector.
template <class M>
concept LogDensityModel = requires(const M& m, std::span<const double> x) {
  { m.log_density(x) } -> std::convertible_to<double>;
};

/// Models that keep cached state and can score a move in time proportional to the
/// move's footprint. `log_density_delta` returns log p(proposed) - log p(current) where
/// the two vectors differ only on `coords`; `commit` makes `proposed` current.
template <class M>
concept IncrementalModel = LogDensityModel<M> &&
    requires(M& m, std::span<const double> x, std::span<const std::size_t> coords) {
  m.reset(x);
  { m.log_density_delta(coords, x, x) } -> std::convertible_to<double>;
  m.commit(coords, x);
};

/// Models that append derived quantities to every recorded draw.
template <class M>
concept GeneratesQuantities = requires(const M& m, std::span<const double> x) {
  { m.generated_names() } -> std::convertible_to<std::vector<std::string>>;
  { m.generated(x) } -> std::convertible_to<std::vector<double>>;
};

/// Adapts a callable `double(std::span<const double>)` to LogDensityModel.
template <class F>
struct FunctionModel {
  F f;
  double log_density(std::span<const double> x) const { return f(x); }
};
template <class F>
FunctionModel(F) -> FunctionModel<F>;

namespace detail {

struct MoveState {
  std::vector<std::size_t> coords;
  std::vector<double> direction;
  Eigen::MatrixXd chol;  // lower Cholesky factor of the proposal covariance
  double log_scale = 0.0;
  double target = 0.44;
  std::size_t accepted = 0;
  std::size_t tried = 0;
  std::size_t adapt_count = 0;
  // Running moments of the unconstrained block for covariance learning.
  std::size_t n = 0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd m2;
};

inline std::string describe(const ParameterSpace& space, std::span<const std::size_t> coords,
                            std::span<const double> x) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t k = 0; k < coords.size(); ++k) {
    if (k) os << ", ";
    os << space.coordinate(coords[k]).name << '=' << x[coords[k]];
  }
  return os.str();
}

}  // namespace detail

/// Blocked adaptive random-walk Metropolis.
///
/// Every move is proposed on the unconstrained scale (log for positive supports, logit
/// for intervals, identity for unbounded and circular coordinates, the latter wrapped
/// back into (-pi, pi]) with the Jacobian folded into the acceptance ratio. During
/// warmup each move learns a proposal covariance from its own history and tunes a
/// Robbins-Monro scale towards 0.44 acceptance (single coordinate) or 0.234
/// (several); the kernel is frozen for the recorded phase. Chains use independent
/// substreams of `config.seed`, so results are reproducible bit for bit.
template <LogDensityModel Model>
class Sampler {
public:
  Sampler(ParameterSpace space, SamplerConfig config, std::vector<Move> moves = {})
      : space_(std::move(space)), config_(std::move(config)), moves_(std::move(moves)) {
    if (config_.chains == 0 || config_.draws == 0 || config_.thin == 0)
      throw ConfigError("sampler: chains, draws and thin must be positive");
    if (moves_.empty())
      for (const auto& b : space_.blocks()) moves_.push_back(Move{b.name, b.coords});
    for (const auto& m : moves_) {
      for (auto c : m.coords)
        if (c >= space_.dim()) throw ConfigError("move '" + m.name + "' references a missing coordinate");
      if (!m.direction.empty() && m.direction.size() != m.coords.size())
        throw ConfigError("move '" + m.name + "': direction length differs from coordinate count");
    }
  }

  const ParameterSpace& space() const { return space_; }
  const SamplerConfig& config() const { return config_; }
  const std::vector<Move>& moves() const { return moves_; }

  PosteriorSamples run(const Model& model, std::span<const double> init) const {
    if (init.size() != space_.dim()) throw InferenceError("initial vector has wrong dimension");
    for (std::size_t i = 0; i < init.size(); ++i)
      if (!space_.coordinate(i).support.contains(init[i]))
        throw InferenceError("initial value outside support: " + space_.coordinate(i).name);
    {
      const double lp = model.log_density(init);
      if (std::isnan(lp)) throw InferenceError("log density is NaN at the initial point");
      if (lp == -std::numeric_limits<double>::infinity())
        throw InferenceError("log density is -inf at the initial point");
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
  std::vector<std::string> column_names(const Model& model) const {
    auto names = space_.names();
    if constexpr (GeneratesQuantities<Model>) {
      auto extra = model.generated_names();
      names.insert(names.end(), extra.begin(), extra.end());
    }
    return names;
  }

  PosteriorSamples run_chain(const Model& shared_model, std::span<const double> init, std::size_t chain) const {
    const std::size_t dim = space_.dim();
    Rng rng = make_rng(config_.seed, config_.stream, chain);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Model model = shared_model;

    // Unconstrained start, jittered per chain.
    std::vector<double> z0(dim), z(dim), x(dim);
    for (std::size_t i = 0; i < dim; ++i) z0[i] = space_.coordinate(i).support.unconstrain(init[i]);
    bool placed = false;
    if (config_.init_jitter > 0.0) {
      for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
        for (std::size_t i = 0; i < dim; ++i) {
          const auto& c = space_.coordinate(i);
          z[i] = z0[i] + config_.init_jitter * c.init_scale * normal(rng);
          if (c.support.kind == Support::Kind::circular) z[i] = wrap_angle(z[i]);
          x[i] = c.support.constrain(z[i]);
        }
        const double lp = model.log_density(x);
        placed = std::isfinite(lp) && valid(x);
      }
    }
    if (!placed) {
      z = z0;
      for (std::size_t i = 0; i < dim; ++i) x[i] = space_.coordinate(i).support.constrain(z[i]);
    }

    double lp_model = 0.0;
    if constexpr (IncrementalModel<Model>)
      model.reset(x);
    else
      lp_model = model.log_density(x);

    std::vector<detail::MoveState> states;
    states.reserve(moves_.size());
    for (const auto& m : moves_) {
      detail::MoveState s;
      s.coords = m.coords;
      s.direction = m.direction;
      const auto d = static_cast<Eigen::Index>(m.coords.size());
      s.chol = Eigen::MatrixXd::Zero(d, d);
      if (s.direction.empty()) {
        for (Eigen::Index k = 0; k < d; ++k) s.chol(k, k) = space_.coordinate(m.coords[k]).init_scale;
      } else {
        for (Eigen::Index k = 0; k < d; ++k) s.chol(k, 0) = m.scale * s.direction[static_cast<std::size_t>(k)];
      }
      s.target = (d == 1 || !s.direction.empty()) ? 0.44 : 0.234;
      s.mean = Eigen::VectorXd::Zero(d);
      s.m2 = Eigen::MatrixXd::Zero(d, d);
      states.push_back(std::move(s));
    }

    const std::size_t warmup = config_.warmup;
    const std::size_t total = warmup + config_.draws * config_.thin;
    // Covariance refits at these warmup iterations, each from the history since the last one.
    const std::vector<std::size_t> refits = {warmup / 5, (2 * warmup) / 5, (7 * warmup) / 10};

    PosteriorSamples out(column_names(model));
    std::vector<double> xp = x;  // proposal scratch, kept equal to x between moves
    std::vector<double> zp_block, eps;
    std::vector<double> row;
    std::size_t recorded = 0;

    for (std::size_t iter = 0; iter < total; ++iter) {
      const bool warming = iter < warmup;
      for (auto& s : states) {
        const std::size_t d = s.coords.size();
        eps.resize(d);
        zp_block.resize(d);
        if (s.direction.empty()) {
          for (std::size_t k = 0; k < d; ++k) eps[k] = normal(rng);
        } else {
          std::fill(eps.begin(), eps.end(), 0.0);
          eps[0] = normal(rng);
        }
        const double scale = std::exp(s.log_scale);
        double log_jac = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          double step = 0.0;
          for (std::size_t j = 0; j <= k; ++j) step += s.chol(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) * eps[j];
          const std::size_t c = s.coords[k];
          const auto& sup = space_.coordinate(c).support;
          double zn = z[c] + scale * step;
          if (sup.kind == Support::Kind::circular) zn = wrap_angle(zn);
          zp_block[k] = zn;
          xp[c] = sup.constrain(zn);
          log_jac += sup.log_jacobian(zn) - sup.log_jacobian(z[c]);
        }

        double delta;
        double lp_prop = 0.0;
        if (!valid_block(xp, s.coords)) {
          delta = -std::numeric_limits<double>::infinity();
        } else if constexpr (IncrementalModel<Model>) {
          delta = model.log_density_delta(s.coords, x, xp);
        } else {
          lp_prop = model.log_density(xp);
          delta = lp_prop - lp_model;
        }
        if (std::isnan(delta))
          throw InferenceError("log density is NaN at proposal: " + detail::describe(space_, s.coords, xp));
        delta += log_jac;

        const double accept_prob = delta >= 0.0 ? 1.0 : std::exp(delta);
        const bool accept = unif(rng) < accept_prob;
        if (accept) {
          if constexpr (IncrementalModel<Model>)
            model.commit(s.coords, xp);
          else
            lp_model = lp_prop;
          for (std::size_t k = 0; k < d; ++k) {
            const std::size_t c = s.coords[k];
            z[c] = zp_block[k];
            x[c] = xp[c];
          }
        } else {
          for (auto c : s.coords) xp[c] = x[c];
        }

        if (warming) {
          ++s.adapt_count;
          const double gamma = std::pow(static_cast<double>(s.adapt_count) + 1.0, -0.6);
          s.log_scale += gamma * (accept_prob - s.target);
          s.log_scale = std::clamp(s.log_scale, -20.0, 10.0);
          if (s.direction.empty()) accumulate(s, z);
        } else {
          ++s.tried;
          if (accept) ++s.accepted;
        }
      }

      if (warming) {
        for (std::size_t r = 0; r < refits.size(); ++r)
          if (iter + 1 == refits[r])
            for (auto& s : states)
              if (s.direction.empty()) refit(s);
      } else {
        const std::size_t k = iter - warmup;
        if (k % config_.thin == 0) {
          row.assign(x.begin(), x.end());
          if constexpr (GeneratesQuantities<Model>) {
            auto g = model.generated(x);
            row.insert(row.end(), g.begin(), g.end());
          }
          out.add_draw(chain, recorded++, row);
        }
      }
    }

    for (std::size_t m = 0; m < states.size(); ++m) {
      const auto& s = states[m];
      out.meta().push_back(MoveStats{moves_[m].name, chain,
                                     s.tried ? static_cast<double>(s.accepted) / static_cast<double>(s.tried) : 0.0,
                                     std::exp(s.log_scale)});
    }
    return out;
  }

  bool valid(std::span<const double> x) const {
    for (std::size_t i = 0; i < x.size(); ++i)
      if (!space_.coordinate(i).support.contains(x[i])) return false;
    return true;
  }
  bool valid_block(std::span<const double> x, const std::vector<std::size_t>& coords) const {
    for (auto c : coords)
      if (!space_.coordinate(c).support.contains(x[c])) return false;
    return true;
  }

  static void accumulate(detail::MoveState& s, const std::vector<double>& z) {
    const auto d = static_cast<Eigen::Index>(s.coords.size());
    Eigen::VectorXd v(d);
    for (Eigen::Index k = 0; k < d; ++k) v(k) = z[s.coords[static_cast<std::size_t>(k)]];
    ++s.n;
    const Eigen::VectorXd delta = v - s.mean;
    s.mean += delta / static_cast<double>(s.n);
    s.m2 += delta * (v - s.mean).transpose();
  }

  static void refit(detail::MoveState& s) {
    const auto d = static_cast<Eigen::Index>(s.coords.size());
    const double n = static_cast<double>(s.n);
    if (s.n >= static_cast<std::size_t>(2 * d + 10)) {
      Eigen::MatrixXd cov = s.m2 / (n - 1.0);
      // Shrink towards a small diagonal so that short or stuck histories stay usable.
      cov = (n / (n + 5.0)) * cov;
      cov.diagonal().array() += 1e-8 * (5.0 / (n + 5.0)) + 1e-12;
      Eigen::LLT<Eigen::MatrixXd> llt(cov);
      if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().allFinite()) {
        s.chol = llt.matrixL();
        s.log_scale = std::log(2.38 / std::sqrt(static_cast<double>(d)));
        s.adapt_count = 0;
      }
    }
    s.n = 0;
    s.mean.setZero();
    s.m2.setZero();
  }

  ParameterSpace space_;
  SamplerConfig config_;
  std::vector<Move> moves_;
};

/// Samples a plain log-density callable over `space`.
template <class F>
PosteriorSamples sample(F&& logdensity, const ParameterSpace& space, std::span<const double> init,
                        const SamplerConfig& config) {
  using Fn = std::decay_t<F>;
  FunctionModel<Fn> model{std::forward<F>(logdensity)};
  Sampler<FunctionModel<Fn>> sampler(space, config);
  return sampler.run(model, init);
}

}  // namespace navunc::mcmc
