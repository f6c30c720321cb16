// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "navunc/error.hpp"
#include "navunc/geo.hpp"

namespace navunc::mcmc {

/// Support of one scalar coordinate and the bijection the sampler uses to move on it.
struct Support {
  enum class Kind { unbounded, positive, interval, circular };

  Kind kind = Kind::unbounded;
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();

  static Support unbounded() { return {}; }
  static Support positive() { return {Kind::positive, 0.0, std::numeric_limits<double>::infinity()}; }
  static Support interval(double a, double b) {
    if (!(a < b)) throw ConfigError("interval support needs lo < hi");
    return {Kind::interval, a, b};
  }
  /// Angles in (-pi, pi].
  static Support circular() { return {Kind::circular, -kPi, kPi}; }

  bool contains(double x) const {
    if (!std::isfinite(x)) return false;
    switch (kind) {
      case Kind::unbounded: return true;
      case Kind::positive: return x > 0.0;
      case Kind::interval: return x > lo && x < hi;
      case Kind::circular: return x > -kPi && x <= kPi;
    }
    return false;
  }

  /// Unconstrained value -> support.
  double constrain(double z) const {
    switch (kind) {
      case Kind::unbounded: return z;
      case Kind::positive: return std::exp(z);
      case Kind::interval: {
        const double s = 1.0 / (1.0 + std::exp(-z));
        return lo + (hi - lo) * s;
      }
      case Kind::circular: return wrap_angle(z);
    }
    return z;
  }

  double unconstrain(double x) const {
    switch (kind) {
      case Kind::unbounded: return x;
      case Kind::positive: return std::log(x);
      case Kind::interval: {
        const double u = (x - lo) / (hi - lo);
        return std::log(u) - std::log1p(-u);
      }
      case Kind::circular: return wrap_angle(x);
    }
    return x;
  }

  /// log |dx/dz|.
  double log_jacobian(double z) const {
    switch (kind) {
      case Kind::unbounded:
      case Kind::circular: return 0.0;
      case Kind::positive: return z;
      case Kind::interval: {
        // log(hi-lo) + log s + log(1-s), written to stay finite for large |z|.
        const double a = std::abs(z);
        return std::log(hi - lo) - a - 2.0 * std::log1p(std::exp(-a));
      }
    }
    return 0.0;
  }

  /// dx/dz.
  double dconstrain(double z) const {
    switch (kind) {
      case Kind::unbounded:
      case Kind::circular: return 1.0;
      case Kind::positive: return std::exp(z);
      case Kind::interval: {
        const double s = 1.0 / (1.0 + std::exp(-z));
        return (hi - lo) * s * (1.0 - s);
      }
    }
    return 1.0;
  }

  /// d log|dx/dz| / dz.
  double dlog_jacobian(double z) const {
    switch (kind) {
      case Kind::unbounded:
      case Kind::circular: return 0.0;
      case Kind::positive: return 1.0;
      case Kind::interval: return 1.0 - 2.0 / (1.0 + std::exp(-z));
    }
    return 0.0;
  }
};

struct Coordinate {
  std::string name;
  Support support;
  double init_scale = 0.1;  // initial proposal sd on the unconstrained scale
};

struct Block {
  std::string name;
  std::vector<std::size_t> coords;
};

/// Named groups of scalar coordinates. Every coordinate belongs to exactly one block and
/// coordinate names are unique.
class ParameterSpace {
public:
  std::size_t add_block(std::string name, std::vector<Coordinate> coords) {
    if (coords.empty()) throw ConfigError("block '" + name + "' has no coordinates");
    Block b{std::move(name), {}};
    for (auto& c : coords) {
      if (index_.count(c.name)) throw ConfigError("duplicate coordinate name '" + c.name + "'");
      index_.emplace(c.name, coords_.size());
      b.coords.push_back(coords_.size());
      coords_.push_back(std::move(c));
    }
    blocks_.push_back(std::move(b));
    return blocks_.size() - 1;
  }

  std::size_t dim() const { return coords_.size(); }
  const std::vector<Coordinate>& coordinates() const { return coords_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  const Coordinate& coordinate(std::size_t i) const { return coords_[i]; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown coordinate '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(coords_.size());
    for (const auto& c : coords_) out.push_back(c.name);
    return out;
  }

private:
  std::vector<Coordinate> coords_;
  std::vector<Block> blocks_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace navunc::mcmc
