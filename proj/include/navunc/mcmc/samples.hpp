// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "navunc/error.hpp"

namespace navunc::mcmc {

/// Per-chain, per-move adaptation summary.
struct MoveStats {
  std::string move;
  std::size_t chain = 0;
  double acceptance = 0.0;  // over the sampling phase
  double step_scale = 0.0;  // final proposal multiplier (leapfrog step size for NUTS)
  std::size_t divergences = 0;
  double mean_leapfrogs = 0.0;  // NUTS only
};

/// Draw x coordinate matrix with chain labels. Draws are stored row-major, chains
/// contiguous and in ascending order.
class PosteriorSamples {
public:
  PosteriorSamples() = default;
  explicit PosteriorSamples(std::vector<std::string> names) : names_(std::move(names)) { reindex(); }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t dim() const { return names_.size(); }
  std::size_t n_draws() const { return chain_.size(); }
  bool empty() const { return chain_.empty(); }

  void add_draw(std::size_t chain, std::size_t draw, std::span<const double> values) {
    if (values.size() != names_.size()) throw InferenceError("draw has wrong dimension");
    chain_.push_back(chain);
    draw_.push_back(draw);
    values_.insert(values_.end(), values.begin(), values.end());
  }

  std::size_t chain(std::size_t i) const { return chain_[i]; }
  std::size_t draw_index(std::size_t i) const { return draw_[i]; }
  std::span<const double> row(std::size_t i) const { return {values_.data() + i * dim(), dim()}; }
  double at(std::size_t i, std::size_t col) const { return values_[i * dim() + col]; }

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("posterior samples: no column '" + name + "'");
    return it->second;
  }

  std::vector<double> column(std::size_t col) const {
    std::vector<double> out(n_draws());
    for (std::size_t i = 0; i < n_draws(); ++i) out[i] = at(i, col);
    return out;
  }
  std::vector<double> column(const std::string& name) const { return column(index_of(name)); }

  std::size_t n_chains() const {
    std::size_t n = 0;
    for (auto c : chain_) n = std::max(n, c + 1);
    return n;
  }

  /// Values of one column split by chain.
  std::vector<std::vector<double>> by_chain(std::size_t col) const {
    std::vector<std::vector<double>> out(n_chains());
    for (std::size_t i = 0; i < n_draws(); ++i) out[chain_[i]].push_back(at(i, col));
    return out;
  }

  /// Appends the draws of another sample set with identical names.
  void append(const PosteriorSamples& o) {
    if (o.names_ != names_) throw InferenceError("cannot merge samples with different coordinates");
    chain_.insert(chain_.end(), o.chain_.begin(), o.chain_.end());
    draw_.insert(draw_.end(), o.draw_.begin(), o.draw_.end());
    values_.insert(values_.end(), o.values_.begin(), o.values_.end());
  }

  std::vector<MoveStats>& meta() { return meta_; }
  const std::vector<MoveStats>& meta() const { return meta_; }

  friend bool operator==(const PosteriorSamples& a, const PosteriorSamples& b) {
    return a.names_ == b.names_ && a.chain_ == b.chain_ && a.draw_ == b.draw_ && a.values_ == b.values_;
  }

private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (!index_.emplace(names_[i], i).second)
        throw DataError("posterior samples: duplicate column '" + names_[i] + "'");
  }

  std::vector<std::string> names_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::size_t> chain_;
  std::vector<std::size_t> draw_;
  std::vector<double> values_;
  std::vector<MoveStats> meta_;
};

}  // namespace navunc::mcmc
