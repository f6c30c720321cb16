// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "navunc/error.hpp"
#include "navunc/forward.hpp"
#include "navunc/hier.hpp"
#include "navunc/lincheck.hpp"
#include "navunc/rng.hpp"
#include "navunc/ssm.hpp"
#include "navunc/sst.hpp"
#include "navunc/synth.hpp"
#include "navunc/tracks.hpp"

namespace navunc::cli {

using nlohmann::json;

struct TrackStageConfig {
  double max_gap_hours = 12.0;
  std::size_t min_reports = 10;
  double fix_threshold_km = 7.0;
  ClassifyConfig classify;
};

struct SynthStageConfig {
  SynthConfig synth;
  std::size_t n_hq2 = 20, n_lq4 = 5, n_static = 2;
};

struct ForwardStageConfig {
  std::vector<double> p_fix{1.0, 0.5, 0.0};
  std::size_t n_ensemble = 1000;
};

struct SstStageConfig {
  double map_res_deg = 2.0;
  PropagateConfig propagate;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string tracks_path, grid_path, manifest_path;
  TrackStageConfig tracks;
  SynthStageConfig synth;
  SsmConfig ssm;
  HierConfig hier;
  ForwardStageConfig forward;
  SstStageConfig sst;
  LincheckConfig lincheck;
  std::size_t n_replicates = 1000;

  json effective;    // merged JSON, every key present
  std::string hash;  // over `effective` without "paths"
};

namespace detail {

inline json sampler_json(const mcmc::SamplerConfig& s) {
  return {{"chains", s.chains}, {"warmup", s.warmup}, {"draws", s.draws}, {"thin", s.thin},
          {"init_jitter", s.init_jitter}};
}

inline json nuts_json(const mcmc::NutsConfig& n) {
  return {{"target_accept", n.target_accept}, {"max_depth", n.max_depth}};
}

inline json default_config_json() {
  const RunConfig d;
  const auto& c = d.tracks.classify;
  const auto& sy = d.synth.synth;
  const auto& tr = sy.truth;
  const auto& sp = d.ssm.priors;
  const auto& hp = d.hier.priors;
  return {
      {"seed", d.seed},
      {"paths", {{"tracks", ""}, {"grid", ""}, {"manifest", ""}}},
      {"tracks",
       {{"max_gap_hours", d.tracks.max_gap_hours},
        {"min_reports", d.tracks.min_reports},
        {"fix_threshold_km", d.tracks.fix_threshold_km},
        {"classify",
         {{"static_speed_kmh", c.static_speed_kmh},
          {"static_fraction", c.static_fraction},
          {"static_jump_km", c.static_jump_km},
          {"hq2_max_cadence_hours", c.hq2_max_cadence_hours},
          {"hq2_min_fix_rate", c.hq2_min_fix_rate},
          {"hq2_max_fix_rate", c.hq2_max_fix_rate},
          {"lq4_max_cadence_hours", c.lq4_max_cadence_hours},
          {"lq4_max_fix_rate", c.lq4_max_fix_rate}}}}},
      {"synth",
       {{"n_hq2", d.synth.n_hq2},
        {"n_lq4", d.synth.n_lq4},
        {"n_static", d.synth.n_static},
        {"steps", sy.steps},
        {"step_hours", sy.step_hours},
        {"fix_probability", sy.fix_probability},
        {"tau_log_sd", sy.tau_log_sd},
        {"start_lat_abs_max", sy.start_lat_abs_max},
        {"start_lon_min", sy.start_lon_min},
        {"start_lon_max", sy.start_lon_max},
        {"lq4_days", sy.lq4_days},
        {"lq4_speed", sy.lq4_speed},
        {"lq4_heading_sd", sy.lq4_heading_sd},
        {"static_steps", sy.static_steps},
        {"static_run", sy.static_run},
        {"static_jump_km", sy.static_jump_km},
        {"truth",
         {{"mu_s", tr.mu_s},
          {"alpha_s", tr.alpha_s},
          {"sigma_s", tr.sigma_s},
          {"sigma_theta", tr.sigma_theta},
          {"tau_x", tr.tau_x},
          {"tau_y", tr.tau_y},
          {"tau_s", tr.tau_s},
          {"tau_theta", tr.tau_theta},
          {"beta_sd", tr.beta_sd}}}}},
      {"ssm",
       {{"kernel", "nuts"},
        {"sampler", sampler_json(d.ssm.sampler)},
        {"nuts", nuts_json(d.ssm.nuts)},
        {"speed_noncentred", d.ssm.speed_noncentred},
        {"heading_noncentred", d.ssm.heading_noncentred},
        {"priors",
         {{"tau_xy_scale", sp.tau_xy_scale},
          {"tau_s_scale", sp.tau_s_scale},
          {"tau_theta_scale", sp.tau_theta_scale},
          {"sigma_s_scale", sp.sigma_s_scale},
          {"sigma_theta_scale", sp.sigma_theta_scale},
          {"mu_s_mean", nullptr},
          {"mu_s_sd", sp.mu_s_sd}}}}},
      {"hier",
       {{"sampler", sampler_json(d.hier.sampler)},
        {"nuts", nuts_json(d.hier.nuts)},
        {"min_draws_per_track", d.hier.min_draws_per_track},
        {"max_draws_per_track", d.hier.max_draws_per_track},
        {"priors",
         {{"prior_median",
           {{"tau_x", hp.prior_median[0]},
            {"tau_y", hp.prior_median[1]},
            {"tau_s", hp.prior_median[2]},
            {"tau_theta", hp.prior_median[3]}}},
          {"log_mu_sd", hp.log_mu_sd},
          {"gamma_scale", hp.gamma_scale},
          {"eta_scale", hp.eta_scale}}}}},
      {"forward", {{"p_fix", d.forward.p_fix}, {"n_ensemble", d.forward.n_ensemble}}},
      {"sst",
       {{"map_res_deg", d.sst.map_res_deg},
        {"min_draws", d.sst.propagate.min_draws},
        {"flag_missing_fraction", d.sst.propagate.flag_missing_fraction}}},
      {"lincheck",
       {{"bin_km", d.lincheck.bin_km},
        {"regressor", "mean"},
        {"sampler", sampler_json(d.lincheck.sampler)},
        {"nuts", nuts_json(d.lincheck.nuts)}}},
      {"ppc", {{"n_replicates", d.n_replicates}}},
  };
}

inline const char* type_label(const json& j) {
  if (j.is_number_float()) return "number";
  if (j.is_number()) return "integer";
  if (j.is_boolean()) return "boolean";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

/// Overlays `user` on `base`. Unknown keys and type changes are config errors; integers
/// given for real-valued settings are stored as reals so the hash does not depend on
/// how a number was spelled.
inline void merge_strict(json& base, const json& user, const std::string& where) {
  if (!user.is_object()) throw ConfigError("config" + where + ": expected an object");
  for (const auto& [key, v] : user.items()) {
    const std::string path = where + "." + key;
    if (!base.contains(key)) throw ConfigError("config: unknown key " + path.substr(1));
    json& b = base[key];
    if (b.is_object()) {
      merge_strict(b, v, path);
    } else if (b.is_null()) {
      if (!v.is_null() && !v.is_number()) throw ConfigError("config: " + path.substr(1) + " must be a number or null");
      b = v.is_null() ? json(nullptr) : json(v.get<double>());
    } else if (b.is_number_float()) {
      if (!v.is_number()) throw ConfigError("config: " + path.substr(1) + " must be a number");
      b = v.get<double>();
    } else if (b.is_number()) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
        throw ConfigError("config: " + path.substr(1) + " must be a non-negative integer");
      b = v.get<std::uint64_t>();
    } else if (b.is_array()) {
      if (!v.is_array()) throw ConfigError("config: " + path.substr(1) + " must be an array");
      json arr = json::array();
      for (const auto& e : v) {
        if (!e.is_number()) throw ConfigError("config: " + path.substr(1) + " must hold numbers");
        arr.push_back(e.get<double>());
      }
      b = std::move(arr);
    } else if (std::string(type_label(b)) != type_label(v)) {
      throw ConfigError("config: " + path.substr(1) + " must be a " + type_label(b));
    } else {
      b = v;
    }
  }
}

inline void read_sampler(const json& j, mcmc::SamplerConfig& s, const char* what) {
  s.chains = j.at("chains").get<std::size_t>();
  s.warmup = j.at("warmup").get<std::size_t>();
  s.draws = j.at("draws").get<std::size_t>();
  s.thin = j.at("thin").get<std::size_t>();
  s.init_jitter = j.at("init_jitter").get<double>();
  if (s.chains == 0 || s.draws == 0 || s.thin == 0)
    throw ConfigError(std::string("config: ") + what + ".sampler needs positive chains, draws and thin");
}

inline void read_nuts(const json& j, mcmc::NutsConfig& n, const char* what) {
  n.target_accept = j.at("target_accept").get<double>();
  n.max_depth = j.at("max_depth").get<std::size_t>();
  if (!(n.target_accept > 0.0 && n.target_accept < 1.0) || n.max_depth == 0)
    throw ConfigError(std::string("config: ") + what + ".nuts needs target_accept in (0, 1) and max_depth > 0");
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("config: " + msg);
}

}  // namespace detail

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Builds the run configuration from an optional user JSON (partial; missing keys keep
/// their defaults) and an optional seed override.
inline RunConfig make_run_config(const json& user, std::optional<std::uint64_t> seed_override = std::nullopt) {
  json e = detail::default_config_json();
  if (!user.is_null()) detail::merge_strict(e, user, "");
  if (seed_override) e["seed"] = *seed_override;

  RunConfig c;
  c.effective = e;
  c.seed = e["seed"].get<std::uint64_t>();
  c.tracks_path = e["paths"]["tracks"].get<std::string>();
  c.grid_path = e["paths"]["grid"].get<std::string>();
  c.manifest_path = e["paths"]["manifest"].get<std::string>();

  const json& t = e["tracks"];
  c.tracks.max_gap_hours = t["max_gap_hours"].get<double>();
  c.tracks.min_reports = t["min_reports"].get<std::size_t>();
  c.tracks.fix_threshold_km = t["fix_threshold_km"].get<double>();
  const json& cl = t["classify"];
  auto& cc = c.tracks.classify;
  cc.static_speed_kmh = cl["static_speed_kmh"].get<double>();
  cc.static_fraction = cl["static_fraction"].get<double>();
  cc.static_jump_km = cl["static_jump_km"].get<double>();
  cc.hq2_max_cadence_hours = cl["hq2_max_cadence_hours"].get<double>();
  cc.hq2_min_fix_rate = cl["hq2_min_fix_rate"].get<double>();
  cc.hq2_max_fix_rate = cl["hq2_max_fix_rate"].get<double>();
  cc.lq4_max_cadence_hours = cl["lq4_max_cadence_hours"].get<double>();
  cc.lq4_max_fix_rate = cl["lq4_max_fix_rate"].get<double>();
  detail::require(c.tracks.max_gap_hours > 0.0, "tracks.max_gap_hours must be positive");
  detail::require(c.tracks.fix_threshold_km > 0.0, "tracks.fix_threshold_km must be positive");

  const json& s = e["synth"];
  auto& sy = c.synth.synth;
  c.synth.n_hq2 = s["n_hq2"].get<std::size_t>();
  c.synth.n_lq4 = s["n_lq4"].get<std::size_t>();
  c.synth.n_static = s["n_static"].get<std::size_t>();
  sy.steps = s["steps"].get<std::size_t>();
  sy.step_hours = s["step_hours"].get<double>();
  sy.fix_probability = s["fix_probability"].get<double>();
  sy.tau_log_sd = s["tau_log_sd"].get<double>();
  sy.start_lat_abs_max = s["start_lat_abs_max"].get<double>();
  sy.start_lon_min = s["start_lon_min"].get<double>();
  sy.start_lon_max = s["start_lon_max"].get<double>();
  sy.lq4_days = s["lq4_days"].get<std::size_t>();
  sy.lq4_speed = s["lq4_speed"].get<double>();
  sy.lq4_heading_sd = s["lq4_heading_sd"].get<double>();
  sy.static_steps = s["static_steps"].get<std::size_t>();
  sy.static_run = s["static_run"].get<std::size_t>();
  sy.static_jump_km = s["static_jump_km"].get<double>();
  const json& tr = s["truth"];
  auto& g = sy.truth;
  g.mu_s = tr["mu_s"].get<double>();
  g.alpha_s = tr["alpha_s"].get<double>();
  g.sigma_s = tr["sigma_s"].get<double>();
  g.sigma_theta = tr["sigma_theta"].get<double>();
  g.tau_x = tr["tau_x"].get<double>();
  g.tau_y = tr["tau_y"].get<double>();
  g.tau_s = tr["tau_s"].get<double>();
  g.tau_theta = tr["tau_theta"].get<double>();
  g.beta_sd = tr["beta_sd"].get<double>();
  detail::require(sy.steps >= 2, "synth.steps must be at least 2");
  detail::require(sy.step_hours > 0.0, "synth.step_hours must be positive");
  detail::require(sy.fix_probability >= 0.0 && sy.fix_probability <= 1.0, "synth.fix_probability must lie in [0, 1]");
  detail::require(g.alpha_s > -1.0 && g.alpha_s < 1.0, "synth.truth.alpha_s must lie in (-1, 1)");
  for (double v : {g.sigma_s, g.sigma_theta, g.tau_x, g.tau_y, g.tau_s, g.tau_theta, g.beta_sd, sy.tau_log_sd})
    detail::require(v >= 0.0, "synth noise scales must be non-negative");

  const json& m = e["ssm"];
  const auto kernel = m["kernel"].get<std::string>();
  if (kernel == "nuts")
    c.ssm.kernel = SsmKernel::nuts;
  else if (kernel == "random_walk")
    c.ssm.kernel = SsmKernel::random_walk;
  else
    throw ConfigError("config: ssm.kernel must be \"nuts\" or \"random_walk\"");
  detail::read_sampler(m["sampler"], c.ssm.sampler, "ssm");
  detail::read_nuts(m["nuts"], c.ssm.nuts, "ssm");
  c.ssm.speed_noncentred = m["speed_noncentred"].get<bool>();
  c.ssm.heading_noncentred = m["heading_noncentred"].get<bool>();
  const json& mp = m["priors"];
  auto& sp = c.ssm.priors;
  sp.tau_xy_scale = mp["tau_xy_scale"].get<double>();
  sp.tau_s_scale = mp["tau_s_scale"].get<double>();
  sp.tau_theta_scale = mp["tau_theta_scale"].get<double>();
  sp.sigma_s_scale = mp["sigma_s_scale"].get<double>();
  sp.sigma_theta_scale = mp["sigma_theta_scale"].get<double>();
  if (!mp["mu_s_mean"].is_null()) sp.mu_s_mean = mp["mu_s_mean"].get<double>();
  sp.mu_s_sd = mp["mu_s_sd"].get<double>();
  for (double v : {sp.tau_xy_scale, sp.tau_s_scale, sp.tau_theta_scale, sp.sigma_s_scale, sp.sigma_theta_scale, sp.mu_s_sd})
    detail::require(v > 0.0, "ssm.priors scales must be positive");
  c.ssm.sampler.seed = c.seed;

  const json& h = e["hier"];
  detail::read_sampler(h["sampler"], c.hier.sampler, "hier");
  detail::read_nuts(h["nuts"], c.hier.nuts, "hier");
  c.hier.min_draws_per_track = h["min_draws_per_track"].get<std::size_t>();
  c.hier.max_draws_per_track = h["max_draws_per_track"].get<std::size_t>();
  const json& hp = h["priors"];
  c.hier.priors.prior_median = {hp["prior_median"]["tau_x"].get<double>(), hp["prior_median"]["tau_y"].get<double>(),
                                hp["prior_median"]["tau_s"].get<double>(), hp["prior_median"]["tau_theta"].get<double>()};
  c.hier.priors.log_mu_sd = hp["log_mu_sd"].get<double>();
  c.hier.priors.gamma_scale = hp["gamma_scale"].get<double>();
  c.hier.priors.eta_scale = hp["eta_scale"].get<double>();
  for (double v : c.hier.priors.prior_median) detail::require(v > 0.0, "hier.priors.prior_median must be positive");
  detail::require(c.hier.priors.log_mu_sd > 0.0 && c.hier.priors.gamma_scale > 0.0 && c.hier.priors.eta_scale > 0.0,
                  "hier.priors scales must be positive");
  detail::require(c.hier.max_draws_per_track >= c.hier.min_draws_per_track,
                  "hier.max_draws_per_track must not be below min_draws_per_track");
  c.hier.sampler.seed = c.seed;

  const json& f = e["forward"];
  c.forward.p_fix = f["p_fix"].get<std::vector<double>>();
  c.forward.n_ensemble = f["n_ensemble"].get<std::size_t>();
  detail::require(!c.forward.p_fix.empty(), "forward.p_fix must not be empty");
  for (double p : c.forward.p_fix) detail::require(p >= 0.0 && p <= 1.0, "forward.p_fix values must lie in [0, 1]");
  detail::require(c.forward.n_ensemble > 0, "forward.n_ensemble must be positive");

  const json& st = e["sst"];
  c.sst.map_res_deg = st["map_res_deg"].get<double>();
  c.sst.propagate.min_draws = st["min_draws"].get<std::size_t>();
  c.sst.propagate.flag_missing_fraction = st["flag_missing_fraction"].get<double>();
  detail::require(c.sst.map_res_deg > 0.0, "sst.map_res_deg must be positive");

  const json& l = e["lincheck"];
  c.lincheck.bin_km = l["bin_km"].get<double>();
  const auto reg = l["regressor"].get<std::string>();
  if (reg == "mean")
    c.lincheck.regressor = Regressor::mean;
  else if (reg == "median")
    c.lincheck.regressor = Regressor::median;
  else
    throw ConfigError("config: lincheck.regressor must be \"mean\" or \"median\"");
  detail::read_sampler(l["sampler"], c.lincheck.sampler, "lincheck");
  detail::read_nuts(l["nuts"], c.lincheck.nuts, "lincheck");
  detail::require(c.lincheck.bin_km > 0.0, "lincheck.bin_km must be positive");
  c.lincheck.sampler.seed = c.seed;

  c.n_replicates = e["ppc"]["n_replicates"].get<std::size_t>();
  detail::require(c.n_replicates > 0, "ppc.n_replicates must be positive");

  json hashed = e;
  hashed.erase("paths");
  c.hash = hash_hex(fnv1a(hashed.dump()));
  return c;
}

inline RunConfig load_run_config(const std::string& path, std::optional<std::uint64_t> seed_override = std::nullopt) {
  if (path.empty()) return make_run_config(json(), seed_override);
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json user;
  try {
    user = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  return make_run_config(user, seed_override);
}

}  // namespace navunc::cli
