// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "navunc/error.hpp"
#include "navunc/forward.hpp"
#include "navunc/hier.hpp"
#include "navunc/lincheck.hpp"
#include "navunc/mcmc.hpp"
#include "navunc/ssm.hpp"
#include "navunc/sst.hpp"
#include "navunc/stats.hpp"
#include "navunc/synth.hpp"
#include "navunc/tracks.hpp"
#include "run_config.hpp"

namespace navunc::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Artifact plumbing

inline constexpr const char* kHashPrefix = "# config_hash=";

inline std::string fixed(double v, int prec) {
  if (std::isnan(v)) return "NaN";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

/// File-name form of a track id.
inline std::string file_stem(const std::string& id) {
  std::string s = id;
  for (char& c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  return s;
}

inline std::string p_tag(double p) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "p%03d", static_cast<int>(std::lround(p * 100.0)));
  return buf;
}

/// Output directory bound to one config hash. Every artifact written carries the hash;
/// every artifact read must carry the same one.
class Workspace {
public:
  Workspace(fs::path dir, std::string hash) : dir_(std::move(dir)), hash_(std::move(hash)) {}

  const std::string& hash() const { return hash_; }
  fs::path path(const std::string& rel) const { return dir_ / rel; }
  bool exists(const std::string& rel) const { return fs::exists(path(rel)); }

  void write_bytes(const std::string& rel, const std::string& bytes) const {
    const fs::path p = path(rel);
    std::error_code ec;
    if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + p.string());
    os << bytes;
    if (!os) throw DataError("write failed for " + p.string());
  }

  void write_json(const std::string& rel, nlohmann::json j) const {
    j["config_hash"] = hash_;
    write_bytes(rel, j.dump(2) + "\n");
  }

  /// Text artifact whose first line records the config hash.
  void write_hashed_text(const std::string& rel, const std::string& body) const {
    write_bytes(rel, kHashPrefix + hash_ + "\n" + body);
  }

  std::string read_bytes(const std::string& rel, const std::string& producer) const {
    const fs::path p = path(rel);
    std::ifstream is(p, std::ios::binary);
    if (!is) throw DataError("missing input " + p.string() + " (run `navunc " + producer + "` first)");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
  }

  nlohmann::json read_json(const std::string& rel, const std::string& producer) const {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_bytes(rel, producer));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path(rel).string() + ": " + e.what());
    }
    check(j.is_object() && j.contains("config_hash") ? j["config_hash"].get<std::string>() : std::string{}, rel);
    return j;
  }

  std::string read_hashed_text(const std::string& rel, const std::string& producer) const {
    std::string s = read_bytes(rel, producer);
    return strip_hash_line(s, rel, false);
  }

  /// Removes and verifies the hash line; external inputs may omit it.
  std::string strip_hash_line(const std::string& s, const std::string& what, bool optional) const {
    const std::string prefix = kHashPrefix;
    if (s.compare(0, prefix.size(), prefix) != 0) {
      if (optional) return s;
      throw DataError(what + ": missing config hash line");
    }
    const auto eol = s.find('\n');
    std::string h = s.substr(prefix.size(), eol == std::string::npos ? std::string::npos : eol - prefix.size());
    if (!h.empty() && h.back() == '\r') h.pop_back();
    check(h, what);
    return eol == std::string::npos ? std::string{} : s.substr(eol + 1);
  }

  void check(const std::string& found, const std::string& what) const {
    if (found.empty()) throw DataError(what + ": no config hash recorded");
    if (found != hash_)
      throw ConfigError(what + " was produced under config hash " + found + ", current config hash is " + hash_);
  }

private:
  fs::path dir_;
  std::string hash_;
};

/// Runs f(0..n-1) on up to `jobs` threads; returns the exception (if any) of each index.
template <class F>
std::vector<std::exception_ptr> parallel_for(std::size_t n, std::size_t jobs, F&& f) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        f(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t nt = std::max<std::size_t>(1, std::min(jobs, n));
  if (nt == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < nt; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return errors;
}

/// Rethrows anything that is not a pipeline error; pipeline errors are returned.
inline std::optional<std::string> pipeline_error(const std::exception_ptr& e) {
  if (!e) return std::nullopt;
  try {
    std::rethrow_exception(e);
  } catch (const Error& x) {
    return std::string(x.what());
  }
}

inline nlohmann::json quartiles(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
  if (v.empty()) return nullptr;
  return {{"q25", stats::quantile(v, 0.25)},
          {"q50", stats::quantile(v, 0.50)},
          {"q75", stats::quantile(v, 0.75)},
          {"mean", stats::mean(v)},
          {"n", v.size()}};
}

// ---------------------------------------------------------------------------
// Stage inputs

struct TrackSet {
  std::vector<Track> tracks;
  std::map<std::string, std::size_t> by_id;

  const Track& at(const std::string& id) const {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("unknown track id " + id);
    return tracks[it->second];
  }
};

inline TrackSet load_tracks(const Workspace& ws) {
  std::istringstream in(ws.read_hashed_text("tracks.csv", "ingest"));
  TrackSet s;
  s.tracks = parse_tracks(in);
  for (std::size_t i = 0; i < s.tracks.size(); ++i) s.by_id[s.tracks[i].id()] = i;
  return s;
}

inline std::map<std::string, std::string> load_classes(const Workspace& ws) {
  const auto j = ws.read_json("classes.json", "ingest");
  std::map<std::string, std::string> out;
  try {
    for (const auto& e : j.at("tracks")) out[e.at("track_id").get<std::string>()] = e.at("class").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("classes.json: ") + e.what());
  }
  return out;
}

inline std::map<std::string, FixSchedule> load_fixes(const Workspace& ws) {
  const auto j = ws.read_json("fixes.json", "ingest");
  try {
    return fixes_from_json(j.at("fixes"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("fixes.json: ") + e.what());
  }
}

/// Requested ids, or every track of the given class.
inline std::vector<std::string> select_tracks(const TrackSet& ts, const std::map<std::string, std::string>& classes,
                                              const std::vector<std::string>& ids, const std::string& label) {
  std::vector<std::string> out;
  if (!ids.empty()) {
    for (const auto& id : ids) {
      ts.at(id);
      out.push_back(id);
    }
    return out;
  }
  for (const auto& t : ts.tracks) {
    auto it = classes.find(t.id());
    if (it != classes.end() && it->second == label) out.push_back(t.id());
  }
  return out;
}

inline void check_unique_stems(const std::vector<std::string>& ids) {
  std::map<std::string, std::string> seen;
  for (const auto& id : ids) {
    auto [it, fresh] = seen.emplace(file_stem(id), id);
    if (!fresh) throw DataError("track ids " + it->second + " and " + id + " map to the same file name");
  }
}

inline std::string uncertainty_csv(const Track& t, const PositionUncertainty& u) {
  std::ostringstream os;
  os << "report,timestamp_iso8601,lon_deg,lat_deg,std_x_km,std_y_km,bias_x_km,bias_y_km,rmse_x_km,rmse_y_km,"
        "std_lon_deg,std_lat_deg,bias_lon_deg,bias_lat_deg,rmse_lon_deg,rmse_lat_deg\n";
  for (std::size_t r = 0; r < t.size(); ++r) {
    const auto& k = u.km[r];
    const auto& d = u.deg[r];
    os << r << ',' << format_iso8601(t[r].time) << ',' << fixed(t[r].pos.lon_deg(), 8) << ','
       << fixed(t[r].pos.lat_deg(), 8);
    for (double v : {k.std_x, k.std_y, k.bias_x, k.bias_y, k.rmse_x, k.rmse_y}) os << ',' << fixed(v, 6);
    for (double v : {d.std_x, d.std_y, d.bias_x, d.bias_y, d.rmse_x, d.rmse_y}) os << ',' << fixed(v, 8);
    os << '\n';
  }
  return os.str();
}

/// Random/systematic/overall quartiles over every report of a group of tracks.
inline nlohmann::json uncertainty_table(const std::vector<PositionUncertainty>& us) {
  std::map<std::string, std::vector<double>> cols;
  for (const auto& u : us)
    for (std::size_t r = 0; r < u.km.size(); ++r) {
      const auto& k = u.km[r];
      const auto& d = u.deg[r];
      cols["random_x_km"].push_back(k.std_x);
      cols["random_y_km"].push_back(k.std_y);
      cols["systematic_x_km"].push_back(k.bias_x);
      cols["systematic_y_km"].push_back(k.bias_y);
      cols["overall_x_km"].push_back(k.rmse_x);
      cols["overall_y_km"].push_back(k.rmse_y);
      cols["random_lon_deg"].push_back(d.std_x);
      cols["random_lat_deg"].push_back(d.std_y);
      cols["systematic_lon_deg"].push_back(d.bias_x);
      cols["systematic_lat_deg"].push_back(d.bias_y);
      cols["overall_lon_deg"].push_back(d.rmse_x);
      cols["overall_lat_deg"].push_back(d.rmse_y);
    }
  nlohmann::json out = nlohmann::json::object();
  for (auto& [k, v] : cols) out[k] = quartiles(std::move(v));
  return out;
}

// ---------------------------------------------------------------------------
// Commands

struct Context {
  RunConfig cfg;
  Workspace ws;
  std::size_t jobs = 1;
  std::ostream& out;
  std::ostream& err;
};

inline int cmd_ingest(Context& c, std::string tracks_path) {
  if (tracks_path.empty()) tracks_path = c.cfg.tracks_path;
  if (tracks_path.empty()) throw ConfigError("ingest: no track file given (--tracks or paths.tracks)");
  std::ifstream is(tracks_path, std::ios::binary);
  if (!is) throw DataError("cannot open track file " + tracks_path);
  std::ostringstream raw;
  raw << is.rdbuf();
  std::istringstream in(c.ws.strip_hash_line(raw.str(), tracks_path, true));
  std::vector<std::string> dropped;
  const auto input = parse_tracks(in, &dropped);

  const auto& tc = c.cfg.tracks;
  std::vector<Track> segments;
  for (const auto& t : input)
    for (auto& s : segment_track(t, tc.max_gap_hours, tc.min_reports)) segments.push_back(std::move(s));

  std::vector<std::pair<std::string, FixSchedule>> all_fixes;
  nlohmann::json classes = nlohmann::json::array();
  std::map<std::string, std::size_t> counts{{"HQ2", 0}, {"LQ4", 0}, {"STATIC_JUMP", 0}, {"OTHER", 0}};
  std::map<std::string, std::vector<double>> speeds, jumps;
  for (const auto& t : segments) {
    const auto k = empirical_kinematics(t);
    const auto fs = detect_fixes(t, k, {}, tc.fix_threshold_km);
    const auto cl = classify_track(t, k, fs, tc.classify);
    const std::string label = to_string(cl.label);
    ++counts[label];
    speeds[label].insert(speeds[label].end(), k.speed.begin(), k.speed.end());
    for (const auto& j : fs.jumps) jumps[label].push_back(j.norm());
    const auto& e = cl.evidence;
    classes.push_back({{"track_id", t.id()},
                       {"class", label},
                       {"n_reports", t.size()},
                       {"n_fixes", fs.size()},
                       {"evidence",
                        {{"cadence_hours", e.cadence_hours},
                         {"median_speed_kmh", e.median_speed},
                         {"static_fraction", e.static_fraction},
                         {"median_move_km", e.median_move_km},
                         {"median_jump_km", e.median_jump_km},
                         {"fix_rate_per_day", e.fix_rate_per_day}}}});
    all_fixes.emplace_back(t.id(), fs);
  }

  nlohmann::json table = nlohmann::json::object();
  std::ostringstream txt;
  txt << "class        speed_kmh_q25 speed_kmh_q50 speed_kmh_q75 jump_km_q25 jump_km_q50 jump_km_q75\n";
  for (const std::string label : {"HQ2", "LQ4", "STATIC_JUMP", "OTHER"}) {
    const std::size_t n = counts[label];
    auto q3 = [](std::vector<double> v) -> nlohmann::json {
      if (v.empty()) return nullptr;
      return {{"q25", stats::quantile(v, 0.25)}, {"q50", stats::quantile(v, 0.50)}, {"q75", stats::quantile(v, 0.75)}};
    };
    const auto sq = q3(speeds[label]);
    const auto jq = q3(jumps[label]);
    table[label] = {{"n_tracks", n}, {"speed_kmh", sq}, {"jump_km", jq}};
    char head[16];
    std::snprintf(head, sizeof head, "%-12s", label.c_str());
    txt << head;
    for (const auto* q : {&sq, &jq})
      for (const char* key : {"q25", "q50", "q75"}) {
        char cell[32];
        std::snprintf(cell, sizeof cell, " %13s", q->is_null() ? "-" : fixed((*q)[key].get<double>(), 1).c_str());
        txt << cell;
      }
    txt << '\n';
  }

  std::ostringstream csv;
  write_tracks(csv, segments);
  c.ws.write_hashed_text("tracks.csv", csv.str());
  c.ws.write_json("fixes.json", {{"fixes", fixes_to_json(all_fixes)}});
  c.ws.write_json("classes.json", {{"tracks", classes}});
  c.ws.write_json("inventory.json", {{"n_input_tracks", input.size()},
                                     {"n_dropped_tracks", dropped.size()},
                                     {"dropped_track_ids", dropped},
                                     {"n_tracks", segments.size()},
                                     {"class_counts", counts},
                                     {"fix_threshold_km", tc.fix_threshold_km},
                                     {"table", table}});
  c.ws.write_hashed_text("inventory.txt", txt.str());
  c.out << "ingest: " << segments.size() << " tracks (HQ2 " << counts["HQ2"] << ", LQ4 " << counts["LQ4"]
        << ", STATIC_JUMP " << counts["STATIC_JUMP"] << ", OTHER " << counts["OTHER"] << ")\n";
  return 0;
}

inline int cmd_synth(Context& c) {
  const auto& s = c.cfg.synth;
  const auto fleet = simulate_fleet(s.synth, s.n_hq2, s.n_lq4, s.n_static, c.cfg.seed);
  std::ostringstream csv;
  write_tracks(csv, fleet.all_reported());
  c.ws.write_hashed_text("synth/tracks.csv", csv.str());
  auto truth = truth_to_json(fleet);
  truth["seed"] = c.cfg.seed;
  truth["config"] = c.cfg.effective["synth"];
  c.ws.write_json("synth/truth.json", truth);
  c.out << "synth: " << fleet.hq2.size() << " HQ2, " << fleet.lq4.size() << " LQ4, " << fleet.static_jump.size()
        << " static-jump tracks\n";
  return 0;
}

inline nlohmann::json fit_sidecar(const std::string& id, const FixSchedule& fs, const mcmc::PosteriorSamples& s,
                                  const RunConfig& cfg, const std::string& samples_file) {
  std::optional<mcmc::Diagnostics> d;
  try {
    d = mcmc::diagnostics(s);
  } catch (const InferenceError&) {
    // Too few draws for convergence diagnostics; recorded as null.
  }
  double max_rhat = 0, min_ess = std::numeric_limits<double>::infinity();
  nlohmann::json params = nlohmann::json::object();
  for (const auto& name : SsmLayout::param_names()) {
    const auto col = s.index_of(name);
    if (d) {
      max_rhat = std::max(max_rhat, d->rhat[col]);
      min_ess = std::min(min_ess, d->ess[col]);
    }
    const auto v = s.column(col);
    params[name] = {{"q05", stats::quantile(v, 0.05)}, {"q50", stats::quantile(v, 0.5)}, {"q95", stats::quantile(v, 0.95)}};
  }
  return {{"track_id", id},
          {"fix_indices", fs.indices},
          {"seed", cfg.seed},
          {"samples", samples_file},
          {"n_draws", s.n_draws()},
          {"n_chains", s.n_chains()},
          {"diagnostics", d ? nlohmann::json{{"max_rhat", max_rhat}, {"min_ess", min_ess}} : nlohmann::json(nullptr)},
          {"params", params}};
}

inline int cmd_fit(Context& c, const std::vector<std::string>& ids) {
  const auto ts = load_tracks(c.ws);
  const auto classes = load_classes(c.ws);
  const auto fixes = load_fixes(c.ws);
  const auto sel = select_tracks(ts, classes, ids, "HQ2");
  if (sel.empty()) throw DataError("fit: no HQ2 tracks to fit");
  check_unique_stems(sel);

  std::vector<PositionUncertainty> unc(sel.size());
  auto errors = parallel_for(sel.size(), c.jobs, [&](std::size_t i) {
    const auto& id = sel[i];
    const Track& t = ts.at(id);
    auto it = fixes.find(id);
    const FixSchedule fs = it == fixes.end() ? FixSchedule{} : it->second;
    SsmConfig scfg = c.cfg.ssm;
    scfg.sampler.stream = "ssm/" + id;
    const auto fit = fit_track(t, fs, scfg);
    const std::string stem = "fit/" + file_stem(id);
    std::ostringstream bin;
    mcmc::write_binary(bin, fit.samples);
    c.ws.write_bytes(stem + ".psb", bin.str());
    unc[i] = position_uncertainty(fit.samples, t);
    c.ws.write_hashed_text(stem + "_uncertainty.csv", uncertainty_csv(t, unc[i]));
    c.ws.write_json(stem + ".json", fit_sidecar(id, fs, fit.samples, c.cfg, file_stem(id) + ".psb"));
  });

  nlohmann::json fitted = nlohmann::json::array(), failed = nlohmann::json::array();
  std::vector<PositionUncertainty> ok;
  for (std::size_t i = 0; i < sel.size(); ++i) {
    if (auto msg = pipeline_error(errors[i])) {
      failed.push_back({{"track_id", sel[i]}, {"error", *msg}});
      c.err << "fit: track " << sel[i] << " failed: " << *msg << '\n';
    } else {
      fitted.push_back({{"track_id", sel[i]}, {"sidecar", file_stem(sel[i]) + ".json"}});
      ok.push_back(std::move(unc[i]));
    }
  }
  c.ws.write_json("fit/index.json", {{"tracks", fitted}, {"failed", failed}, {"uncertainty", uncertainty_table(ok)}});
  if (fitted.empty()) throw InferenceError("fit: every track failed (" + failed[0]["error"].get<std::string>() + ")");
  c.out << "fit: " << fitted.size() << " tracks fitted, " << failed.size() << " failed\n";
  return 0;
}

struct FittedTrack {
  std::string id;
  FixSchedule fixes;
  mcmc::PosteriorSamples samples;
};

inline std::vector<std::string> fitted_ids(const Workspace& ws) {
  const auto index = ws.read_json("fit/index.json", "fit");
  std::vector<std::string> ids;
  for (const auto& e : index.at("tracks")) ids.push_back(e.at("track_id").get<std::string>());
  return ids;
}

inline FittedTrack load_fit(const Workspace& ws, const std::string& id) {
  const std::string stem = "fit/" + file_stem(id);
  const auto side = ws.read_json(stem + ".json", "fit");
  FittedTrack f;
  f.id = id;
  try {
    if (side.at("track_id").get<std::string>() != id) throw DataError(stem + ".json: track id mismatch");
    f.fixes.indices = side.at("fix_indices").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(stem + ".json: " + e.what());
  }
  std::istringstream bin(ws.read_bytes(stem + ".psb", "fit"));
  f.samples = mcmc::read_binary(bin);
  return f;
}

inline int cmd_pool(Context& c) {
  const auto ids = fitted_ids(c.ws);
  std::vector<FittedTrack> fits(ids.size());
  auto errors = parallel_for(ids.size(), c.jobs, [&](std::size_t i) { fits[i] = load_fit(c.ws, ids[i]); });
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  PooledInput in;
  for (const auto& f : fits) in.push_back(tau_draws(f.id, f.samples));
  HierConfig hcfg = c.cfg.hier;
  hcfg.parallel_families = c.jobs > 1;
  const auto post = pool(std::move(in), hcfg);
  c.ws.write_json("population.json", {{"n_tracks", ids.size()},
                                      {"track_ids", ids},
                                      {"hyperparameters", hyperparameters_to_json(empirical_hyperparameters(post))},
                                      {"summary", population_summary_json(post)}});
  c.out << "pool: " << ids.size() << " tracks pooled\n";
  return 0;
}

inline int cmd_simulate(Context& c, const std::vector<std::string>& ids) {
  const auto pop = c.ws.read_json("population.json", "pool");
  const Hyperparameters hyper = hyperparameters_from_json(pop.at("hyperparameters"));
  const auto ts = load_tracks(c.ws);
  const auto classes = load_classes(c.ws);
  const auto sel = select_tracks(ts, classes, ids, "LQ4");
  if (sel.empty()) throw DataError("simulate: no LQ4 tracks");
  check_unique_stems(sel);

  nlohmann::json scenarios = nlohmann::json::array();
  for (double p : c.cfg.forward.p_fix) {
    const std::string tag = p_tag(p);
    std::vector<PositionUncertainty> unc(sel.size());
    auto errors = parallel_for(sel.size(), c.jobs, [&](std::size_t i) {
      const Track& t = ts.at(sel[i]);
      ScenarioConfig sc;
      sc.p_fix = p;
      sc.n_ensemble = c.cfg.forward.n_ensemble;
      sc.hyper = hyper;
      sc.seed = c.cfg.seed;
      const auto e = simulate_lq4(t, sc);
      const std::string stem = "simulate/" + file_stem(t.id()) + "_" + tag;
      std::ostringstream bin;
      write_ensemble(bin, e, sc, {{"config_hash", c.ws.hash()}});
      c.ws.write_bytes(stem + ".ens", bin.str());
      unc[i] = lq4_uncertainty(e, t);
      c.ws.write_hashed_text(stem + "_uncertainty.csv", uncertainty_csv(t, unc[i]));
    });
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    nlohmann::json tracks = nlohmann::json::array();
    for (const auto& id : sel) tracks.push_back({{"track_id", id}, {"ensemble", file_stem(id) + "_" + tag + ".ens"}});
    scenarios.push_back({{"p_fix", p}, {"tag", tag}, {"tracks", tracks}, {"uncertainty", uncertainty_table(unc)}});
  }
  c.ws.write_json("simulate/index.json", {{"n_ensemble", c.cfg.forward.n_ensemble}, {"scenarios", scenarios}});
  c.out << "simulate: " << sel.size() << " LQ4 tracks x " << c.cfg.forward.p_fix.size() << " scenarios\n";
  return 0;
}

struct EnsembleGroup {
  std::string name;
  std::vector<std::string> ids;
  std::vector<std::string> files;  // simulate ensembles; empty for posterior draws
};

inline int cmd_sst(Context& c, std::string grid, std::string manifest) {
  if (grid.empty() && manifest.empty()) {
    grid = c.cfg.grid_path;
    manifest = c.cfg.manifest_path;
  }
  if (grid.empty() == manifest.empty())
    throw ConfigError("sst: give exactly one of --grid or --manifest (or paths.grid / paths.manifest)");
  std::variant<GridField, MonthlyClimatology> field;
  if (!grid.empty())
    field = load_grid(fs::path(grid));
  else
    field = load_climatology(fs::path(manifest));

  std::vector<EnsembleGroup> groups;
  if (c.ws.exists("fit/index.json")) groups.push_back({"hq2", fitted_ids(c.ws), {}});
  if (c.ws.exists("simulate/index.json")) {
    const auto idx = c.ws.read_json("simulate/index.json", "simulate");
    for (const auto& s : idx.at("scenarios")) {
      EnsembleGroup g{"lq4_" + s.at("tag").get<std::string>(), {}, {}};
      for (const auto& t : s.at("tracks")) {
        g.ids.push_back(t.at("track_id").get<std::string>());
        g.files.push_back("simulate/" + t.at("ensemble").get<std::string>());
      }
      groups.push_back(std::move(g));
    }
  }
  if (groups.empty()) throw DataError("sst: no position ensembles (run `navunc fit` or `navunc simulate` first)");
  const auto ts = load_tracks(c.ws);

  PropagateConfig pc = c.cfg.sst.propagate;
  pc.threads = c.jobs;
  nlohmann::json summary = nlohmann::json::object();
  for (const auto& g : groups) {
    std::vector<double> random, offset;
    std::vector<GeoPoint> where;
    std::size_t n_reports = 0, n_flagged = 0;
    for (std::size_t i = 0; i < g.ids.size(); ++i) {
      const Track& t = ts.at(g.ids[i]);
      std::vector<std::vector<GeoPoint>> draws;
      if (g.files.empty()) {
        draws = posterior_position_draws(load_fit(c.ws, g.ids[i]).samples, t);
      } else {
        std::istringstream bin(c.ws.read_bytes(g.files[i], "simulate"));
        auto dump = read_ensemble(bin);
        c.ws.check(dump.header.value("config_hash", std::string{}), g.files[i]);
        if (dump.header.value("track_id", std::string{}) != t.id())
          throw DataError(g.files[i] + ": ensemble belongs to another track");
        draws = std::move(dump.trajectories);
      }
      const auto u = std::visit([&](const auto& f) { return propagate(draws, t, f, pc); }, field);
      std::ostringstream csv;
      csv << "report,timestamp_iso8601,lon_deg,lat_deg,sst_reported,sst_random,sst_offset,n_missing,flagged\n";
      for (std::size_t r = 0; r < t.size(); ++r) {
        const auto& s = u.reports[r];
        csv << r << ',' << format_iso8601(t[r].time) << ',' << fixed(t[r].pos.lon_deg(), 8) << ','
            << fixed(t[r].pos.lat_deg(), 8) << ',' << fixed(s.reported_value, 6) << ',' << fixed(s.random, 6) << ','
            << fixed(s.offset, 6) << ',' << s.n_missing << ',' << (s.flagged ? 1 : 0) << '\n';
        ++n_reports;
        if (s.flagged) {
          ++n_flagged;
          continue;
        }
        random.push_back(s.random);
        offset.push_back(s.offset);
        where.push_back(t[r].pos);
      }
      c.ws.write_hashed_text("sst/" + g.name + "/" + file_stem(t.id()) + ".csv", csv.str());
    }
    std::ostringstream rm, om;
    write_grid_text(rm, bin_map(random, where, c.cfg.sst.map_res_deg, BinMode::quadrature));
    write_grid_text(om, bin_map(offset, where, c.cfg.sst.map_res_deg, BinMode::mean));
    c.ws.write_bytes("sst/" + g.name + "_random.grd", rm.str());
    c.ws.write_bytes("sst/" + g.name + "_offset.grd", om.str());
    summary[g.name] = {{"n_tracks", g.ids.size()},
                       {"n_reports", n_reports},
                       {"n_flagged", n_flagged},
                       {"random", quartiles(random)},
                       {"offset", quartiles(offset)},
                       {"maps", {{"random", g.name + "_random.grd"}, {"offset", g.name + "_offset.grd"}}}};
  }
  c.ws.write_json("sst/summary.json", {{"field", grid.empty() ? "monthly" : "single"}, {"groups", summary}});
  c.out << "sst: " << groups.size() << " ensemble groups propagated\n";
  return 0;
}

inline int cmd_lincheck(Context& c, const std::string& jumps_path) {
  std::vector<JumpRecord> records;
  if (!jumps_path.empty()) {
    std::ifstream is(jumps_path, std::ios::binary);
    if (!is) throw DataError("cannot open jump file " + jumps_path);
    std::ostringstream raw;
    raw << is.rdbuf();
    std::istringstream in(c.ws.strip_hash_line(raw.str(), jumps_path, true));
    records = read_jump_csv(in);
  } else {
    const auto ts = load_tracks(c.ws);
    const auto classes = load_classes(c.ws);
    const auto fixes = load_fixes(c.ws);
    for (const auto& id : select_tracks(ts, classes, {}, "HQ2")) {
      auto it = fixes.find(id);
      if (it == fixes.end()) continue;
      auto r = segment_stats(ts.at(id), it->second);
      records.insert(records.end(), r.begin(), r.end());
    }
  }
  const auto bins = bin_jumps(records, c.cfg.lincheck.bin_km, c.cfg.lincheck.regressor);
  const auto samples = fit_linearized(bins, c.cfg.lincheck);
  std::ostringstream jc, sc;
  write_jump_csv(jc, records);
  mcmc::write_csv(sc, samples);
  c.ws.write_hashed_text("lincheck/jumps.csv", jc.str());
  c.ws.write_hashed_text("lincheck/samples.csv", sc.str());
  c.ws.write_json("lincheck/summary.json", {{"n_records", records.size()},
                                            {"n_bins", bins.cells.size()},
                                            {"n_retained_bins", bins.retained().size()},
                                            {"bin_km", bins.bin_km},
                                            {"posterior", lincheck_summary_json(samples)}});
  c.out << "lincheck: " << records.size() << " jumps in " << bins.retained().size() << " bins\n";
  return 0;
}

inline int cmd_ppc(Context& c, const std::vector<std::string>& ids) {
  const auto ts = load_tracks(c.ws);
  const auto fixes = load_fixes(c.ws);
  const auto sel = ids.empty() ? fitted_ids(c.ws) : ids;
  if (sel.empty()) throw DataError("ppc: no fitted tracks");
  check_unique_stems(sel);
  auto errors = parallel_for(sel.size(), c.jobs, [&](std::size_t i) {
    const Track& t = ts.at(sel[i]);
    const auto f = load_fit(c.ws, sel[i]);
    auto it = fixes.find(sel[i]);
    FixSchedule fs = it == fixes.end() ? FixSchedule{} : it->second;
    if (fs.indices != f.fixes.indices) throw DataError("ppc: fix schedule of " + sel[i] + " differs from its fit");
    const auto rep = posterior_predictive(f.samples, t, fs, c.cfg.n_replicates, c.cfg.seed);

    // Per-report replicate spread, and the celestial residuals (replicate minus the
    // latent position of the source draw) scaled back to the equator.
    const auto k = empirical_kinematics(t);
    const SsmData d = SsmData::build(t, k, fs);
    std::vector<std::size_t> cpx(t.size()), cpy(t.size());
    for (std::size_t r = 0; r < t.size(); ++r) {
      cpx[r] = f.samples.index_of("px[" + std::to_string(r) + "]");
      cpy[r] = f.samples.index_of("py[" + std::to_string(r) + "]");
    }
    std::vector<double> res_x, res_y, tau_x, tau_y;
    for (std::size_t j = 0; j < rep.q.size(); ++j) {
      const std::size_t src = rep.source_draw[j];
      tau_x.push_back(f.samples.at(src, f.samples.index_of("tau_x")));
      tau_y.push_back(f.samples.at(src, f.samples.index_of("tau_y")));
      for (std::size_t r : fs.indices) {
        res_x.push_back((rep.q[j][r].dx - f.samples.at(src, cpx[r])) / d.coslat[r]);
        res_y.push_back(rep.q[j][r].dy - f.samples.at(src, cpy[r]));
      }
    }
    std::ostringstream csv;
    csv << "report,timestamp_iso8601,spread_x_km,spread_y_km\n";
    for (std::size_t r = 0; r < t.size(); ++r) {
      std::vector<double> xs, ys;
      for (const auto& q : rep.q) {
        xs.push_back(q[r].dx);
        ys.push_back(q[r].dy);
      }
      csv << r << ',' << format_iso8601(t[r].time) << ',' << fixed(stats::population_sd(xs), 6) << ','
          << fixed(stats::population_sd(ys), 6) << '\n';
    }
    const std::string stem = "ppc/" + file_stem(sel[i]);
    std::ostringstream tracks;
    write_tracks(tracks, rep.tracks);
    c.ws.write_hashed_text(stem + "_replicates.csv", tracks.str());
    c.ws.write_hashed_text(stem + "_spread.csv", csv.str());
    auto rms = [](const std::vector<double>& v) {
      double s = 0;
      for (double x : v) s += x * x;
      return v.empty() ? 0.0 : std::sqrt(s / static_cast<double>(v.size()));
    };
    c.ws.write_json(stem + ".json", {{"track_id", sel[i]},
                                     {"n_replicates", rep.q.size()},
                                     {"n_fixes", fs.size()},
                                     {"fix_residual_sd_km", {{"x_equator", rms(res_x)}, {"y", rms(res_y)}}},
                                     {"posterior_tau_rms_km", {{"x", rms(tau_x)}, {"y", rms(tau_y)}}}});
  });
  for (std::size_t i = 0; i < sel.size(); ++i)
    if (errors[i]) std::rethrow_exception(errors[i]);
  c.out << "ppc: " << sel.size() << " tracks, " << c.cfg.n_replicates << " replicates each\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point

/// Parses the arguments, runs one subcommand and maps failures to exit codes:
/// 0 success, 2 config error, 3 data error, 4 inference error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Ship position uncertainty pipeline", "navunc"};
  std::string config_path, out_dir = ".";
  std::uint64_t seed_value = 0;
  std::size_t jobs = 1;
  app.add_option("--config", config_path, "Run configuration JSON");
  auto* seed_opt = app.add_option("--seed", seed_value, "Root seed (overrides the config)");
  app.add_option("--out-dir", out_dir, "Artifact directory");
  app.add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.require_subcommand(1);

  std::string tracks_path, grid, manifest, jumps;
  std::vector<std::string> ids;
  auto* ingest = app.add_subcommand("ingest", "Parse, segment and classify a track CSV");
  ingest->add_option("--tracks", tracks_path, "Track CSV");
  auto* synth = app.add_subcommand("synth", "Generate a synthetic fleet");
  auto* fit = app.add_subcommand("fit", "Fit the state-space model to HQ2 tracks");
  fit->add_option("--track", ids, "Track ids (default: every HQ2 track)");
  auto* poolc = app.add_subcommand("pool", "Pool per-track posteriors");
  auto* simulate = app.add_subcommand("simulate", "Forward ensembles for LQ4 tracks");
  simulate->add_option("--track", ids, "Track ids (default: every LQ4 track)");
  auto* sst = app.add_subcommand("sst", "Propagate position ensembles into SST uncertainty");
  sst->add_option("--grid", grid, "Single SST raster");
  sst->add_option("--manifest", manifest, "Monthly climatology manifest");
  auto* lin = app.add_subcommand("lincheck", "Linearized cross-check of the navigation parameters");
  lin->add_option("--jumps", jumps, "Jump record CSV (default: from the ingested HQ2 tracks)");
  auto* ppc = app.add_subcommand("ppc", "Posterior predictive replicates of fitted tracks");
  ppc->add_option("--track", ids, "Track ids (default: every fitted track)");
  for (auto* sub : {ingest, synth, fit, poolc, simulate, sst, lin, ppc}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    std::optional<std::uint64_t> seed;
    if (seed_opt->count() > 0) seed = seed_value;
    const RunConfig cfg = load_run_config(config_path, seed);
    Context c{cfg, Workspace(out_dir, cfg.hash), jobs, out, err};
    if (*ingest) return cmd_ingest(c, tracks_path);
    if (*synth) return cmd_synth(c);
    if (*fit) return cmd_fit(c, ids);
    if (*poolc) return cmd_pool(c);
    if (*simulate) return cmd_simulate(c, ids);
    if (*sst) return cmd_sst(c, grid, manifest);
    if (*lin) return cmd_lincheck(c, jumps);
    if (*ppc) return cmd_ppc(c, ids);
    return 2;
  } catch (const Error& e) {
    err << "navunc: " << e.what() << '\n';
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    err << "navunc: malformed artifact: " << e.what() << '\n';
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "navunc: " << e.what() << '\n';
    return 3;
  }
}

}  // namespace navunc::cli
