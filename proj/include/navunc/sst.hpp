// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "navunc/binio.hpp"
#include "navunc/error.hpp"
#include "navunc/geo.hpp"
#include "navunc/timeutil.hpp"
#include "navunc/tracks.hpp"

namespace navunc {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

/// Regular lon/lat raster. Origin and spacing refer to cell centres; values are row-major
/// with row j at latitude lat0 + j*dlat. NaN marks a missing cell.
struct GridField {
  double lon0 = 0, lat0 = 0;
  double dlon = 1, dlat = 1;
  std::size_t nlon = 0, nlat = 0;
  std::vector<double> values;

  double at(std::size_t i, std::size_t j) const { return values[j * nlon + i]; }
  double& at(std::size_t i, std::size_t j) { return values[j * nlon + i]; }
  bool missing(std::size_t i, std::size_t j) const { return std::isnan(at(i, j)); }

  /// True when the columns cover the full circle, so the last column neighbours the first.
  bool wraps() const { return std::abs(static_cast<double>(nlon) * dlon - 360.0) < 1e-9; }

  double lon_center(std::size_t i) const { return lon0 + static_cast<double>(i) * dlon; }
  double lat_center(std::size_t j) const { return lat0 + static_cast<double>(j) * dlat; }

  void validate() const {
    if (!(dlon > 0) || !(dlat > 0) || !std::isfinite(dlon) || !std::isfinite(dlat))
      throw DataError("grid: spacing must be positive");
    if (!std::isfinite(lon0) || !std::isfinite(lat0)) throw DataError("grid: non-finite origin");
    if (nlon == 0 || nlat == 0) throw DataError("grid: empty dimensions");
    if (values.size() != nlon * nlat)
      throw DataError("grid: value count " + std::to_string(values.size()) + " does not match " +
                      std::to_string(nlon) + "x" + std::to_string(nlat));
  }
};

inline GridField make_grid(double lon0, double lat0, double dlon, double dlat, std::size_t nlon, std::size_t nlat,
                           double fill = kMissing) {
  GridField g{lon0, lat0, dlon, dlat, nlon, nlat, std::vector<double>(nlon * nlat, fill)};
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// Raster files

namespace detail {

inline std::string format_grid_number(double v) {
  if (std::isnan(v)) return "NaN";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_grid_number(std::string_view tok, std::size_t line) {
  if (tok == "NaN" || tok == "nan" || tok == "NAN") return kMissing;
  double v = 0;
  const char* end = tok.data() + tok.size();
  auto [p, ec] = std::from_chars(tok.data(), end, v);
  if (ec != std::errc() || p != end || !std::isfinite(v))
    throw ParseError(line, "grid: bad value '" + std::string(tok) + "'");
  return v;
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    const std::size_t b = i;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i > b) out.push_back(s.substr(b, i - b));
  }
  return out;
}

inline std::size_t parse_count(std::string_view tok, std::size_t line) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || p != tok.data() + tok.size()) throw ParseError(line, "grid: bad dimension");
  return v;
}

inline GridField read_grid_text(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DataError("grid: empty input");
  const auto head = split_ws(line);
  if (head.size() != 7 || head[0] != "GRIDv1") throw ParseError(1, "grid: expected 'GRIDv1 nlon nlat lon0 lat0 dlon dlat'");
  GridField g;
  g.nlon = parse_count(head[1], 1);
  g.nlat = parse_count(head[2], 1);
  g.lon0 = parse_grid_number(head[3], 1);
  g.lat0 = parse_grid_number(head[4], 1);
  g.dlon = parse_grid_number(head[5], 1);
  g.dlat = parse_grid_number(head[6], 1);
  if (g.nlon == 0 || g.nlat == 0) throw ParseError(1, "grid: empty dimensions");
  g.values.reserve(g.nlon * g.nlat);
  std::size_t lineno = 1, rows = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (rows == g.nlat) throw ParseError(lineno, "grid: more than " + std::to_string(g.nlat) + " rows");
    if (toks.size() != g.nlon)
      throw ParseError(lineno, "grid: row has " + std::to_string(toks.size()) + " values, expected " +
                                   std::to_string(g.nlon));
    for (auto t : toks) g.values.push_back(parse_grid_number(t, lineno));
    ++rows;
  }
  if (rows != g.nlat)
    throw DataError("grid: found " + std::to_string(rows) + " rows, expected " + std::to_string(g.nlat));
  g.validate();
  return g;
}

inline GridField read_grid_binary(std::istream& is) {
  binio::expect_magic(is, "GRB1");
  GridField g;
  g.nlon = binio::get_uint<std::uint32_t>(is);
  g.nlat = binio::get_uint<std::uint32_t>(is);
  g.lon0 = binio::get_f64(is);
  g.lat0 = binio::get_f64(is);
  g.dlon = binio::get_f64(is);
  g.dlat = binio::get_f64(is);
  if (g.nlon == 0 || g.nlat == 0) throw DataError("grid: empty dimensions");
  const std::size_t n = g.nlon * g.nlat;
  g.values.reserve(n);
  for (std::size_t k = 0; k < n; ++k) g.values.push_back(binio::get_f64(is));
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("grid: trailing bytes after the declared values");
  g.validate();
  return g;
}

}  // namespace detail

/// Reads either raster variant, chosen by the leading magic.
inline GridField load_grid(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (is.gcount() != 4) throw DataError("grid: input too short");
  const std::string m(magic, 4);
  is.seekg(-4, std::ios::cur);
  if (!is) throw DataError("grid: input is not seekable");
  if (m == "GRB1") return detail::read_grid_binary(is);
  if (m == "GRID") return detail::read_grid_text(is);
  throw DataError("grid: unknown format");
}

inline GridField load_grid(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open grid " + path.string());
  try {
    return load_grid(in);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline void write_grid_text(std::ostream& os, const GridField& g) {
  g.validate();
  using detail::format_grid_number;
  os << "GRIDv1 " << g.nlon << ' ' << g.nlat << ' ' << format_grid_number(g.lon0) << ' ' << format_grid_number(g.lat0)
     << ' ' << format_grid_number(g.dlon) << ' ' << format_grid_number(g.dlat) << '\n';
  for (std::size_t j = 0; j < g.nlat; ++j) {
    for (std::size_t i = 0; i < g.nlon; ++i) os << (i ? " " : "") << format_grid_number(g.at(i, j));
    os << '\n';
  }
}

inline void write_grid_binary(std::ostream& os, const GridField& g) {
  g.validate();
  os.write("GRB1", 4);
  binio::put_uint<std::uint32_t>(os, static_cast<std::uint32_t>(g.nlon));
  binio::put_uint<std::uint32_t>(os, static_cast<std::uint32_t>(g.nlat));
  binio::put_f64(os, g.lon0);
  binio::put_f64(os, g.lat0);
  binio::put_f64(os, g.dlon);
  binio::put_f64(os, g.dlat);
  for (double v : g.values) binio::put_f64(os, v);
}

/// Twelve monthly fields indexed by calendar month.
struct MonthlyClimatology {
  std::array<std::shared_ptr<const GridField>, 12> months;

  static MonthlyClimatology constant(GridField f) {
    MonthlyClimatology c;
    auto p = std::make_shared<const GridField>(std::move(f));
    c.months.fill(p);
    return c;
  }

  const GridField& for_month(unsigned m) const {
    if (m < 1 || m > 12 || !months[m - 1]) throw DataError("climatology: no field for month " + std::to_string(m));
    return *months[m - 1];
  }
  const GridField& at_time(UtcSeconds t) const { return for_month(utc_month(t)); }
};

/// Manifest: {"months": [12 paths]} or {"months": {"1": path, ..., "12": path}}. Relative
/// paths resolve against the manifest's directory; repeated paths are loaded once.
inline MonthlyClimatology load_climatology(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot open manifest " + manifest.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("months")) throw DataError(manifest.string() + ": missing 'months'");
  const auto& m = j["months"];
  std::array<std::string, 12> paths;
  try {
    if (m.is_array()) {
      if (m.size() != 12) throw DataError(manifest.string() + ": 'months' must list 12 files");
      for (std::size_t k = 0; k < 12; ++k) paths[k] = m[k].get<std::string>();
    } else if (m.is_object()) {
      for (std::size_t k = 0; k < 12; ++k) {
        const auto key = std::to_string(k + 1);
        if (!m.contains(key)) throw DataError(manifest.string() + ": no file for month " + key);
        paths[k] = m[key].get<std::string>();
      }
    } else {
      throw DataError(manifest.string() + ": 'months' must be an array or object");
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest.string() + ": " + e.what());
  }
  MonthlyClimatology c;
  std::map<std::string, std::shared_ptr<const GridField>> cache;
  for (std::size_t k = 0; k < 12; ++k) {
    std::filesystem::path p = paths[k];
    if (p.is_relative()) p = manifest.parent_path() / p;
    auto& slot = cache[p.lexically_normal().string()];
    if (!slot) slot = std::make_shared<const GridField>(load_grid(p));
    c.months[k] = slot;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Sampling

/// Bilinear interpolation among the four surrounding cell centres. A masked corner
/// switches to the nearest valid corner. Points outside the grid's cells, or with all
/// four corners masked, give NaN.
inline double sample_field(const GridField& f, const GeoPoint& p) {
  const double lon = p.lon_deg(), lat = p.lat_deg();
  double y = (lat - f.lat0) / f.dlat;
  if (!(y >= -0.5 && y <= static_cast<double>(f.nlat) - 0.5)) return kMissing;
  y = std::clamp(y, 0.0, static_cast<double>(f.nlat - 1));

  std::size_t i0 = 0, i1 = 0;
  double fx = 0;
  if (f.wraps()) {
    double x = std::fmod((lon - f.lon0) / f.dlon, static_cast<double>(f.nlon));
    if (x < 0) x += static_cast<double>(f.nlon);
    i0 = std::min(static_cast<std::size_t>(x), f.nlon - 1);
    i1 = (i0 + 1) % f.nlon;
    fx = x - static_cast<double>(i0);
  } else {
    const double west = f.lon0 - 0.5 * f.dlon;
    double off = std::fmod(lon - west, 360.0);
    if (off < 0) off += 360.0;
    if (off > static_cast<double>(f.nlon) * f.dlon) return kMissing;
    const double x = std::clamp(off / f.dlon - 0.5, 0.0, static_cast<double>(f.nlon - 1));
    i0 = f.nlon > 1 ? std::min(static_cast<std::size_t>(x), f.nlon - 2) : 0;
    i1 = f.nlon > 1 ? i0 + 1 : 0;
    fx = x - static_cast<double>(i0);
  }
  const std::size_t j0 = f.nlat > 1 ? std::min(static_cast<std::size_t>(y), f.nlat - 2) : 0;
  const std::size_t j1 = f.nlat > 1 ? j0 + 1 : 0;
  const double fy = y - static_cast<double>(j0);

  const double c00 = f.at(i0, j0), c10 = f.at(i1, j0), c01 = f.at(i0, j1), c11 = f.at(i1, j1);
  if (!std::isnan(c00) && !std::isnan(c10) && !std::isnan(c01) && !std::isnan(c11))
  {
    // Difference form: exact wherever the corners agree.
    const double south = c00 + fx * (c10 - c00), north = c01 + fx * (c11 - c01);
    return south + fy * (north - south);
  }

  const std::array<double, 4> v{c00, c10, c01, c11};
  const std::array<double, 4> d2{fx * fx + fy * fy, (1 - fx) * (1 - fx) + fy * fy, fx * fx + (1 - fy) * (1 - fy),
                                 (1 - fx) * (1 - fx) + (1 - fy) * (1 - fy)};
  double best = kMissing, best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < 4; ++k)
    if (!std::isnan(v[k]) && d2[k] < best_d) {
      best = v[k];
      best_d = d2[k];
    }
  return best;
}

// ---------------------------------------------------------------------------
// Propagation

struct SstReport {
  double random = 0;          // degC, population sd of the sampled values
  double offset = 0;          // degC, signed: sample mean minus the value at the reported position
  double reported_value = 0;  // degC at the reported position
  std::size_t n_valid = 0, n_missing = 0;
  bool flagged = false;  // too many samples on missing cells, or no value at the reported position
};

struct SstUncertainty {
  std::vector<SstReport> reports;

  std::size_t n_flagged() const {
    std::size_t n = 0;
    for (const auto& r : reports) n += r.flagged;
    return n;
  }
};

struct PropagateConfig {
  std::size_t min_draws = 100;
  double flag_missing_fraction = 0.1;
  std::size_t threads = 1;
};

/// `draws` is draw x report. `field_of(r)` gives the field for report r.
template <class FieldOf>
SstUncertainty propagate_with(const std::vector<std::vector<GeoPoint>>& draws, const Track& reported, FieldOf&& field_of,
                              const PropagateConfig& cfg = {}) {
  if (draws.size() < cfg.min_draws)
    throw DataError("sst propagation: " + std::to_string(draws.size()) + " draws, need at least " +
                    std::to_string(cfg.min_draws));
  for (const auto& d : draws)
    if (d.size() != reported.size()) throw DataError("sst propagation: draw length does not match the track");
  SstUncertainty out;
  out.reports.resize(reported.size());
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t r = first; r < reported.size(); r += stride) {
      const GridField& f = field_of(r);
      SstReport& s = out.reports[r];
      s.reported_value = sample_field(f, reported[r].pos);
      std::vector<double> vals;
      vals.reserve(draws.size());
      for (const auto& d : draws) {
        const double v = sample_field(f, d[r]);
        if (std::isnan(v))
          ++s.n_missing;
        else
          vals.push_back(v);
      }
      s.n_valid = vals.size();
      if (vals.empty()) {
        s.random = s.offset = kMissing;
      } else {
        // Moments of the values shifted by the first one, so that identical samples give
        // exactly zero spread.
        const double n = static_cast<double>(vals.size()), ref = vals.front();
        double sum = 0, sum2 = 0;
        for (double v : vals) sum += v - ref;
        const double mean = sum / n;
        for (double v : vals) sum2 += (v - ref - mean) * (v - ref - mean);
        s.random = std::sqrt(sum2 / n);
        s.offset = (ref + mean) - s.reported_value;
      }
      s.flagged = std::isnan(s.reported_value) ||
                  static_cast<double>(s.n_missing) >= cfg.flag_missing_fraction * static_cast<double>(draws.size());
    }
  };
  const std::size_t nt = std::max<std::size_t>(1, std::min(cfg.threads, reported.size()));
  if (nt == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < nt; ++w) pool.emplace_back(work, w, nt);
    for (auto& th : pool) th.join();
  }
  return out;
}

inline SstUncertainty propagate(const std::vector<std::vector<GeoPoint>>& draws, const Track& reported,
                                const GridField& field, const PropagateConfig& cfg = {}) {
  return propagate_with(draws, reported, [&](std::size_t) -> const GridField& { return field; }, cfg);
}

/// Each report samples the climatology of its UTC month.
inline SstUncertainty propagate(const std::vector<std::vector<GeoPoint>>& draws, const Track& reported,
                                const MonthlyClimatology& clim, const PropagateConfig& cfg = {}) {
  return propagate_with(
      draws, reported, [&](std::size_t r) -> const GridField& { return clim.at_time(reported[r].time); }, cfg);
}

// ---------------------------------------------------------------------------
// Binned maps

enum class BinMode { quadrature, mean };

/// Global map at res_deg: quadrature mode stores sqrt(mean of squares), mean mode the
/// arithmetic mean. NaN inputs are skipped and empty cells stay masked.
inline GridField bin_map(const std::vector<double>& values, const std::vector<GeoPoint>& positions, double res_deg = 2.0,
                         BinMode mode = BinMode::quadrature) {
  if (!(res_deg > 0) || !std::isfinite(res_deg)) throw ConfigError("bin_map: resolution must be positive");
  if (values.size() != positions.size()) throw DataError("bin_map: values and positions differ in length");
  const double nl = 360.0 / res_deg, nb = 180.0 / res_deg;
  if (std::abs(nl - std::round(nl)) > 1e-9 || std::abs(nb - std::round(nb)) > 1e-9)
    throw ConfigError("bin_map: resolution must divide 180 degrees");
  const auto nlon = static_cast<std::size_t>(std::round(nl)), nlat = static_cast<std::size_t>(std::round(nb));
  GridField g = make_grid(-180.0 + 0.5 * res_deg, -90.0 + 0.5 * res_deg, res_deg, res_deg, nlon, nlat, 0.0);
  std::vector<std::size_t> count(nlon * nlat, 0);
  for (std::size_t k = 0; k < values.size(); ++k) {
    const double v = values[k];
    if (std::isnan(v)) continue;
    auto i = static_cast<std::size_t>(std::floor((positions[k].lon_deg() + 180.0) / res_deg));
    auto j = static_cast<std::size_t>(std::floor((positions[k].lat_deg() + 90.0) / res_deg));
    i = i % nlon;
    j = std::min(j, nlat - 1);
    g.at(i, j) += mode == BinMode::quadrature ? v * v : v;
    ++count[j * nlon + i];
  }
  for (std::size_t c = 0; c < g.values.size(); ++c) {
    if (count[c] == 0) {
      g.values[c] = kMissing;
      continue;
    }
    const double m = g.values[c] / static_cast<double>(count[c]);
    g.values[c] = mode == BinMode::quadrature ? std::sqrt(m) : m;
  }
  return g;
}

}  // namespace navunc
