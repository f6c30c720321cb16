// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "navunc/error.hpp"

namespace navunc {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kDegToRad = kPi / 180.0;
inline constexpr double kRadToDeg = 180.0 / kPi;

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
  double r = std::remainder(a, 2.0 * kPi);
  if (r <= -kPi) r += 2.0 * kPi;
  if (r > kPi) r -= 2.0 * kPi;
  return r;
}

/// Longitude/latitude in radians. Longitude is kept in (-pi, pi], latitude strictly
/// inside the poles; the factories enforce both.
struct GeoPoint {
  double lon = 0.0;
  double lat = 0.0;

  static GeoPoint from_radians(double lon, double lat) {
    if (!std::isfinite(lon) || !std::isfinite(lat))
      throw DataError("invalid coordinate: non-finite longitude or latitude");
    if (!(std::abs(lat) < kPi / 2))
      throw DataError("invalid coordinate: latitude outside (-90, 90) degrees");
    return GeoPoint{wrap_angle(lon), lat};
  }
  static GeoPoint from_degrees(double lon_deg, double lat_deg) {
    return from_radians(lon_deg * kDegToRad, lat_deg * kDegToRad);
  }

  double lon_deg() const { return lon * kRadToDeg; }
  double lat_deg() const { return lat * kRadToDeg; }

  friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

/// Local east/north displacement in km.
struct Displacement {
  double dx = 0.0;
  double dy = 0.0;

  Displacement& operator+=(const Displacement& o) {
    dx += o.dx;
    dy += o.dy;
    return *this;
  }
  Displacement& operator-=(const Displacement& o) {
    dx -= o.dx;
    dy -= o.dy;
    return *this;
  }
  friend Displacement operator+(Displacement a, const Displacement& b) { return a += b; }
  friend Displacement operator-(Displacement a, const Displacement& b) { return a -= b; }
  friend Displacement operator-(const Displacement& a) { return {-a.dx, -a.dy}; }
  friend Displacement operator*(double k, const Displacement& a) { return {k * a.dx, k * a.dy}; }
  friend bool operator==(const Displacement&, const Displacement&) = default;

  double norm() const { return std::hypot(dx, dy); }
};

struct EarthModel {
  double radius_km = 6371.0;

  /// Kilometres per degree of arc on the equator.
  double km_per_degree() const { return radius_km * kDegToRad; }
};

namespace detail {
inline void require_finite(const GeoPoint& p) {
  if (!std::isfinite(p.lon) || !std::isfinite(p.lat))
    throw DataError("invalid coordinate: non-finite longitude or latitude");
}
}  // namespace detail

/// Mid-latitude flat-earth displacement from a to b. The longitude difference goes
/// through the shorter arc.
inline Displacement step_displacement(const GeoPoint& a, const GeoPoint& b,
                                      const EarthModel& earth = {}) {
  detail::require_finite(a);
  detail::require_finite(b);
  const double r = earth.radius_km;
  const double dlon = wrap_angle(b.lon - a.lon);
  return {r * dlon * std::cos((a.lat + b.lat) / 2.0), r * (b.lat - a.lat)};
}

/// Running sums of step displacements; element 0 is the origin.
inline std::vector<Displacement> cumulative_displacements(std::span<const GeoPoint> points,
                                                          const EarthModel& earth = {}) {
  if (points.empty()) throw DataError("cumulative_displacements: empty input");
  std::vector<Displacement> out;
  out.reserve(points.size());
  out.push_back({});
  for (std::size_t t = 1; t < points.size(); ++t)
    out.push_back(out.back() + step_displacement(points[t - 1], points[t], earth));
  return out;
}

/// Inverse of step_displacement: the point b with step_displacement(p, b) == d.
/// Latitude follows from d.dy alone, which fixes the mid-latitude cosine.
inline GeoPoint advance(const GeoPoint& p, const Displacement& d, const EarthModel& earth = {}) {
  detail::require_finite(p);
  if (!std::isfinite(d.dx) || !std::isfinite(d.dy))
    throw DataError("advance: non-finite displacement");
  const double r = earth.radius_km;
  const double lat = p.lat + d.dy / r;
  if (!(std::abs(lat) < kPi / 2)) throw DataError("advance: result crosses a pole");
  const double c = std::cos((p.lat + lat) / 2.0);
  const double dlon = d.dx / (r * c);
  if (!(std::abs(dlon) < kPi)) throw DataError("advance: displacement wraps past the antimeridian");
  return GeoPoint{wrap_angle(p.lon + dlon), lat};
}

}  // namespace navunc
