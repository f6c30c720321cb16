// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cmath>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>

namespace navunc {

/// Seconds since 1970-01-01T00:00:00Z. Negative for the pre-1970 reports this
/// library mostly deals with.
using UtcSeconds = std::int64_t;

inline constexpr UtcSeconds kSecondsPerDay = 86400;

namespace detail {
inline bool read_int(std::string_view s, std::size_t pos, std::size_t len, int& out) {
  if (pos + len > s.size()) return false;
  const char* b = s.data() + pos;
  auto [p, ec] = std::from_chars(b, b + len, out);
  return ec == std::errc() && p == b + len;
}
}  // namespace detail

/// Parses `YYYY-MM-DDTHH:MM[:SS][Z|+00:00]` (a space may replace the `T`). Only UTC
/// offsets are accepted; nullopt on anything else.
inline std::optional<UtcSeconds> parse_iso8601(std::string_view s) {
  using namespace std::chrono;
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
  if (s.size() < 16) return std::nullopt;
  if (!detail::read_int(s, 0, 4, y) || s[4] != '-' || !detail::read_int(s, 5, 2, mo) || s[7] != '-' ||
      !detail::read_int(s, 8, 2, d) || (s[10] != 'T' && s[10] != ' ') ||
      !detail::read_int(s, 11, 2, h) || s[13] != ':' || !detail::read_int(s, 14, 2, mi))
    return std::nullopt;
  std::string_view rest = s.substr(16);
  if (!rest.empty() && rest[0] == ':') {
    if (!detail::read_int(rest, 1, 2, sec)) return std::nullopt;
    rest = rest.substr(3);
  }
  if (!(rest.empty() || rest == "Z" || rest == "+00:00" || rest == "+0000")) return std::nullopt;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || sec > 60) return std::nullopt;
  const auto days_since_epoch = sys_days{ymd}.time_since_epoch().count();
  return static_cast<UtcSeconds>(days_since_epoch) * kSecondsPerDay + h * 3600 + mi * 60 + sec;
}

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

inline std::string format_iso8601(UtcSeconds t) {
  using namespace std::chrono;
  const std::int64_t day_index = floor_div(t, kSecondsPerDay);
  const std::int64_t sod = t - day_index * kSecondsPerDay;
  const year_month_day ymd{sys_days{days{day_index}}};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02dZ", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                static_cast<int>(sod / 3600), static_cast<int>((sod % 3600) / 60),
                static_cast<int>(sod % 60));
  return buf;
}

/// Month 1..12 of a timestamp.
inline unsigned utc_month(UtcSeconds t) {
  using namespace std::chrono;
  const year_month_day ymd{sys_days{days{floor_div(t, kSecondsPerDay)}}};
  return static_cast<unsigned>(ymd.month());
}

/// Local civil day index at mean-solar offset lon_deg/15 hours from UTC.
inline std::int64_t local_day_index(UtcSeconds t, double lon_deg) {
  const auto offset = static_cast<std::int64_t>(std::llround(lon_deg / 15.0 * 3600.0));
  return floor_div(t + offset, kSecondsPerDay);
}

}  // namespace navunc
