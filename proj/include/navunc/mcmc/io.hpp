// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "navunc/binio.hpp"
#include "navunc/error.hpp"
#include "navunc/mcmc/samples.hpp"

namespace navunc::mcmc {

/// Shortest-exact decimal form: 17 significant digits always round-trip a double.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Columnar CSV: `chain,draw,<name>...`.
inline void write_csv(std::ostream& os, const PosteriorSamples& s) {
  os << "chain,draw";
  for (const auto& n : s.names()) os << ',' << n;
  os << '\n';
  for (std::size_t i = 0; i < s.n_draws(); ++i) {
    os << s.chain(i) << ',' << s.draw_index(i);
    for (double v : s.row(i)) os << ',' << format_double(v);
    os << '\n';
  }
}

inline PosteriorSamples read_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DataError("posterior CSV: missing header");
  std::vector<std::string> cols;
  {
    std::istringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  if (cols.size() < 2 || cols[0] != "chain" || cols[1] != "draw") throw DataError("posterior CSV: bad header");
  PosteriorSamples s(std::vector<std::string>(cols.begin() + 2, cols.end()));
  std::vector<double> row(s.dim());
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const char* p = line.c_str();
    char* end = nullptr;
    const auto chain = std::strtoull(p, &end, 10);
    if (*end != ',') throw ParseError(lineno, "posterior CSV: bad chain");
    const auto draw = std::strtoull(end + 1, &end, 10);
    for (std::size_t k = 0; k < s.dim(); ++k) {
      if (*end != ',') throw ParseError(lineno, "posterior CSV: too few columns");
      row[k] = std::strtod(end + 1, &end);
    }
    if (*end != '\0' && *end != '\r') throw ParseError(lineno, "posterior CSV: too many columns");
    s.add_draw(chain, draw, row);
  }
  return s;
}

/// Binary layout (all little-endian): "PSB1", u32 column count, each name as u32 length
/// plus bytes, u64 row count, then per row u32 chain, u32 draw and one f64 per column.
inline void write_binary(std::ostream& os, const PosteriorSamples& s) {
  os.write("PSB1", 4);
  binio::put_uint<std::uint32_t>(os, static_cast<std::uint32_t>(s.dim()));
  for (const auto& n : s.names()) binio::put_string(os, n);
  binio::put_uint<std::uint64_t>(os, s.n_draws());
  for (std::size_t i = 0; i < s.n_draws(); ++i) {
    binio::put_uint<std::uint32_t>(os, static_cast<std::uint32_t>(s.chain(i)));
    binio::put_uint<std::uint32_t>(os, static_cast<std::uint32_t>(s.draw_index(i)));
    for (double v : s.row(i)) binio::put_f64(os, v);
  }
}

inline PosteriorSamples read_binary(std::istream& is) {
  binio::expect_magic(is, "PSB1");
  const auto dim = binio::get_uint<std::uint32_t>(is);
  std::vector<std::string> names;
  for (std::uint32_t i = 0; i < dim; ++i) names.push_back(binio::get_string(is));
  PosteriorSamples s(std::move(names));
  const auto rows = binio::get_uint<std::uint64_t>(is);
  std::vector<double> row(dim);
  for (std::uint64_t i = 0; i < rows; ++i) {
    const auto chain = binio::get_uint<std::uint32_t>(is);
    const auto draw = binio::get_uint<std::uint32_t>(is);
    for (auto& v : row) v = binio::get_f64(is);
    s.add_draw(chain, draw, row);
  }
  return s;
}

}  // namespace navunc::mcmc
