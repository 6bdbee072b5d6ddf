#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dml/data.hpp"
#include "dml/error.hpp"

namespace dml {

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline double parse_cell(std::string_view cell, std::size_t line_no) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (!cell.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (cell.empty() || ec != std::errc() || ptr != last) {
    throw ParseError(line_no, "non-numeric cell '" + std::string(cell) + "'");
  }
  if (!std::isfinite(v)) throw ParseError(line_no, "non-finite cell '" + std::string(cell) + "'");
  return v;
}

// Shortest form that round-trips at 17 significant digits.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Parses the `f0,…,f{n-1}[,y]` CSV layout. A `y` column yields real labels.
inline Dataset parse_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();

  const auto header = detail::split_commas(line);
  bool has_y = !header.empty() && header.back() == "y";
  const std::size_t n_features = header.size() - (has_y ? 1 : 0);
  if (n_features == 0) throw ParseError(line_no, "missing header: no feature columns");
  for (std::size_t j = 0; j < n_features; ++j) {
    if (header[j] != "f" + std::to_string(j)) {
      throw ParseError(line_no, "missing header: expected column 'f" + std::to_string(j) + "', got '" +
                                    std::string(header[j]) + "'");
    }
  }

  std::vector<double> feats;
  std::vector<double> ys;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_commas(line);
    if (cells.size() != header.size()) {
      throw ParseError(line_no, "row has " + std::to_string(cells.size()) + " fields, header has " +
                                    std::to_string(header.size()));
    }
    for (std::size_t j = 0; j < n_features; ++j) feats.push_back(detail::parse_cell(cells[j], line_no));
    if (has_y) ys.push_back(detail::parse_cell(cells.back(), line_no));
  }

  const std::size_t rows = feats.size() / n_features;
  if (rows == 0) throw ParseError(line_no, "dataset has zero rows");

  Matrix pts(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n_features));
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < n_features; ++j) {
      pts(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = feats[i * n_features + j];
    }
  }
  if (!has_y) return Dataset(std::move(pts));
  Vector y = Eigen::Map<Vector>(ys.data(), static_cast<Eigen::Index>(ys.size()));
  return Dataset(std::move(pts), std::move(y), LabelKind::real);
}

inline void write_csv(const Dataset& data, std::ostream& out) {
  const std::size_t n = data.dim();
  for (std::size_t j = 0; j < n; ++j) out << (j ? "," : "") << 'f' << j;
  if (data.has_labels()) out << ",y";
  out << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out << (j ? "," : "")
          << detail::format_double(data.points()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    }
    if (data.has_labels()) out << ',' << detail::format_double(data.labels()(static_cast<Eigen::Index>(i)));
    out << '\n';
  }
}

inline Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return parse_csv(in);
}

inline void save_csv(const Dataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_csv(data, out);
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace dml
