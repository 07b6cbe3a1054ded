#pragma once

// Daily return panels: wide CSV ingestion and output.

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "aashnet/errors.hpp"

namespace aashnet {

using Date = std::chrono::year_month_day;

// Strict YYYY-MM-DD.
inline std::optional<Date> parse_date(std::string_view s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
  int y = 0;
  unsigned m = 0, d = 0;
  auto num = [&](std::string_view part, auto& out) {
    const auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), out);
    return ec == std::errc() && p == part.data() + part.size();
  };
  if (!num(s.substr(0, 4), y) || !num(s.substr(5, 2), m) || !num(s.substr(8, 2), d)) return std::nullopt;
  const Date date{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!date.ok()) return std::nullopt;
  return date;
}

inline std::string format_date(const Date& d) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(d.year()), static_cast<unsigned>(d.month()),
                static_cast<unsigned>(d.day()));
  return buf;
}

// Shortest decimal that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline std::optional<double> parse_double(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

// T x m simple returns, row-major by date.
struct PanelData {
  std::vector<Date> dates;
  std::vector<std::string> tickers;
  std::vector<double> returns;
  std::optional<std::vector<double>> benchmark;  // optional index column
  std::string benchmark_name = "index";

  std::size_t periods() const { return dates.size(); }
  std::size_t width() const { return tickers.size(); }
  double at(std::size_t t, std::size_t j) const { return returns[t * tickers.size() + j]; }
  double& at(std::size_t t, std::size_t j) { return returns[t * tickers.size() + j]; }

  std::size_t ticker_index(const std::string& name) const {
    for (std::size_t j = 0; j < tickers.size(); ++j) {
      if (tickers[j] == name) return j;
    }
    throw ValidationError("unknown ticker '" + name + "'");
  }

  void validate() const {
    if (dates.empty() || tickers.empty()) throw ValidationError("panel is empty");
    if (returns.size() != dates.size() * tickers.size()) throw ShapeMismatch("panel storage does not match its shape");
    if (benchmark && benchmark->size() != dates.size()) throw ShapeMismatch("benchmark length differs from dates");
    for (std::size_t t = 1; t < dates.size(); ++t) {
      if (dates[t] == dates[t - 1]) throw ValidationError("duplicate date " + format_date(dates[t]));
      if (dates[t] < dates[t - 1]) throw ValidationError("dates are not increasing at " + format_date(dates[t]));
    }
    for (double v : returns) {
      if (!std::isfinite(v)) throw ValidationError("panel has a non-finite return");
    }
  }
};

struct IngestOptions {
  std::string benchmark_column = "index";  // split off if present; empty disables
};

struct IngestReport {
  PanelData panel;
  std::size_t dropped_rows = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

// Wide layout: header "date,<ticker>,...", one row per date.
inline IngestReport parse_csv(std::istream& in, const IngestOptions& opts = {}) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!detail::trim(line).empty()) break;
  }
  if (detail::trim(line).empty()) throw ValidationError("CSV is empty");

  const auto header = detail::split_commas(line);
  if (detail::trim(header[0]) != "date") throw ValidationError("CSV header must start with 'date'");
  if (header.size() < 2) throw ValidationError("CSV header names no tickers");

  IngestReport rep;
  PanelData& p = rep.panel;
  p.benchmark_name = opts.benchmark_column;
  std::optional<std::size_t> bench_col;
  std::vector<std::size_t> ticker_cols;
  std::set<std::string> seen;
  for (std::size_t c = 1; c < header.size(); ++c) {
    const std::string name(detail::trim(header[c]));
    if (name.empty()) throw ValidationError("CSV header has an empty column name");
    if (!seen.insert(name).second) throw ValidationError("duplicate column '" + name + "'");
    if (!opts.benchmark_column.empty() && name == opts.benchmark_column) {
      bench_col = c;
    } else {
      p.tickers.push_back(name);
      ticker_cols.push_back(c);
    }
  }
  if (p.tickers.empty()) throw ValidationError("CSV has no ticker columns");
  if (bench_col) p.benchmark.emplace();

  std::vector<double> row(header.size());
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_commas(line);
    auto drop = [&](const std::string& why) {
      ++rep.dropped_rows;
      rep.warnings.push_back("line " + std::to_string(line_no) + ": " + why + "; row dropped");
    };
    if (cells.size() != header.size()) {
      drop("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(cells.size()));
      continue;
    }
    const auto date = parse_date(detail::trim(cells[0]));
    if (!date) {
      drop("unparsable date '" + std::string(detail::trim(cells[0])) + "'");
      continue;
    }
    bool ok = true;
    for (std::size_t c = 1; c < cells.size() && ok; ++c) {
      const auto v = parse_double(cells[c]);
      if (!v) {
        drop("missing or unparsable value in column '" + std::string(detail::trim(header[c])) + "'");
        ok = false;
      } else {
        row[c] = *v;
      }
    }
    if (!ok) continue;
    if (!p.dates.empty()) {
      if (*date == p.dates.back()) throw ValidationError("duplicate date " + format_date(*date) + " at line " + std::to_string(line_no));
      if (*date < p.dates.back()) {
        throw ValidationError("dates are not increasing at line " + std::to_string(line_no) + " (" +
                              format_date(*date) + ")");
      }
    }
    p.dates.push_back(*date);
    for (std::size_t c : ticker_cols) p.returns.push_back(row[c]);
    if (bench_col) p.benchmark->push_back(row[*bench_col]);
  }
  if (p.dates.empty()) throw ValidationError("CSV has no usable data rows");
  return rep;
}

inline IngestReport ingest_csv(const std::string& path, const IngestOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  return parse_csv(in, opts);
}

inline void write_panel_csv(std::ostream& os, const PanelData& p) {
  os << "date";
  for (const auto& t : p.tickers) os << ',' << t;
  if (p.benchmark) os << ',' << p.benchmark_name;
  os << '\n';
  for (std::size_t t = 0; t < p.periods(); ++t) {
    os << format_date(p.dates[t]);
    for (std::size_t j = 0; j < p.width(); ++j) os << ',' << format_double(p.at(t, j));
    if (p.benchmark) os << ',' << format_double((*p.benchmark)[t]);
    os << '\n';
  }
}

// Consecutive weekdays starting at `first`.
inline std::vector<Date> business_days(Date first, std::size_t count) {
  std::vector<Date> out;
  std::chrono::sys_days d{first};
  while (out.size() < count) {
    const std::chrono::weekday wd{d};
    if (wd != std::chrono::Saturday && wd != std::chrono::Sunday) out.emplace_back(d);
    d += std::chrono::days{1};
  }
  return out;
}

}  // namespace aashnet
