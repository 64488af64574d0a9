#pragma once

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

namespace fhrl {

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  if (res.ec != std::errc()) throw std::runtime_error("failed to format double");
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& text) {
  double x = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), x);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw std::invalid_argument("not a number: '" + text + "'");
  }
  return x;
}

/// One aggregated curve: mean and standard error at each x.
struct Series {
  std::string id;
  std::vector<double> x;
  std::vector<double> mean;
  std::vector<double> se;

  std::size_t size() const { return x.size(); }
  bool operator==(const Series&) const = default;
};

/**
 * Writes "x,mean,se" rows, or "x,mean,se,series" when any series carries an
 * id (long format, one block per series). LF line endings, round-trip
 * precision for every number.
 */
inline void emit_csv(std::ostream& os, const std::vector<Series>& series) {
  bool with_id = false;
  for (const auto& s : series) with_id = with_id || !s.id.empty();
  os << (with_id ? "x,mean,se,series\n" : "x,mean,se\n");
  for (const auto& s : series) {
    if (s.mean.size() != s.x.size() || s.se.size() != s.x.size()) {
      throw std::invalid_argument("series '" + s.id + "' has mismatched column lengths");
    }
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      os << format_double(s.x[i]) << ',' << format_double(s.mean[i]) << ',' << format_double(s.se[i]);
      if (with_id) os << ',' << s.id;
      os << '\n';
    }
  }
}

inline void emit_csv(const std::string& path, const std::vector<Series>& series) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  emit_csv(out, series);
  out.flush();
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

/// Inverse of emit_csv; consecutive rows with the same id form one series.
inline std::vector<Series> parse_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::invalid_argument("missing CSV header");
  const bool with_id = line == "x,mean,se,series";
  if (!with_id && line != "x,mean,se") throw std::invalid_argument("unexpected CSV header: " + line);
  std::vector<Series> out;
  while (std::getline(is, line)) {
    std::stringstream row(line);
    std::string fx, fm, fs, id;
    std::getline(row, fx, ',');
    std::getline(row, fm, ',');
    std::getline(row, fs, ',');
    if (with_id) std::getline(row, id);
    if (out.empty() || out.back().id != id) out.push_back(Series{id, {}, {}, {}});
    out.back().x.push_back(parse_double(fx));
    out.back().mean.push_back(parse_double(fm));
    out.back().se.push_back(parse_double(fs));
  }
  return out;
}

}  // namespace fhrl
