#pragma once

#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace condcl {

/// Shortest round-trip text for a double ("%.17g"); NaN and absent values
/// become empty fields.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_double(std::optional<double> v) { return v ? format_double(*v) : ""; }

/// Comma-separated rows with a header; fields are written verbatim, so
/// callers keep them free of commas and newlines.
class CsvWriter {
 public:
  CsvWriter(std::ostream& os, std::vector<std::string> header) : os_(os), width_(header.size()) { write(header); }

  template <class... Fields>
  void row(const Fields&... fields) {
    std::vector<std::string> cells;
    (cells.push_back(cell(fields)), ...);
    write(cells);
  }

  void row_cells(const std::vector<std::string>& cells) { write(cells); }

 private:
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(std::string_view s) { return std::string(s); }
  static std::string cell(const char* s) { return s; }
  static std::string cell(double v) { return format_double(v); }
  static std::string cell(std::optional<double> v) { return format_double(v); }
  template <class Int>
    requires std::is_integral_v<Int>
  static std::string cell(Int v) {
    return std::to_string(v);
  }

  void write(const std::vector<std::string>& cells) {
    if (cells.size() != width_) throw std::logic_error("CsvWriter: row width differs from header");
    for (std::size_t k = 0; k < cells.size(); ++k) os_ << (k ? "," : "") << cells[k];
    os_ << '\n';
  }

  std::ostream& os_;
  std::size_t width_;
};

}  // namespace condcl
