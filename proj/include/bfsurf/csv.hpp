#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace bfsurf::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based source line of each row

  /// Column index by name, or -1.
  int column(std::string_view name) const;
};

/// Parses simple comma-separated text (no quoting). Blank lines are skipped;
/// a row with the wrong field count raises Errc::parse_error naming the line.
Table parse(std::string_view text);

/// Parses a finite double; Errc::parse_error naming line and column otherwise.
double to_double(const std::string& cell, std::size_t line, std::string_view column);

/// Round-trippable decimal form (17 significant digits).
std::string format(double v);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

}  // namespace bfsurf::csv
