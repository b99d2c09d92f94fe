#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lmrt::csv {

// Minimal RFC-style CSV: comma separator, double-quote quoting with ""
// escapes, mandatory header row, no embedded newlines.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Column index by name; throws ParseError when missing.
  std::size_t column(const std::string& name) const;
};

Table read_file(const std::string& path);
Table read_stream(std::istream& in, const std::string& origin);

std::string escape_field(const std::string& field);
void write_row(std::ostream& out, const std::vector<std::string>& fields);

std::string format_double(double v);

}  // namespace lmrt::csv
