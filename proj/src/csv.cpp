#include "lmrt/csv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "lmrt/common.hpp"

namespace lmrt::csv {

namespace {

std::vector<std::string> parse_line(const std::string& line, long lineno,
                                    const std::string& origin) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  std::size_t i = 0;
  while (i < line.size()) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      if (!cur.empty()) {
        throw ParseError(origin + ": quote inside unquoted field", lineno);
      }
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
    ++i;
  }
  if (quoted) throw ParseError(origin + ": unterminated quote", lineno);
  fields.push_back(std::move(cur));
  return fields;
}

}  // namespace

std::size_t Table::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw ParseError("missing column '" + name + "'", 0);
}

Table read_stream(std::istream& in, const std::string& origin) {
  Table t;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = parse_line(line, lineno, origin);
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    if (fields.size() != t.header.size()) {
      throw ParseError(origin + ": expected " + std::to_string(t.header.size()) +
                           " fields, got " + std::to_string(fields.size()),
                       lineno);
    }
    t.rows.push_back(std::move(fields));
  }
  if (t.header.empty()) throw ParseError(origin + ": missing header row", 0);
  return t;
}

Table read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open file: " + path);
  return read_stream(in, path);
}

std::string escape_field(const std::string& field) {
  const bool needs_quotes =
      field.find_first_of(",\"\n\r") != std::string::npos;
  if (!needs_quotes) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out.push_back('"');
  return out;
}

void write_row(std::ostream& out, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out.put(',');
    out << escape_field(fields[i]);
  }
  out.put('\n');
}

std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v,
                           std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

}  // namespace lmrt::csv
