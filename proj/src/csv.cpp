#include "fmpc/csv.hpp"

#include <charconv>
#include <cstdio>
#include <system_error>

namespace fmpc::csv {
namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  if (res.ec != std::errc{}) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  }
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view cell, std::size_t line_no) {
  double v = 0.0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  auto res = std::from_chars(begin, end, v);
  if (res.ec != std::errc{} || res.ptr != end) {
    throw Error(ErrorCode::ConfigError,
                "csv: non-numeric cell '" + std::string(cell) + "' on line " +
                    std::to_string(line_no),
                static_cast<long>(line_no));
  }
  return v;
}

std::vector<std::string_view> split_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      cells.push_back(line.substr(start));
      break;
    }
    cells.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return cells;
}

}  // namespace

int Table::column(std::string_view name) const {
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (header[j] == name) return static_cast<int>(j);
  }
  return -1;
}

std::vector<std::string> trace_columns(int m, int r) {
  if (m < 1 || r < 1) {
    throw Error(ErrorCode::DimensionMismatch, "trace_columns: need m >= 1, r >= 1");
  }
  std::vector<std::string> cols;
  cols.push_back("t");
  for (int i = 1; i <= m; ++i) cols.push_back("y_" + std::to_string(i));
  for (int i = 1; i <= m; ++i) cols.push_back("yM_" + std::to_string(i));
  for (int i = 1; i <= (r - 1) * m; ++i) cols.push_back("dy_" + std::to_string(i));
  for (int i = 1; i <= m; ++i) cols.push_back("u_fmpc_" + std::to_string(i));
  for (int i = 1; i <= m; ++i) cols.push_back("u_fc_" + std::to_string(i));
  cols.push_back("psi");
  cols.push_back("phi");
  cols.push_back("margin");
  cols.push_back("flags");
  return cols;
}

TraceShape parse_trace_shape(const std::vector<std::string>& header) {
  int m = 0;
  for (std::size_t j = 1; j < header.size(); ++j) {
    if (header[j].rfind("y_", 0) == 0) {
      ++m;
    } else {
      break;
    }
  }
  if (m == 0) throw Error(ErrorCode::ConfigError, "csv: header has no y_* columns");
  int dy = 0;
  for (const auto& name : header) {
    if (name.rfind("dy_", 0) == 0) ++dy;
  }
  if (dy % m != 0) {
    throw Error(ErrorCode::ConfigError, "csv: dy column count not a multiple of m");
  }
  TraceShape shape;
  shape.m = m;
  shape.r = 1 + dy / m;
  if (header != trace_columns(shape.m, shape.r)) {
    throw Error(ErrorCode::ConfigError, "csv: header deviates from the trace column contract");
  }
  return shape;
}

std::string to_string(const Table& table) {
  std::string out;
  for (std::size_t j = 0; j < table.header.size(); ++j) {
    if (j) out.push_back(',');
    out += table.header[j];
  }
  out.push_back('\n');
  for (const auto& row : table.rows) {
    if (row.size() != table.header.size()) {
      throw Error(ErrorCode::DimensionMismatch, "csv: ragged row while serializing");
    }
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j) out.push_back(',');
      out += format_double(row[j]);
    }
    out.push_back('\n');
  }
  return out;
}

Table parse(std::string_view text) {
  Table table;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t nl = text.find('\n', start);
    std::string_view line = (nl == std::string_view::npos) ? text.substr(start)
                                                           : text.substr(start, nl - start);
    start = (nl == std::string_view::npos) ? text.size() + 1 : nl + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    ++line_no;
    auto cells = split_line(line);
    if (line_no == 1) {
      for (auto c : cells) table.header.emplace_back(c);
      continue;
    }
    if (cells.size() != table.header.size()) {
      throw Error(ErrorCode::ConfigError,
                  "csv: row on line " + std::to_string(line_no) + " has " +
                      std::to_string(cells.size()) + " cells, expected " +
                      std::to_string(table.header.size()),
                  static_cast<long>(line_no));
    }
    std::vector<double> row;
    row.reserve(cells.size());
    for (auto c : cells) row.push_back(parse_double(c, line_no));
    table.rows.push_back(std::move(row));
  }
  if (table.header.empty()) {
    throw Error(ErrorCode::ConfigError, "csv: empty document");
  }
  return table;
}

}  // namespace fmpc::csv
