#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "fmpc/types.hpp"

namespace fmpc::csv {

/// Numeric table with named columns. The serialized form uses '.' decimals,
/// ',' separators, LF line endings and no quoting; doubles are written in
/// shortest round-trip form, so serialize/parse/serialize is byte-identical.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  std::size_t cols() const { return header.size(); }
  /// Column index by name, -1 if absent.
  int column(std::string_view name) const;
};

/// Fixed column layout for closed-loop traces with m outputs and chain
/// order r: t, y_1..y_m, yM_1..yM_m, dy_1..dy_{(r-1)m}, u_fmpc_1..u_fmpc_m,
/// u_fc_1..u_fc_m, psi, phi, margin, flags. The y block holds the measured
/// output, yM the model output, and dy the model chain blocks 2..r.
std::vector<std::string> trace_columns(int m, int r);

struct TraceShape {
  int m = 0;
  int r = 0;
};

/// Recovers (m, r) from a header produced by trace_columns; throws
/// ConfigError when the header deviates from the contract.
TraceShape parse_trace_shape(const std::vector<std::string>& header);

std::string to_string(const Table& table);

/// Strict numeric parse; ragged rows or non-numeric cells raise ConfigError.
Table parse(std::string_view text);

}  // namespace fmpc::csv
