#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mdist/policy.hpp"
#include "mdist/resource.hpp"

namespace mdist {

/// Parsed CSV; lines starting with '#' are collected as comments.
struct CsvTable {
  std::vector<std::string> comments;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Throws kCorrupt naming the missing column.
  std::size_t column(const std::string& name) const;
  const std::string& cell(std::size_t row, const std::string& name) const;
  double number(std::size_t row, const std::string& name) const;
};

CsvTable parse_csv(const std::string& text, const std::string& source = "csv");
CsvTable read_csv(const std::string& path);

/// "# config_hash=<hex> seed=<n>"
std::string provenance_line(std::uint64_t config_hash, std::uint64_t seed);
/// Parses a provenance line; false when the text has none.
bool parse_provenance(const std::string& text, std::uint64_t& config_hash, std::uint64_t& seed);

void write_csv(const std::string& path, std::uint64_t config_hash, std::uint64_t seed,
               const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows);
std::string fmt(double v);

/// Histogram as rows (agent, bucket, action, count) and back.
std::vector<std::vector<std::string>> histogram_rows(const ActionHistogram& h);
ActionHistogram histogram_from_csv(const CsvTable& t);

struct RetentionRow {
  std::string condition;
  double return_mean = 0.0;
  double win_rate = 0.0;
  double return_retention_pct = 0.0;  // 100 (R - R_random) / (R_teacher - R_random)
  double return_ratio_pct = 0.0;      // 100 R / R_teacher
  double win_retention_pct = 0.0;     // 100 w / w_teacher (NaN when the teacher never wins)
};

/// From an eval table with rows policy in {teacher, student, random, ...}.
std::vector<RetentionRow> retention_table(const CsvTable& eval);

// Self-contained SVG renderers.
std::string svg_grouped_bars(const std::string& title, const std::vector<std::string>& groups,
                             const std::vector<std::string>& series, const std::vector<std::vector<double>>& values,
                             const std::string& note);
std::string svg_heatmaps(const std::string& title, const std::vector<std::pair<std::string, ActionHistogram>>& maps,
                         int bucket_width);
std::string svg_curves(const std::string& title, const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series,
                       const std::string& x_label);

/// Reads a seed directory's CSVs and writes report/{retention.csv, costs.svg,
/// heatmaps.svg, curves.svg}.
void write_report(const std::string& seed_dir);

}  // namespace mdist
