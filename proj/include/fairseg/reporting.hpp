#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fairseg/fairness_metrics.hpp"

namespace fairseg::report {

struct RunMetrics {
  double avg_dice = 0.0;  // sample-mean Dice of one run
  metrics::FairnessReport fairness;
};

struct MethodEvaluations {
  std::string method;
  std::vector<RunMetrics> runs;
};

struct TableCell {
  double mean = 0.0;
  double std_dev = 0.0;
  bool infinite = false;  // SER only
};

struct TableRow {
  std::string method;
  TableCell avg;      // x100
  TableCell delta;    // x100
  TableCell ser;      // unscaled
  TableCell std_dev;  // x100
  int64_t run_count = 0;
};

// Column extremum markers; ties resolve toward the earlier-listed method.
struct ColumnMarkers {
  int64_t best = -1;
  int64_t second = -1;
};

struct ExperimentTable {
  std::string dataset;
  std::string attribute;
  std::vector<TableRow> rows;

  // Higher is better for Avg, lower for the gap metrics.
  ColumnMarkers avg_markers() const;
  ColumnMarkers delta_markers() const;
  ColumnMarkers ser_markers() const;
  ColumnMarkers std_markers() const;
};

// Aggregates per-method repeats into table rows (mean and sample std). Avg,
// Delta and STD are scaled to percentage points; SER stays a ratio.
ExperimentTable build_table(const std::vector<MethodEvaluations>& methods,
                            const std::string& dataset, const std::string& attribute);

// "3.00_{1.00}"; flagged-infinite SER renders as "inf".
std::string format_cell(const TableCell& cell);

std::string to_csv(const ExperimentTable& table);
ExperimentTable table_from_csv(const std::string& csv);
std::string to_text(const ExperimentTable& table);
std::string to_markdown(const ExperimentTable& table);

struct BetaSweepEntry {
  double beta = 0.0;
  MethodEvaluations evals;
  std::vector<double> probe_accuracies;  // empty when the probe was not run
};

struct BetaSweepRow {
  double beta = 0.0;
  TableCell avg, delta, ser, std_dev;  // same scaling as ExperimentTable
  TableCell probe;                     // accuracy x100
  bool has_probe = false;
  int64_t run_count = 0;
};

// Rows sorted by ascending beta; the probe column appears only when every
// entry carries probe accuracies.
std::vector<BetaSweepRow> beta_sweep_summary(const std::vector<BetaSweepEntry>& entries);

std::string sweep_to_csv(const std::vector<BetaSweepRow>& rows);
std::string sweep_to_text(const std::vector<BetaSweepRow>& rows);

}  // namespace fairseg::report
