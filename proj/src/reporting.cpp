#include "fairseg/reporting.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "fairseg/error.hpp"

namespace fairseg::report {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  if (s == "nan" || s == "-nan") return std::numeric_limits<double>::quiet_NaN();
  return std::stod(s);
}

// First index achieving the extremum wins, then the first strictly-second
// value among the rest; infinite SER sorts worst.
ColumnMarkers pick_markers(const std::vector<double>& values, bool higher_better) {
  ColumnMarkers m;
  if (values.empty()) return m;
  auto better = [&](double a, double b) { return higher_better ? a > b : a < b; };
  for (size_t i = 0; i < values.size(); ++i) {
    if (m.best < 0 || better(values[i], values[m.best])) m.best = static_cast<int64_t>(i);
  }
  for (size_t i = 0; i < values.size(); ++i) {
    if (static_cast<int64_t>(i) == m.best) continue;
    if (m.second < 0 || better(values[i], values[m.second])) m.second = static_cast<int64_t>(i);
  }
  return m;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  return fields;
}

TableCell aggregate_cell(const std::vector<double>& values, double scale) {
  auto agg = metrics::aggregate_values(values);
  return {agg.mean * scale, agg.std_dev * scale, false};
}

}  // namespace

ColumnMarkers ExperimentTable::avg_markers() const {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(r.avg.mean);
  return pick_markers(v, /*higher_better=*/true);
}

ColumnMarkers ExperimentTable::delta_markers() const {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(r.delta.mean);
  return pick_markers(v, false);
}

ColumnMarkers ExperimentTable::ser_markers() const {
  std::vector<double> v;
  for (const auto& r : rows) {
    v.push_back(r.ser.infinite ? std::numeric_limits<double>::infinity() : r.ser.mean);
  }
  return pick_markers(v, false);
}

ColumnMarkers ExperimentTable::std_markers() const {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(r.std_dev.mean);
  return pick_markers(v, false);
}

ExperimentTable build_table(const std::vector<MethodEvaluations>& methods,
                            const std::string& dataset, const std::string& attribute) {
  if (methods.empty()) {
    throw DataError("build_table: no methods");
  }
  ExperimentTable table;
  table.dataset = dataset;
  table.attribute = attribute;
  for (const auto& m : methods) {
    if (m.runs.empty()) {
      throw DataError("build_table: method '" + m.method + "' has no runs");
    }
    std::vector<double> avgs;
    std::vector<metrics::FairnessReport> reports;
    for (const auto& r : m.runs) {
      avgs.push_back(r.avg_dice);
      reports.push_back(r.fairness);
    }
    auto agg = metrics::aggregate_runs(reports);

    TableRow row;
    row.method = m.method;
    row.run_count = static_cast<int64_t>(m.runs.size());
    row.avg = aggregate_cell(avgs, 100.0);
    row.delta = {agg.delta.mean * 100.0, agg.delta.std_dev * 100.0, false};
    row.ser = {agg.ser.mean, agg.ser.std_dev, agg.ser_infinite};
    row.std_dev = {agg.std_dev.mean * 100.0, agg.std_dev.std_dev * 100.0, false};
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string format_cell(const TableCell& cell) {
  if (cell.infinite) return "inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f_{%.2f}", cell.mean, cell.std_dev);
  return buf;
}

std::string to_csv(const ExperimentTable& table) {
  std::string csv =
      "dataset,attribute,method,runs,avg_mean,avg_std,delta_mean,delta_std,ser_mean,ser_std,"
      "ser_infinite,std_mean,std_std\n";
  for (const auto& r : table.rows) {
    csv += table.dataset + "," + table.attribute + "," + r.method + "," +
           std::to_string(r.run_count) + "," + fmt_double(r.avg.mean) + "," +
           fmt_double(r.avg.std_dev) + "," + fmt_double(r.delta.mean) + "," +
           fmt_double(r.delta.std_dev) + "," + fmt_double(r.ser.mean) + "," +
           fmt_double(r.ser.std_dev) + "," + (r.ser.infinite ? "1" : "0") + "," +
           fmt_double(r.std_dev.mean) + "," + fmt_double(r.std_dev.std_dev) + "\n";
  }
  return csv;
}

ExperimentTable table_from_csv(const std::string& csv) {
  std::stringstream ss(csv);
  std::string line;
  if (!std::getline(ss, line)) {
    throw DataError("table_from_csv: empty input");
  }
  ExperimentTable table;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    auto f = split_line(line);
    if (f.size() != 13) {
      throw DataError("table_from_csv: expected 13 fields, got " + std::to_string(f.size()));
    }
    table.dataset = f[0];
    table.attribute = f[1];
    TableRow row;
    row.method = f[2];
    row.run_count = std::stoll(f[3]);
    row.avg = {parse_double(f[4]), parse_double(f[5]), false};
    row.delta = {parse_double(f[6]), parse_double(f[7]), false};
    row.ser = {parse_double(f[8]), parse_double(f[9]), f[10] == "1"};
    row.std_dev = {parse_double(f[11]), parse_double(f[12]), false};
    table.rows.push_back(std::move(row));
  }
  return table;
}

namespace {

std::string marked_cell(const TableCell& cell, int64_t row, const ColumnMarkers& markers,
                        bool markdown) {
  std::string s = format_cell(cell);
  if (row == markers.best) {
    return markdown ? "**" + s + "**" : s + "*";
  }
  if (row == markers.second) {
    return markdown ? "*" + s + "*" : s + "+";
  }
  return s;
}

}  // namespace

std::string to_text(const ExperimentTable& table) {
  const auto am = table.avg_markers();
  const auto dm = table.delta_markers();
  const auto sm = table.ser_markers();
  const auto tm = table.std_markers();

  std::vector<std::vector<std::string>> cells;
  cells.push_back({"method", "Avg", "Delta", "SER", "STD"});
  for (size_t i = 0; i < table.rows.size(); ++i) {
    const auto& r = table.rows[i];
    const auto row = static_cast<int64_t>(i);
    cells.push_back({r.method, marked_cell(r.avg, row, am, false),
                     marked_cell(r.delta, row, dm, false), marked_cell(r.ser, row, sm, false),
                     marked_cell(r.std_dev, row, tm, false)});
  }
  std::vector<size_t> widths(5, 0);
  for (const auto& row : cells) {
    for (size_t c = 0; c < 5; ++c) widths[c] = std::max(widths[c], row[c].size());
  }
  std::ostringstream os;
  os << "# dataset=" << table.dataset << " attribute=" << table.attribute
     << " (values x100, SER unscaled; * best, + second best)\n";
  for (const auto& row : cells) {
    for (size_t c = 0; c < 5; ++c) {
      os << row[c] << std::string(widths[c] - row[c].size() + 2, ' ');
    }
    os << "\n";
  }
  return os.str();
}

std::string to_markdown(const ExperimentTable& table) {
  const auto am = table.avg_markers();
  const auto dm = table.delta_markers();
  const auto sm = table.ser_markers();
  const auto tm = table.std_markers();
  std::ostringstream os;
  os << "| method | Avg | Delta | SER | STD |\n";
  os << "|---|---|---|---|---|\n";
  for (size_t i = 0; i < table.rows.size(); ++i) {
    const auto& r = table.rows[i];
    const auto row = static_cast<int64_t>(i);
    os << "| " << r.method << " | " << marked_cell(r.avg, row, am, true) << " | "
       << marked_cell(r.delta, row, dm, true) << " | " << marked_cell(r.ser, row, sm, true)
       << " | " << marked_cell(r.std_dev, row, tm, true) << " |\n";
  }
  return os.str();
}

std::vector<BetaSweepRow> beta_sweep_summary(const std::vector<BetaSweepEntry>& entries) {
  if (entries.empty()) {
    throw DataError("beta_sweep_summary: no entries");
  }
  bool all_have_probe = true;
  for (const auto& e : entries) {
    if (e.probe_accuracies.empty()) all_have_probe = false;
  }

  auto sorted = entries;
  std::sort(sorted.begin(), sorted.end(),
            [](const BetaSweepEntry& a, const BetaSweepEntry& b) { return a.beta < b.beta; });

  std::vector<BetaSweepRow> rows;
  for (const auto& e : sorted) {
    std::vector<double> avgs;
    std::vector<metrics::FairnessReport> reports;
    for (const auto& r : e.evals.runs) {
      avgs.push_back(r.avg_dice);
      reports.push_back(r.fairness);
    }
    auto agg = metrics::aggregate_runs(reports);
    BetaSweepRow row;
    row.beta = e.beta;
    row.run_count = static_cast<int64_t>(e.evals.runs.size());
    row.avg = aggregate_cell(avgs, 100.0);
    row.delta = {agg.delta.mean * 100.0, agg.delta.std_dev * 100.0, false};
    row.ser = {agg.ser.mean, agg.ser.std_dev, agg.ser_infinite};
    row.std_dev = {agg.std_dev.mean * 100.0, agg.std_dev.std_dev * 100.0, false};
    if (all_have_probe) {
      row.has_probe = true;
      row.probe = aggregate_cell(e.probe_accuracies, 100.0);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string sweep_to_csv(const std::vector<BetaSweepRow>& rows) {
  const bool probe = !rows.empty() && rows.front().has_probe;
  std::string csv = "beta,runs,avg_mean,avg_std,delta_mean,delta_std,ser_mean,ser_std,"
                    "ser_infinite,std_mean,std_std";
  if (probe) csv += ",probe_mean,probe_std";
  csv += "\n";
  for (const auto& r : rows) {
    csv += fmt_double(r.beta) + "," + std::to_string(r.run_count) + "," + fmt_double(r.avg.mean) +
           "," + fmt_double(r.avg.std_dev) + "," + fmt_double(r.delta.mean) + "," +
           fmt_double(r.delta.std_dev) + "," + fmt_double(r.ser.mean) + "," +
           fmt_double(r.ser.std_dev) + "," + (r.ser.infinite ? "1" : "0") + "," +
           fmt_double(r.std_dev.mean) + "," + fmt_double(r.std_dev.std_dev);
    if (probe) {
      csv += "," + fmt_double(r.probe.mean) + "," + fmt_double(r.probe.std_dev);
    }
    csv += "\n";
  }
  return csv;
}

std::string sweep_to_text(const std::vector<BetaSweepRow>& rows) {
  const bool probe = !rows.empty() && rows.front().has_probe;
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header = {"beta", "Avg", "Delta", "SER", "STD"};
  if (probe) header.push_back("probe_acc");
  cells.push_back(header);
  for (const auto& r : rows) {
    char beta_buf[32];
    std::snprintf(beta_buf, sizeof(beta_buf), "%g", r.beta);
    std::vector<std::string> row = {beta_buf, format_cell(r.avg), format_cell(r.delta),
                                    format_cell(r.ser), format_cell(r.std_dev)};
    if (probe) row.push_back(format_cell(r.probe));
    cells.push_back(row);
  }
  std::vector<size_t> widths(cells.front().size(), 0);
  for (const auto& row : cells) {
    for (size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
  }
  std::ostringstream os;
  for (const auto& row : cells) {
    for (size_t c = 0; c < row.size(); ++c) {
      os << row[c] << std::string(widths[c] - row[c].size() + 2, ' ');
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace fairseg::report
