#include "fairseg/fairness_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fairseg/error.hpp"
#include "fairseg/log.hpp"

namespace fairseg::metrics {

double dice(const torch::Tensor& pred, const torch::Tensor& gt) {
  if (!pred.sizes().equals(gt.sizes())) {
    throw DataError("dice: mask shapes differ (" + std::to_string(pred.numel()) + " vs " +
                    std::to_string(gt.numel()) + " elements)");
  }
  auto p = pred.detach().to(torch::kBool);
  auto g = gt.detach().to(torch::kBool);
  const double inter = (p & g).sum().item<double>();
  const double total = p.sum().item<double>() + g.sum().item<double>();
  if (total == 0.0) {
    return 1.0;
  }
  return 2.0 * inter / total;
}

double sample_dice(const torch::Tensor& pred, const torch::Tensor& gt, int64_t class_count) {
  if (class_count < 2) {
    throw DataError("sample_dice: class_count must be >= 2");
  }
  double sum = 0.0;
  for (int64_t c = 1; c < class_count; ++c) {
    sum += dice(pred == c, gt == c);
  }
  return sum / static_cast<double>(class_count - 1);
}

UtilityVector subgroup_utilities(const std::vector<std::pair<double, int64_t>>& scores,
                                 int64_t subgroup_count) {
  if (subgroup_count < 1) {
    throw DataError("subgroup_utilities: subgroup_count must be >= 1");
  }
  UtilityVector out;
  out.values.assign(subgroup_count, std::numeric_limits<double>::quiet_NaN());
  out.counts.assign(subgroup_count, 0);
  std::vector<double> sums(subgroup_count, 0.0);
  for (const auto& [score, k] : scores) {
    if (k < 0 || k >= subgroup_count) {
      throw DataError("subgroup_utilities: subgroup id " + std::to_string(k) +
                      " out of range [0," + std::to_string(subgroup_count) + ")");
    }
    sums[k] += score;
    out.counts[k] += 1;
  }
  int64_t populated = 0;
  for (int64_t k = 0; k < subgroup_count; ++k) {
    if (out.counts[k] > 0) {
      out.values[k] = sums[k] / static_cast<double>(out.counts[k]);
      ++populated;
    } else {
      log_warn("subgroup " + std::to_string(k) + " has no samples; utility undefined");
    }
  }
  if (populated == 0) {
    throw DataError("subgroup_utilities: every subgroup is empty");
  }
  return out;
}

FairnessReport fairness(const UtilityVector& utilities, Ddof ddof) {
  std::vector<double> vals;
  vals.reserve(utilities.values.size());
  for (int64_t k = 0; k < utilities.subgroup_count(); ++k) {
    if (utilities.counts[k] > 0) {
      const double v = utilities.values[k];
      if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
        throw DataError("fairness: utility for subgroup " + std::to_string(k) +
                        " is outside [0,1]");
      }
      vals.push_back(v);
    }
  }
  if (vals.size() < 2) {
    throw DataError("fairness: needs at least 2 populated subgroups, got " +
                    std::to_string(vals.size()));
  }

  FairnessReport rep;
  rep.ddof = ddof;
  const auto [lo, hi] = std::minmax_element(vals.begin(), vals.end());
  rep.delta = *hi - *lo;

  double max_err = 0.0;
  double min_err = std::numeric_limits<double>::infinity();
  for (double v : vals) {
    const double e = 1.0 - v;
    max_err = std::max(max_err, e);
    min_err = std::min(min_err, e);
  }
  rep.ser_infinite = min_err < kSerEpsilon;
  rep.ser = max_err / std::max(min_err, kSerEpsilon);

  double mean = 0.0;
  for (double v : vals) mean += v;
  mean /= static_cast<double>(vals.size());
  rep.mean_utility = mean;

  double ss = 0.0;
  for (double v : vals) ss += (v - mean) * (v - mean);
  const double divisor =
      ddof == Ddof::Sample ? static_cast<double>(vals.size() - 1) : static_cast<double>(vals.size());
  rep.std_dev = std::sqrt(ss / divisor);
  return rep;
}

MetricAggregate aggregate_values(const std::vector<double>& values) {
  if (values.empty()) {
    throw DataError("aggregate_values: empty input");
  }
  MetricAggregate agg;
  for (double v : values) agg.mean += v;
  agg.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - agg.mean) * (v - agg.mean);
    agg.std_dev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return agg;
}

RunAggregate aggregate_runs(const std::vector<FairnessReport>& reports) {
  if (reports.empty()) {
    throw DataError("aggregate_runs: no reports");
  }
  RunAggregate agg;
  agg.run_count = static_cast<int64_t>(reports.size());
  std::vector<double> deltas, sers, stds, means;
  for (const auto& r : reports) {
    deltas.push_back(r.delta);
    stds.push_back(r.std_dev);
    means.push_back(r.mean_utility);
    if (r.ser_infinite) {
      agg.ser_infinite = true;
    } else {
      sers.push_back(r.ser);
    }
  }
  agg.delta = aggregate_values(deltas);
  agg.std_dev = aggregate_values(stds);
  agg.mean_utility = aggregate_values(means);
  if (!sers.empty()) {
    agg.ser = aggregate_values(sers);
  } else {
    agg.ser.mean = std::numeric_limits<double>::quiet_NaN();
    agg.ser.std_dev = std::numeric_limits<double>::quiet_NaN();
  }
  return agg;
}

}  // namespace fairseg::metrics
