#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <utility>
#include <vector>

namespace fairseg::metrics {

// Denominator guard for the skewed error ratio when the best subgroup error
// is (near) zero.
inline constexpr double kSerEpsilon = 1e-8;

// Dice overlap of two binary masks of equal shape. Both masks empty -> 1.0.
double dice(const torch::Tensor& pred, const torch::Tensor& gt);

// Mean Dice over foreground classes 1..L-1 of integer label maps; for L=2
// this is the plain binary Dice of class 1.
double sample_dice(const torch::Tensor& pred, const torch::Tensor& gt, int64_t class_count);

struct UtilityVector {
  std::vector<double> values;   // mean utility per subgroup; NaN where empty
  std::vector<int64_t> counts;  // samples per subgroup
  int64_t subgroup_count() const { return static_cast<int64_t>(values.size()); }
};

// Per-subgroup mean of (score, subgroup) pairs. Empty subgroups are excluded
// (NaN value, zero count) with a warning; all-empty is an error.
UtilityVector subgroup_utilities(const std::vector<std::pair<double, int64_t>>& scores,
                                 int64_t subgroup_count);

enum class Ddof { Sample, Population };

struct FairnessReport {
  double delta = 0.0;         // max_k I_k - min_k I_k
  double ser = 0.0;           // max_k (1 - I_k) / max(min_k (1 - I_k), eps)
  bool ser_infinite = false;  // best subgroup error underflowed the guard
  double std_dev = 0.0;       // spread of I_k, divisor per ddof
  double mean_utility = 0.0;  // unweighted mean over populated subgroups
  Ddof ddof = Ddof::Sample;
};

// Gap metrics over the populated subgroups of a utility vector. Requires at
// least two populated subgroups and utilities within [0,1].
FairnessReport fairness(const UtilityVector& utilities, Ddof ddof = Ddof::Sample);

struct MetricAggregate {
  double mean = 0.0;
  double std_dev = 0.0;  // sample standard deviation over runs (0 for one run)
};

// Plain mean and sample standard deviation of repeated measurements.
MetricAggregate aggregate_values(const std::vector<double>& values);

struct RunAggregate {
  MetricAggregate delta;
  MetricAggregate ser;       // over finite SER values only
  bool ser_infinite = false; // any contributing report was flagged
  MetricAggregate std_dev;
  MetricAggregate mean_utility;
  int64_t run_count = 0;
};

// Mean and spread of each fairness metric across repeated runs.
RunAggregate aggregate_runs(const std::vector<FairnessReport>& reports);

}  // namespace fairseg::metrics
