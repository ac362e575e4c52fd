#include "fairseg/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "fairseg/error.hpp"
#include "fairseg/training.hpp"

namespace fairseg::train {

EvaluationResult evaluate_predictor(const Predictor& predictor, const data::SegDataset& test_set,
                                    int64_t batch_size) {
  if (test_set.size() == 0) {
    throw DataError("evaluate_predictor: empty test set");
  }
  EvaluationResult result;
  const auto n = test_set.size();
  for (int64_t start = 0; start < n; start += batch_size) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
    auto batch = collate(test_set, idx);
    auto labels = predictor(batch.images, batch.attributes);
    for (size_t bi = 0; bi < idx.size(); ++bi) {
      const auto& s = test_set.samples[idx[bi]];
      SampleScore score;
      score.id = s.id;
      score.attribute = s.attribute;
      score.dice = metrics::sample_dice(labels[bi], s.mask, test_set.class_count);
      result.per_sample.push_back(std::move(score));
    }
  }

  std::vector<std::pair<double, int64_t>> pairs;
  double total = 0.0;
  for (const auto& s : result.per_sample) {
    pairs.emplace_back(s.dice, s.attribute);
    total += s.dice;
  }
  result.avg_dice = total / static_cast<double>(result.per_sample.size());
  result.utilities = metrics::subgroup_utilities(pairs, test_set.subgroup_count);
  result.fairness_sample = metrics::fairness(result.utilities, metrics::Ddof::Sample);
  result.fairness_population = metrics::fairness(result.utilities, metrics::Ddof::Population);
  result.macro_avg_dice = result.fairness_sample.mean_utility;
  return result;
}

std::string per_sample_csv(const EvaluationResult& result) {
  std::string csv = "id,attribute,dice\n";
  char buf[64];
  for (const auto& s : result.per_sample) {
    std::snprintf(buf, sizeof(buf), "%.17g", s.dice);
    csv += s.id + "," + std::to_string(s.attribute) + "," + buf + "\n";
  }
  return csv;
}

void write_per_sample_csv(const std::filesystem::path& path, const EvaluationResult& result) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("cannot write per-sample csv at " + path.string());
  }
  out << per_sample_csv(result);
}

}  // namespace fairseg::train
