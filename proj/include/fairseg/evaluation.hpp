#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fairseg/data_model.hpp"
#include "fairseg/fairness_metrics.hpp"

namespace fairseg::train {

struct SampleScore {
  std::string id;
  int64_t attribute = 0;
  double dice = 0.0;
};

struct EvaluationResult {
  std::vector<SampleScore> per_sample;
  metrics::UtilityVector utilities;
  metrics::FairnessReport fairness_sample;      // ddof = K'-1
  metrics::FairnessReport fairness_population;  // ddof = K'
  double avg_dice = 0.0;        // mean over all test samples (primary)
  double macro_avg_dice = 0.0;  // mean of subgroup means
  bool requires_attribute = false;
};

// Predictor maps (images BxCxHxW, attributes B) to label maps BxHxW; plain
// models ignore the attributes, subgroup routing needs them.
using Predictor =
    std::function<torch::Tensor(const torch::Tensor& images, const torch::Tensor& attributes)>;

EvaluationResult evaluate_predictor(const Predictor& predictor, const data::SegDataset& test_set,
                                    int64_t batch_size = 32);

// id,attribute,dice rows, one per test sample.
std::string per_sample_csv(const EvaluationResult& result);
void write_per_sample_csv(const std::filesystem::path& path, const EvaluationResult& result);

}  // namespace fairseg::train
