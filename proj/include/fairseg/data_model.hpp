#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace fairseg::data {

struct Sample {
  std::string id;
  torch::Tensor image;  // float32 CxHxW, standardized per image (zero mean, unit variance)
  torch::Tensor mask;   // int64 HxW, class ids in [0, class_count)
  int64_t attribute = 0;
  std::string raw_attribute;  // original metadata value, e.g. "F" or "42"
};

enum class AttributeKind { Categorical, BinnedNumeric };

struct AttributeSpec {
  std::string name;
  AttributeKind kind = AttributeKind::Categorical;
  std::vector<double> bins;                // BinnedNumeric: K+1 increasing edges
  std::vector<std::string> categories;     // Categorical: value at index k maps to k

  int64_t subgroup_count() const;
  std::vector<std::string> subgroup_labels() const;
  void validate() const;

  // Built-in specs: sex is categorical {F, M}; age uses 20-year bins over
  // [0, 100] with the last bin closed.
  static AttributeSpec sex();
  static AttributeSpec age();
};

// Bin index of a numeric value under half-open bins [e_k, e_{k+1}), with the
// final bin closed. Out-of-range values are an error naming value and spec.
int64_t bin_attribute(double value, const AttributeSpec& spec);

struct SegDataset {
  std::vector<Sample> samples;
  int64_t subgroup_count = 0;  // K
  int64_t class_count = 0;     // L
  std::string attribute_name;
  std::vector<std::string> subgroup_labels;

  int64_t size() const { return static_cast<int64_t>(samples.size()); }
  std::vector<int64_t> subgroup_sizes() const;
  void validate() const;
};

struct LoadOptions {
  int64_t resolution = 256;  // images and masks are resized to this square
  int64_t class_count = 0;   // 0 = infer from masks (max id + 1, at least 2)
};

// Loads root/images/<id>.png, root/masks/<id>.png and root/metadata.csv
// (header "id,sex,age"); samples are ordered by id. The spec picks which
// metadata column becomes the protected attribute.
SegDataset load_dataset(const std::filesystem::path& root, const AttributeSpec& spec,
                        const LoadOptions& options = {});

// Stratified split: per subgroup, floor(ratio*n) samples go to train plus one
// more when the product has a fractional remainder; subgroups with fewer than
// two samples go entirely to train with a warning. Order inside each part is
// by id. Deterministic in (dataset, ratio, seed).
std::pair<SegDataset, SegDataset> split_dataset(const SegDataset& dataset, double train_ratio,
                                                uint64_t seed);

// Same images under a different subgroup labeling (e.g. the age view of a
// sex-stratified split); membership and order are preserved.
SegDataset subset_by_ids(const SegDataset& source, const std::unordered_set<std::string>& ids);

// Samples belonging to one subgroup; keeps K and labels of the parent.
SegDataset subgroup_subset(const SegDataset& dataset, int64_t subgroup);

}  // namespace fairseg::data
