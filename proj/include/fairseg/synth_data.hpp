#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fairseg/data_model.hpp"

namespace fairseg::synth {

enum class ShapeFamily { Ellipse, Blob };

ShapeFamily shape_family_from_string(const std::string& s);
std::string to_string(ShapeFamily f);

struct SynthConfig {
  int64_t n_samples = 1000;
  int64_t resolution = 64;          // >= 32
  double attribute_balance = 0.5;   // P(subgroup 1), in (0,1)
  double difficulty_gap = 0.0;      // >= 0; contrast loss + extra noise for subgroup 1
  ShapeFamily shape_family = ShapeFamily::Ellipse;
  uint64_t seed = 0;
  // Sampling weights for the five 20-year age bins written to metadata; the
  // skewed default keeps the oldest bin rare.
  std::vector<double> age_bin_weights = {0.36, 0.30, 0.20, 0.125, 0.015};

  void validate() const;
};

// Writes images/, masks/, metadata.csv (id,sex,age) and synth_manifest.json
// under out_root, then loads the result back (sex view, native resolution).
// Bitwise deterministic in the config; per-sample streams derive from
// (seed, index).
data::SegDataset generate(const SynthConfig& config, const std::filesystem::path& out_root);

}  // namespace fairseg::synth
