#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace fairseg::train {

struct TrainConfig {
  int64_t epochs = 50;
  int64_t batch_size = 16;
  double lr_generator = 1e-3;      // Adam
  double lr_discriminator = 1e-3;  // Adam
  double lr_segmentor = 1e-2;      // momentum-free SGD
  double alpha = 0.1;              // confusion entropy weight
  double beta = 1.0;               // fairness loss weight
  uint64_t seed = 0;
  std::string device = "cpu";
  double validation_fraction = 0.1;
  bool augment = true;  // random flips and 90-degree rotations
  bool verbose = false;

  void validate() const;
  nlohmann::json to_json() const;
};

struct EpochRecord {
  int64_t epoch = 0;  // 1-based
  // Per-batch adversarial losses; empty for plain segmentor training.
  std::vector<double> batch_loss_d;
  std::vector<double> batch_loss_g;
  std::vector<double> batch_loss_g_seg;
  std::vector<double> batch_loss_g_fair;
  // Per-batch segmentation loss for plain segmentor training.
  std::vector<double> batch_loss_seg;
  // Epoch means (NaN where the loss does not apply to the run kind).
  double loss_d = std::numeric_limits<double>::quiet_NaN();
  double loss_g = std::numeric_limits<double>::quiet_NaN();
  double loss_g_seg = std::numeric_limits<double>::quiet_NaN();
  double loss_g_fair = std::numeric_limits<double>::quiet_NaN();
  double loss_seg = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> val_dice;  // per subgroup (NaN where unpopulated)
  double val_dice_mean = std::numeric_limits<double>::quiet_NaN();  // sample mean
};

struct RunManifest {
  std::string kind;  // baseline | apple | rs | sm
  nlohmann::json config;
  uint64_t seed = 0;
  std::string attribute;
  int64_t subgroup_count = 0;
  int64_t class_count = 0;
  std::vector<EpochRecord> history;
  std::string frozen_hash_start;  // apple runs: frozen segmentor digest
  std::string frozen_hash_end;
  std::map<std::string, std::string> checkpoints;  // name -> path relative to run dir
  int64_t best_epoch = -1;   // checkpointed epoch for val-selected runs
  bool requires_attribute = false;  // sm: routing needs the subgroup at test time

  // Writes manifest.json and history.csv into run_dir.
  void write(const std::filesystem::path& run_dir) const;
  static RunManifest read(const std::filesystem::path& run_dir);

  // history.csv bytes; apple runs carry the adversarial loss columns,
  // other kinds a single L_seg column.
  std::string history_csv() const;
};

}  // namespace fairseg::train
