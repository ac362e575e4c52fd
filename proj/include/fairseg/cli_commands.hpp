#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fairseg/apple_core.hpp"
#include "fairseg/data_model.hpp"
#include "fairseg/evaluation.hpp"
#include "fairseg/reporting.hpp"
#include "fairseg/run_types.hpp"
#include "fairseg/segmentor_zoo.hpp"
#include "fairseg/synth_data.hpp"
#include "fairseg/training.hpp"

namespace fairseg::cli {

// Relative output paths resolve under $FAIRSEG_OUT_ROOT when it is set.
std::filesystem::path resolve_out(const std::filesystem::path& path);

// Rejects keys outside the allowed set, naming the offender.
void require_known_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                        const std::string& context);

// Dataset location and split parameters; persisted into every run manifest so
// evaluation can rebuild the exact test set.
struct DataConfig {
  std::filesystem::path root;
  std::string attribute = "sex";  // sex | age
  int64_t resolution = 64;
  double split_ratio = 0.7;
  uint64_t split_seed = 42;

  data::AttributeSpec attribute_spec() const;
  nlohmann::json to_json() const;
  static DataConfig from_json(const nlohmann::json& j);
  void validate() const;
};

struct TrainOptions {
  train::TrainConfig train;
  DataConfig data;
  zoo::SegmentorProfile profile{8};
  int64_t repeats = 1;
  std::filesystem::path baseline_dir;  // apple: run or checkpoint dir of the frozen segmentor
  bool force = false;
};

// Distinct per-repeat seeds derived from the master seed (repeat 0 keeps the
// master itself).
std::vector<uint64_t> repeat_seeds(uint64_t master_seed, int64_t repeats);

// JSON config schemas (strict keys) used by the CLI --config files.
synth::SynthConfig synth_config_from_json(const nlohmann::json& j);
nlohmann::json synth_config_to_json(const synth::SynthConfig& config);
void apply_train_config_json(const nlohmann::json& j, TrainOptions& opts);

// Generates (or refuses to clobber) a synthetic dataset directory.
data::SegDataset cmd_synth(const synth::SynthConfig& config, const std::filesystem::path& out_root,
                           bool force);

// Trains `repeats` runs of one method kind; returns the run directories.
// Kinds: baseline, rs, apple (needs baseline_dir), sm.
std::vector<std::filesystem::path> cmd_train(const std::string& kind, const TrainOptions& opts,
                                             const std::filesystem::path& out_dir);

// A run directory rehydrated into a predictor.
struct LoadedRun {
  std::filesystem::path dir;
  train::RunManifest manifest;
  zoo::SplitSegmentor segmentor;        // baseline/rs, and the frozen base for apple
  apple::PerturberBundle bundle;        // apple only
  train::SubgroupModelSet models;       // sm only
  train::Predictor predictor();
};
LoadedRun load_run(const std::filesystem::path& run_dir);

struct EvaluateOptions {
  std::vector<std::filesystem::path> run_dirs;
  std::filesystem::path data_root;  // empty: use the runs' recorded root
  std::string attribute;            // empty: use the runs' recorded attribute
  std::string method;               // label; empty: the runs' kind
};

struct EvaluateOutput {
  report::MethodEvaluations evals;       // population-ddof reports, for tables
  std::vector<double> probe_accuracies;  // present when every run has probe.json
  nlohmann::json report_json;
  std::string dataset;
  std::string attribute;
};

// Evaluates runs of one method on the recorded test split; writes
// report.json, per-sample Dice csvs, and single-method tables into out_dir.
EvaluateOutput cmd_evaluate(const EvaluateOptions& options, const std::filesystem::path& out_dir);

// Merges several cmd_evaluate report.json files (same dataset and attribute)
// into one comparison table; writes table.csv/.txt/.md.
report::ExperimentTable cmd_report(const std::vector<std::filesystem::path>& report_paths,
                                   const std::filesystem::path& out_dir);

struct SweepOptions {
  TrainOptions train;              // beta is overridden per sweep point
  std::vector<double> betas{0.1, 1.0, 5.0};
  bool probe = false;  // fit an attribute probe per run, persisted as probe.json
};

// Trains and evaluates one apple run group per beta; writes
// sweep_summary.csv/.txt under out_dir.
std::vector<report::BetaSweepRow> cmd_sweep_beta(const SweepOptions& options,
                                                 const std::filesystem::path& out_dir);

}  // namespace fairseg::cli
