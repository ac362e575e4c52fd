#include <torch/torch.h>

#include <CLI11.hpp>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "fairseg/cli_commands.hpp"
#include "fairseg/error.hpp"
#include "fairseg/reporting.hpp"

namespace {

using fairseg::cli::TrainOptions;

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw fairseg::ConfigError("cannot read config file " + path);
  }
  return nlohmann::json::parse(in);
}

void apply_profile(const std::string& name, TrainOptions& opts) {
  if (name == "desk") {
    opts.profile.base_channels = 8;
    opts.data.resolution = 64;
  } else if (name == "paper") {
    opts.profile.base_channels = 16;
    opts.data.resolution = 256;
  } else {
    throw fairseg::ConfigError("unknown profile '" + name + "' (expected desk or paper)");
  }
}

// Shared flags of `train` and `sweep-beta`. Values land in locals first so a
// --config file never clobbers flags given on the command line.
struct TrainArgs {
  std::string config_path;
  std::string profile_name;
  std::string data_root;
  std::string baseline;
  std::string attribute;
  int64_t epochs = 0;
  int64_t batch_size = 0;
  int64_t repeats = 1;
  int64_t resolution = 0;
  int64_t base_channels = 0;
  double alpha = 0.0;
  double beta = 0.0;
  double lr_generator = 0.0;
  double lr_discriminator = 0.0;
  double lr_segmentor = 0.0;
  double validation_fraction = 0.0;
  double split_ratio = 0.0;
  uint64_t seed = 0;
  uint64_t split_seed = 0;
  bool no_augment = false;
  bool force = false;
  bool verbose = false;
};

void add_train_flags(CLI::App* sub, TrainArgs& a) {
  sub->add_option("--data", a.data_root, "dataset directory (images/, masks/, metadata.csv)");
  sub->add_option("--config", a.config_path, "JSON config file (train/data/profile/repeats)");
  sub->add_option("--profile", a.profile_name, "size preset: desk (64px, base 8) or paper (256px, base 16)");
  sub->add_option("--attribute", a.attribute, "protected attribute view: sex or age");
  sub->add_option("--resolution", a.resolution, "input resolution (multiple of 16)");
  sub->add_option("--base-channels", a.base_channels, "segmentor width multiplier");
  sub->add_option("--epochs", a.epochs, "training epochs");
  sub->add_option("--batch-size", a.batch_size, "minibatch size");
  sub->add_option("--alpha", a.alpha, "confusion entropy weight");
  sub->add_option("--beta", a.beta, "fairness loss weight");
  sub->add_option("--lr-generator", a.lr_generator, "perturbation generator learning rate");
  sub->add_option("--lr-discriminator", a.lr_discriminator, "attribute discriminator learning rate");
  sub->add_option("--lr-segmentor", a.lr_segmentor, "segmentor learning rate");
  sub->add_option("--val-fraction", a.validation_fraction, "fraction of the train split held out per run");
  sub->add_option("--split-ratio", a.split_ratio, "train fraction of the stratified train/test split");
  sub->add_option("--split-seed", a.split_seed, "train/test split seed");
  sub->add_option("--seed", a.seed, "master training seed");
  sub->add_option("--repeats", a.repeats, "independent runs with derived seeds");
  sub->add_flag("--no-augment", a.no_augment, "disable flip/rotation augmentation");
  sub->add_flag("--force", a.force, "overwrite existing run directories");
  sub->add_flag("--verbose", a.verbose, "per-epoch progress on stderr");
}

TrainOptions build_train_options(CLI::App* sub, const TrainArgs& a) {
  TrainOptions opts;
  if (sub->count("--profile")) apply_profile(a.profile_name, opts);
  if (!a.config_path.empty()) {
    fairseg::cli::apply_train_config_json(read_json_file(a.config_path), opts);
  }
  if (sub->count("--data")) opts.data.root = a.data_root;
  if (sub->count("--attribute")) opts.data.attribute = a.attribute;
  if (sub->count("--resolution")) opts.data.resolution = a.resolution;
  if (sub->count("--base-channels")) opts.profile.base_channels = a.base_channels;
  if (sub->count("--epochs")) opts.train.epochs = a.epochs;
  if (sub->count("--batch-size")) opts.train.batch_size = a.batch_size;
  if (sub->count("--alpha")) opts.train.alpha = a.alpha;
  if (sub->count("--beta")) opts.train.beta = a.beta;
  if (sub->count("--lr-generator")) opts.train.lr_generator = a.lr_generator;
  if (sub->count("--lr-discriminator")) opts.train.lr_discriminator = a.lr_discriminator;
  if (sub->count("--lr-segmentor")) opts.train.lr_segmentor = a.lr_segmentor;
  if (sub->count("--val-fraction")) opts.train.validation_fraction = a.validation_fraction;
  if (sub->count("--split-ratio")) opts.data.split_ratio = a.split_ratio;
  if (sub->count("--split-seed")) opts.data.split_seed = a.split_seed;
  if (sub->count("--seed")) opts.train.seed = a.seed;
  if (sub->count("--repeats")) opts.repeats = a.repeats;
  if (a.no_augment) opts.train.augment = false;
  if (a.verbose) opts.train.verbose = true;
  opts.force = a.force;
  opts.baseline_dir = a.baseline;
  if (opts.data.root.empty()) {
    throw fairseg::ConfigError("no dataset given; pass --data or a config file with a data.root");
  }
  return opts;
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);

  CLI::App app{"fairness-aware segmentation workbench: train a segmentor, then shrink "
               "subgroup performance gaps by perturbing its frozen latent embedding"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic ellipse/blob dataset");
  std::string synth_out, synth_config, synth_shapes;
  int64_t synth_n = 0, synth_resolution = 0;
  double synth_balance = 0.0, synth_gap = 0.0;
  uint64_t synth_seed = 0;
  std::vector<double> synth_age_weights;
  bool synth_force = false;
  synth->add_option("--out", synth_out, "dataset output directory")->required();
  synth->add_option("--config", synth_config, "JSON config file");
  synth->add_option("--n", synth_n, "number of samples");
  synth->add_option("--resolution", synth_resolution, "image side length (>= 32)");
  synth->add_option("--balance", synth_balance, "fraction of sex=F samples, in (0,1)");
  synth->add_option("--gap", synth_gap, "difficulty gap against sex=M, in [0,1)");
  synth->add_option("--shapes", synth_shapes, "shape family: ellipse or blob");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--age-weights", synth_age_weights, "five age-bin weights")->expected(5);
  synth->add_flag("--force", synth_force, "regenerate even if the directory differs");
  synth->callback([&] {
    fairseg::synth::SynthConfig config;
    if (!synth_config.empty()) {
      config = fairseg::cli::synth_config_from_json(read_json_file(synth_config));
    }
    if (synth->count("--n")) config.n_samples = synth_n;
    if (synth->count("--resolution")) config.resolution = synth_resolution;
    if (synth->count("--balance")) config.attribute_balance = synth_balance;
    if (synth->count("--gap")) config.difficulty_gap = synth_gap;
    if (synth->count("--shapes")) {
      config.shape_family = fairseg::synth::shape_family_from_string(synth_shapes);
    }
    if (synth->count("--seed")) config.seed = synth_seed;
    if (synth->count("--age-weights")) config.age_bin_weights = synth_age_weights;
    auto dataset = fairseg::cli::cmd_synth(config, synth_out, synth_force);
    std::cout << "wrote " << dataset.samples.size() << " samples to "
              << fairseg::cli::resolve_out(synth_out).string() << "\n";
  });

  // train
  auto* train = app.add_subcommand("train", "train one method: baseline, rs, sm, or apple");
  std::string train_kind, train_out;
  TrainArgs train_args;
  train->add_option("kind", train_kind, "baseline | rs | sm | apple")
      ->required()
      ->check(CLI::IsMember({"baseline", "rs", "sm", "apple"}));
  train->add_option("--out", train_out, "run output directory")->required();
  train->add_option("--baseline", train_args.baseline,
                    "frozen segmentor for apple: a baseline run or checkpoint directory");
  add_train_flags(train, train_args);
  train->callback([&] {
    auto opts = build_train_options(train, train_args);
    auto dirs = fairseg::cli::cmd_train(train_kind, opts, train_out);
    for (const auto& d : dirs) {
      std::cout << "trained " << train_kind << " run at " << d.string() << "\n";
    }
  });

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "score runs of one method on their test split");
  std::vector<std::string> eval_runs;
  std::string eval_out, eval_data, eval_attribute, eval_method;
  evaluate->add_option("--runs", eval_runs, "run directories (repeats of one method)")
      ->required()
      ->expected(-1);
  evaluate->add_option("--out", eval_out, "evaluation output directory")->required();
  evaluate->add_option("--data", eval_data, "override the recorded dataset root");
  evaluate->add_option("--attribute", eval_attribute, "override the attribute view (baseline only)");
  evaluate->add_option("--method", eval_method, "method label for tables");
  evaluate->callback([&] {
    fairseg::cli::EvaluateOptions options;
    for (const auto& r : eval_runs) options.run_dirs.emplace_back(r);
    options.data_root = eval_data;
    options.attribute = eval_attribute;
    options.method = eval_method;
    auto output = fairseg::cli::cmd_evaluate(options, eval_out);
    std::cout << "evaluated " << output.evals.runs.size() << " run(s) of "
              << output.evals.method << "; report at "
              << (fairseg::cli::resolve_out(eval_out) / "report.json").string() << "\n";
  });

  // report
  auto* rep = app.add_subcommand("report", "merge evaluation reports into one comparison table");
  std::vector<std::string> report_inputs;
  std::string report_out;
  rep->add_option("inputs", report_inputs, "report.json files or evaluation directories")
      ->required()
      ->expected(-1);
  rep->add_option("--out", report_out, "table output directory")->required();
  rep->callback([&] {
    std::vector<std::filesystem::path> paths(report_inputs.begin(), report_inputs.end());
    auto table = fairseg::cli::cmd_report(paths, report_out);
    std::cout << fairseg::report::to_text(table);
  });

  // sweep-beta
  auto* sweep = app.add_subcommand("sweep-beta", "train and evaluate apple across beta values");
  std::string sweep_out;
  TrainArgs sweep_args;
  std::vector<double> sweep_betas;
  bool sweep_probe = false;
  sweep->add_option("--out", sweep_out, "sweep output directory")->required();
  sweep->add_option("--baseline", sweep_args.baseline,
                    "frozen segmentor: a baseline run or checkpoint directory")
      ->required();
  sweep->add_option("--betas", sweep_betas, "beta values to sweep")->expected(-1);
  sweep->add_flag("--probe", sweep_probe, "fit an attribute probe on each run's embeddings");
  add_train_flags(sweep, sweep_args);
  sweep->callback([&] {
    fairseg::cli::SweepOptions options;
    options.train = build_train_options(sweep, sweep_args);
    if (sweep->count("--betas")) options.betas = sweep_betas;
    options.probe = sweep_probe;
    auto rows = fairseg::cli::cmd_sweep_beta(options, sweep_out);
    std::cout << fairseg::report::sweep_to_text(rows);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const fairseg::Error& e) {
    std::cerr << "error: category=" << e.category() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: category=internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
