#include "fairseg/cli_commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>

#include "fairseg/error.hpp"
#include "fairseg/log.hpp"
#include "fairseg/rng.hpp"

namespace fairseg::cli {

namespace fs = std::filesystem;

namespace {

nlohmann::json json_from_double(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

double double_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  return j.get<double>();
}

std::string beta_dirname(double beta) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "beta_%g", beta);
  return buf;
}

void prepare_run_dir(const fs::path& run_dir, bool force) {
  if (fs::exists(run_dir) && !fs::is_empty(run_dir)) {
    if (!force) {
      throw StateError("output directory " + run_dir.string() +
                       " already exists; pass --force to overwrite");
    }
    fs::remove_all(run_dir);
  }
  fs::create_directories(run_dir);
}

// Accepts either a segmentor checkpoint directory or a run directory whose
// manifest points at one.
fs::path resolve_segmentor_checkpoint(const fs::path& path) {
  const auto manifest_path = path / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) {
    throw StateError("no manifest.json at " + path.string() +
                     "; expected a baseline run or segmentor checkpoint directory");
  }
  nlohmann::json j = nlohmann::json::parse(in);
  if (j.contains("state_sha256")) {
    return path;
  }
  if (j.contains("checkpoints")) {
    auto checkpoints = j.at("checkpoints").get<std::map<std::string, std::string>>();
    auto it = checkpoints.find("segmentor");
    if (it == checkpoints.end()) {
      throw StateError("run at " + path.string() + " has no segmentor checkpoint");
    }
    return path / it->second;
  }
  throw StateError("unrecognized manifest at " + manifest_path.string());
}

nlohmann::json fairness_to_json(const metrics::FairnessReport& r) {
  nlohmann::json j;
  j["delta"] = r.delta;
  j["ser"] = json_from_double(r.ser);
  j["ser_infinite"] = r.ser_infinite;
  j["std_dev"] = r.std_dev;
  j["mean_utility"] = r.mean_utility;
  j["ddof"] = r.ddof == metrics::Ddof::Sample ? "sample" : "population";
  return j;
}

metrics::FairnessReport fairness_from_json(const nlohmann::json& j) {
  metrics::FairnessReport r;
  r.delta = j.at("delta").get<double>();
  r.ser = double_from_json(j.at("ser"));
  r.ser_infinite = j.at("ser_infinite").get<bool>();
  r.std_dev = j.at("std_dev").get<double>();
  r.mean_utility = j.at("mean_utility").get<double>();
  r.ddof = j.at("ddof").get<std::string>() == "sample" ? metrics::Ddof::Sample
                                                       : metrics::Ddof::Population;
  return r;
}

nlohmann::json aggregate_to_json(const metrics::RunAggregate& a) {
  nlohmann::json j;
  j["delta"] = {{"mean", a.delta.mean}, {"std", a.delta.std_dev}};
  j["ser"] = {{"mean", json_from_double(a.ser.mean)},
              {"std", json_from_double(a.ser.std_dev)},
              {"infinite", a.ser_infinite}};
  j["std_dev"] = {{"mean", a.std_dev.mean}, {"std", a.std_dev.std_dev}};
  j["mean_utility"] = {{"mean", a.mean_utility.mean}, {"std", a.mean_utility.std_dev}};
  j["run_count"] = a.run_count;
  return j;
}

struct SplitData {
  data::SegDataset full, train_part, test_part;
};

SplitData load_split(const DataConfig& config) {
  config.validate();
  data::LoadOptions lo;
  lo.resolution = config.resolution;
  SplitData out;
  out.full = data::load_dataset(config.root, config.attribute_spec(), lo);
  auto parts = data::split_dataset(out.full, config.split_ratio, config.split_seed);
  out.train_part = std::move(parts.first);
  out.test_part = std::move(parts.second);
  return out;
}

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  out << content;
}

}  // namespace

std::filesystem::path resolve_out(const std::filesystem::path& path) {
  const char* root = std::getenv("FAIRSEG_OUT_ROOT");
  if (root && *root && path.is_relative()) {
    return fs::path(root) / path;
  }
  return path;
}

void require_known_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                        const std::string& context) {
  if (!j.is_object()) {
    throw ConfigError(context + ": expected a JSON object");
  }
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(context + ": unknown key '" + key + "'");
    }
  }
}

data::AttributeSpec DataConfig::attribute_spec() const {
  if (attribute == "sex") return data::AttributeSpec::sex();
  if (attribute == "age") return data::AttributeSpec::age();
  throw ConfigError("unknown attribute '" + attribute + "' (expected 'sex' or 'age')");
}

nlohmann::json DataConfig::to_json() const {
  nlohmann::json j;
  j["root"] = root.string();
  j["attribute"] = attribute;
  j["resolution"] = resolution;
  j["split_ratio"] = split_ratio;
  j["split_seed"] = split_seed;
  return j;
}

DataConfig DataConfig::from_json(const nlohmann::json& j) {
  require_known_keys(j, {"root", "attribute", "resolution", "split_ratio", "split_seed"},
                     "data config");
  DataConfig c;
  if (j.contains("root")) c.root = j.at("root").get<std::string>();
  if (j.contains("attribute")) c.attribute = j.at("attribute").get<std::string>();
  if (j.contains("resolution")) c.resolution = j.at("resolution").get<int64_t>();
  if (j.contains("split_ratio")) c.split_ratio = j.at("split_ratio").get<double>();
  if (j.contains("split_seed")) c.split_seed = j.at("split_seed").get<uint64_t>();
  return c;
}

void DataConfig::validate() const {
  if (root.empty()) {
    throw ConfigError("data config: root is empty");
  }
  attribute_spec();
  if (resolution < 16 || resolution % 16 != 0) {
    throw ConfigError("data config: resolution must be a positive multiple of 16, got " +
                      std::to_string(resolution));
  }
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) {
    throw ConfigError("data config: split_ratio must be in (0,1), got " +
                      std::to_string(split_ratio));
  }
}

std::vector<uint64_t> repeat_seeds(uint64_t master_seed, int64_t repeats) {
  if (repeats < 1) {
    throw ConfigError("repeats must be >= 1");
  }
  std::vector<uint64_t> seeds{master_seed};
  for (int64_t i = 1; i < repeats; ++i) {
    seeds.push_back(derive_seed(master_seed, "repeat" + std::to_string(i)));
  }
  std::set<uint64_t> unique(seeds.begin(), seeds.end());
  if (unique.size() != seeds.size()) {
    throw ConfigError("derived repeat seeds collide; pick another master seed");
  }
  return seeds;
}

synth::SynthConfig synth_config_from_json(const nlohmann::json& j) {
  require_known_keys(j,
                     {"n_samples", "resolution", "attribute_balance", "difficulty_gap",
                      "shape_family", "seed", "age_bin_weights"},
                     "synth config");
  synth::SynthConfig c;
  if (j.contains("n_samples")) c.n_samples = j.at("n_samples").get<int64_t>();
  if (j.contains("resolution")) c.resolution = j.at("resolution").get<int64_t>();
  if (j.contains("attribute_balance")) c.attribute_balance = j.at("attribute_balance").get<double>();
  if (j.contains("difficulty_gap")) c.difficulty_gap = j.at("difficulty_gap").get<double>();
  if (j.contains("shape_family")) {
    c.shape_family = synth::shape_family_from_string(j.at("shape_family").get<std::string>());
  }
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  if (j.contains("age_bin_weights")) {
    c.age_bin_weights = j.at("age_bin_weights").get<std::vector<double>>();
  }
  return c;
}

nlohmann::json synth_config_to_json(const synth::SynthConfig& config) {
  nlohmann::json j;
  j["n_samples"] = config.n_samples;
  j["resolution"] = config.resolution;
  j["attribute_balance"] = config.attribute_balance;
  j["difficulty_gap"] = config.difficulty_gap;
  j["shape_family"] = synth::to_string(config.shape_family);
  j["seed"] = config.seed;
  j["age_bin_weights"] = config.age_bin_weights;
  return j;
}

void apply_train_config_json(const nlohmann::json& j, TrainOptions& opts) {
  require_known_keys(j, {"train", "data", "profile", "repeats"}, "train config");
  if (j.contains("train")) {
    const auto& t = j.at("train");
    require_known_keys(t,
                       {"epochs", "batch_size", "lr_generator", "lr_discriminator", "lr_segmentor",
                        "alpha", "beta", "seed", "device", "validation_fraction", "augment",
                        "verbose"},
                       "train config: train");
    auto& c = opts.train;
    if (t.contains("epochs")) c.epochs = t.at("epochs").get<int64_t>();
    if (t.contains("batch_size")) c.batch_size = t.at("batch_size").get<int64_t>();
    if (t.contains("lr_generator")) c.lr_generator = t.at("lr_generator").get<double>();
    if (t.contains("lr_discriminator")) c.lr_discriminator = t.at("lr_discriminator").get<double>();
    if (t.contains("lr_segmentor")) c.lr_segmentor = t.at("lr_segmentor").get<double>();
    if (t.contains("alpha")) c.alpha = t.at("alpha").get<double>();
    if (t.contains("beta")) c.beta = t.at("beta").get<double>();
    if (t.contains("seed")) c.seed = t.at("seed").get<uint64_t>();
    if (t.contains("device")) c.device = t.at("device").get<std::string>();
    if (t.contains("validation_fraction")) {
      c.validation_fraction = t.at("validation_fraction").get<double>();
    }
    if (t.contains("augment")) c.augment = t.at("augment").get<bool>();
    if (t.contains("verbose")) c.verbose = t.at("verbose").get<bool>();
  }
  if (j.contains("data")) {
    opts.data = DataConfig::from_json(j.at("data"));
  }
  if (j.contains("profile")) {
    require_known_keys(j.at("profile"), {"base_channels"}, "train config: profile");
    if (j.at("profile").contains("base_channels")) {
      opts.profile.base_channels = j.at("profile").at("base_channels").get<int64_t>();
    }
  }
  if (j.contains("repeats")) {
    opts.repeats = j.at("repeats").get<int64_t>();
  }
}

data::SegDataset cmd_synth(const synth::SynthConfig& config, const std::filesystem::path& out_root,
                           bool force) {
  config.validate();
  const auto root = resolve_out(out_root);
  const auto manifest_path = root / "synth_manifest.json";
  if (fs::exists(root) && !fs::is_empty(root)) {
    bool same_config = false;
    if (fs::exists(manifest_path)) {
      std::ifstream in(manifest_path);
      nlohmann::json existing = nlohmann::json::parse(in, nullptr, /*allow_exceptions=*/false);
      if (!existing.is_discarded()) {
        same_config = true;
        const auto want = synth_config_to_json(config);
        for (const auto& [key, value] : want.items()) {
          if (!existing.contains(key) || existing.at(key) != value) {
            same_config = false;
            break;
          }
        }
      }
    }
    if (!same_config) {
      if (!force) {
        throw StateError("dataset directory " + root.string() +
                         " exists with different contents; pass --force to regenerate");
      }
      fs::remove_all(root / "images");
      fs::remove_all(root / "masks");
    }
  }
  return synth::generate(config, root);
}

std::vector<std::filesystem::path> cmd_train(const std::string& kind, const TrainOptions& opts,
                                             const std::filesystem::path& out_dir) {
  if (kind != "baseline" && kind != "apple" && kind != "rs" && kind != "sm") {
    throw ConfigError("unknown training kind '" + kind +
                      "' (expected baseline, apple, rs or sm)");
  }
  opts.train.validate();
  opts.data.validate();
  if (kind == "apple" && opts.baseline_dir.empty()) {
    throw StateError(
        "apple training needs a frozen baseline; train one with `fairseg train baseline` and pass "
        "it via --baseline");
  }

  const auto out = resolve_out(out_dir);
  auto split = load_split(opts.data);
  const auto& sample0 = split.full.samples.front();
  const auto seeds = repeat_seeds(opts.train.seed, opts.repeats);

  std::vector<fs::path> run_dirs;
  for (size_t i = 0; i < seeds.size(); ++i) {
    const auto run_dir = opts.repeats == 1 ? out : out / ("seed_" + std::to_string(seeds[i]));
    prepare_run_dir(run_dir, opts.force);

    train::TrainConfig cfg = opts.train;
    cfg.seed = seeds[i];

    train::RunManifest manifest;
    if (kind == "baseline" || kind == "rs") {
      torch::manual_seed(derive_seed(cfg.seed, "weights"));
      auto segmentor = zoo::build_reference_segmentor(opts.profile, split.full.class_count,
                                                      sample0.image.size(0), sample0.image.size(1),
                                                      sample0.image.size(2));
      manifest = kind == "baseline"
                     ? zoo::train_baseline(segmentor, split.train_part, cfg, run_dir).manifest
                     : train::train_resampled(segmentor, split.train_part, cfg, run_dir).manifest;
    } else if (kind == "apple") {
      const auto base_ckpt = resolve_segmentor_checkpoint(opts.baseline_dir);
      auto segmentor = zoo::SplitSegmentor::load(base_ckpt);
      segmentor.freeze();
      const auto [h, w] = segmentor.input_spatial();
      if (h != opts.data.resolution || w != opts.data.resolution ||
          segmentor.class_count() != split.full.class_count) {
        throw DataError("baseline checkpoint geometry (" + std::to_string(h) + "x" +
                        std::to_string(w) + ", " + std::to_string(segmentor.class_count()) +
                        " classes) does not match the dataset");
      }
      torch::manual_seed(derive_seed(cfg.seed, "apple_init"));
      auto bundle = apple::PerturberBundle::create(segmentor, split.full.subgroup_count,
                                                   {cfg.alpha, cfg.beta});
      manifest = train::train_apple(segmentor, bundle, split.train_part, cfg, run_dir);
      fs::create_directories(run_dir / "checkpoints" / "segmentor");
      fs::copy(base_ckpt, run_dir / "checkpoints" / "segmentor",
               fs::copy_options::recursive | fs::copy_options::overwrite_existing);
      manifest.checkpoints["segmentor"] = "checkpoints/segmentor";
    } else {
      auto result = train::train_subgroup_models(split.train_part, cfg, run_dir, opts.profile);
      manifest = std::move(result.manifest);
    }

    manifest.config = nlohmann::json{{"kind", kind},
                                     {"train", cfg.to_json()},
                                     {"data", opts.data.to_json()},
                                     {"profile", {{"base_channels", opts.profile.base_channels}}}};
    manifest.write(run_dir);
    run_dirs.push_back(run_dir);
  }
  return run_dirs;
}

train::Predictor LoadedRun::predictor() {
  if (manifest.kind == "apple") {
    auto seg = segmentor;
    auto gen = bundle.generator;
    return [seg, gen](const torch::Tensor& images, const torch::Tensor&) mutable {
      return train::predict_apple(seg, gen, images);
    };
  }
  if (manifest.kind == "sm") {
    auto sm = models;
    return [sm](const torch::Tensor& images, const torch::Tensor& attributes) {
      return sm.predict(images, attributes);
    };
  }
  auto seg = segmentor;
  return [seg](const torch::Tensor& images, const torch::Tensor&) { return seg.predict(images); };
}

LoadedRun load_run(const std::filesystem::path& run_dir) {
  LoadedRun run;
  run.dir = run_dir;
  run.manifest = train::RunManifest::read(run_dir);
  const auto& kind = run.manifest.kind;
  if (kind == "baseline" || kind == "rs") {
    run.segmentor = zoo::SplitSegmentor::load(run_dir / run.manifest.checkpoints.at("segmentor"));
  } else if (kind == "apple") {
    run.segmentor = zoo::SplitSegmentor::load(run_dir / run.manifest.checkpoints.at("segmentor"));
    run.segmentor.freeze();
    const auto perturber_dir = run_dir / run.manifest.checkpoints.at("perturber");
    run.bundle = apple::PerturberBundle::load(perturber_dir);
    const auto base_hash = apple::PerturberBundle::saved_base_hash(perturber_dir);
    if (base_hash != run.segmentor.state_hash()) {
      throw StateError("run at " + run_dir.string() +
                       ": perturber was trained against a different segmentor (hash mismatch)");
    }
  } else if (kind == "sm") {
    run.models = train::SubgroupModelSet::load(run_dir / "checkpoints");
  } else {
    throw StateError("run at " + run_dir.string() + " has unknown kind '" + kind + "'");
  }
  return run;
}

EvaluateOutput cmd_evaluate(const EvaluateOptions& options, const std::filesystem::path& out_dir) {
  if (options.run_dirs.empty()) {
    throw ConfigError("evaluate: no run directories given");
  }
  const auto out = resolve_out(out_dir);
  fs::create_directories(out);

  std::vector<LoadedRun> runs;
  for (const auto& dir : options.run_dirs) {
    runs.push_back(load_run(resolve_out(dir)));
  }
  const auto kind = runs.front().manifest.kind;
  for (const auto& r : runs) {
    if (r.manifest.kind != kind) {
      throw DataError("evaluate: mixed run kinds ('" + kind + "' vs '" + r.manifest.kind +
                      "'); evaluate one method at a time");
    }
    if (r.manifest.config.at("data") != runs.front().manifest.config.at("data")) {
      throw DataError("evaluate: runs disagree on their dataset parameters");
    }
  }

  DataConfig data_config = DataConfig::from_json(runs.front().manifest.config.at("data"));
  if (!options.data_root.empty()) {
    data_config.root = options.data_root;
  }
  if (!options.attribute.empty() && options.attribute != data_config.attribute) {
    if (kind == "baseline") {
      log_warn("evaluating a baseline run under attribute '" + options.attribute +
               "' (trained split used '" + data_config.attribute + "')");
      data_config.attribute = options.attribute;
    } else {
      throw DataError("run was trained against attribute '" + data_config.attribute +
                      "'; evaluating it under '" + options.attribute + "' is not meaningful");
    }
  }

  auto split = load_split(data_config);
  const auto& test_set = split.test_part;
  for (const auto& r : runs) {
    if (kind != "baseline" && r.manifest.subgroup_count != test_set.subgroup_count) {
      throw DataError("run expects " + std::to_string(r.manifest.subgroup_count) +
                      " subgroups but the dataset has " +
                      std::to_string(test_set.subgroup_count));
    }
  }

  const std::string method = options.method.empty() ? kind : options.method;
  EvaluateOutput output;
  output.dataset = data_config.root.filename().string();
  output.attribute = data_config.attribute;
  output.evals.method = method;

  nlohmann::json runs_json = nlohmann::json::array();
  std::vector<metrics::FairnessReport> sample_reports, population_reports;
  std::vector<double> avgs;
  bool all_have_probe = true;

  for (auto& run : runs) {
    auto predictor = run.predictor();
    auto result = train::evaluate_predictor(predictor, test_set);
    result.requires_attribute = run.manifest.requires_attribute;

    const auto csv_name = options.run_dirs.size() == 1
                              ? std::string("per_sample.csv")
                              : "per_sample_" + run.dir.filename().string() + ".csv";
    train::write_per_sample_csv(out / csv_name, result);

    nlohmann::json rj;
    rj["run_dir"] = run.dir.string();
    rj["seed"] = run.manifest.seed;
    rj["kind"] = run.manifest.kind;
    rj["requires_attribute"] = run.manifest.requires_attribute;
    rj["avg_dice"] = result.avg_dice;
    rj["macro_avg_dice"] = result.macro_avg_dice;
    nlohmann::json uv;
    nlohmann::json uv_values = nlohmann::json::array();
    for (double v : result.utilities.values) uv_values.push_back(json_from_double(v));
    uv["values"] = uv_values;
    uv["counts"] = result.utilities.counts;
    rj["utilities"] = uv;
    rj["fairness_sample"] = fairness_to_json(result.fairness_sample);
    rj["fairness_population"] = fairness_to_json(result.fairness_population);

    const auto probe_path = run.dir / "probe.json";
    if (fs::exists(probe_path)) {
      std::ifstream in(probe_path);
      nlohmann::json probe = nlohmann::json::parse(in);
      rj["probe_accuracy"] = probe.at("accuracy");
      output.probe_accuracies.push_back(probe.at("accuracy").get<double>());
    } else {
      all_have_probe = false;
    }

    runs_json.push_back(rj);
    sample_reports.push_back(result.fairness_sample);
    population_reports.push_back(result.fairness_population);
    avgs.push_back(result.avg_dice);
    output.evals.runs.push_back({result.avg_dice, result.fairness_population});
  }
  if (!all_have_probe) {
    output.probe_accuracies.clear();
  }

  nlohmann::json report;
  report["dataset"] = output.dataset;
  report["data_root"] = data_config.root.string();
  report["attribute"] = output.attribute;
  report["method"] = method;
  report["runs"] = runs_json;
  report["aggregate_sample"] = aggregate_to_json(metrics::aggregate_runs(sample_reports));
  report["aggregate_population"] = aggregate_to_json(metrics::aggregate_runs(population_reports));
  auto avg_agg = metrics::aggregate_values(avgs);
  report["avg_aggregate"] = {{"mean", avg_agg.mean}, {"std", avg_agg.std_dev}};
  if (!output.probe_accuracies.empty()) {
    auto probe_agg = metrics::aggregate_values(output.probe_accuracies);
    report["probe_aggregate"] = {{"mean", probe_agg.mean}, {"std", probe_agg.std_dev}};
  }
  write_text_file(out / "report.json", report.dump(2) + "\n");
  output.report_json = std::move(report);

  auto table = report::build_table({output.evals}, output.dataset, output.attribute);
  write_text_file(out / "table.csv", report::to_csv(table));
  write_text_file(out / "table.txt", report::to_text(table));
  write_text_file(out / "table.md", report::to_markdown(table));
  return output;
}

report::ExperimentTable cmd_report(const std::vector<std::filesystem::path>& report_paths,
                                   const std::filesystem::path& out_dir) {
  if (report_paths.empty()) {
    throw ConfigError("report: no report.json inputs given");
  }
  const auto out = resolve_out(out_dir);
  fs::create_directories(out);

  std::vector<report::MethodEvaluations> methods;
  std::string dataset, attribute;
  for (const auto& raw_path : report_paths) {
    auto path = resolve_out(raw_path);
    if (fs::is_directory(path)) {
      path /= "report.json";
    }
    std::ifstream in(path);
    if (!in) {
      throw IoError("cannot read evaluation report at " + path.string());
    }
    nlohmann::json j = nlohmann::json::parse(in);
    const auto d = j.at("dataset").get<std::string>();
    const auto a = j.at("attribute").get<std::string>();
    if (dataset.empty()) {
      dataset = d;
      attribute = a;
    } else if (d != dataset || a != attribute) {
      throw DataError("report: mixed inputs (" + dataset + "/" + attribute + " vs " + d + "/" + a +
                      "); build one table per dataset and attribute");
    }
    report::MethodEvaluations m;
    m.method = j.at("method").get<std::string>();
    for (const auto& existing : methods) {
      if (existing.method == m.method) {
        throw DataError("report: duplicate method label '" + m.method + "'");
      }
    }
    for (const auto& rj : j.at("runs")) {
      report::RunMetrics rm;
      rm.avg_dice = rj.at("avg_dice").get<double>();
      rm.fairness = fairness_from_json(rj.at("fairness_population"));
      m.runs.push_back(rm);
    }
    methods.push_back(std::move(m));
  }

  auto table = report::build_table(methods, dataset, attribute);
  write_text_file(out / "table.csv", report::to_csv(table));
  write_text_file(out / "table.txt", report::to_text(table));
  write_text_file(out / "table.md", report::to_markdown(table));
  return table;
}

std::vector<report::BetaSweepRow> cmd_sweep_beta(const SweepOptions& options,
                                                 const std::filesystem::path& out_dir) {
  if (options.betas.empty()) {
    throw ConfigError("sweep-beta: no beta values given");
  }
  for (double b : options.betas) {
    if (!std::isfinite(b) || b < 0.0) {
      throw ConfigError("sweep-beta: beta values must be finite and >= 0");
    }
  }
  const auto out = resolve_out(out_dir);
  fs::create_directories(out);

  SplitData split;
  bool split_loaded = false;

  std::vector<report::BetaSweepEntry> entries;
  for (double beta : options.betas) {
    TrainOptions train_opts = options.train;
    train_opts.train.beta = beta;
    const auto beta_dir = out / beta_dirname(beta);
    auto run_dirs = cmd_train("apple", train_opts, beta_dir);

    if (options.probe) {
      if (!split_loaded) {
        split = load_split(options.train.data);
        split_loaded = true;
      }
      for (const auto& dir : run_dirs) {
        auto run = load_run(dir);
        auto probe = train::train_attribute_probe(run.segmentor, &run.bundle.generator,
                                                  split.train_part, split.test_part,
                                                  run.manifest.seed);
        nlohmann::json pj;
        pj["accuracy"] = probe.accuracy;
        pj["chance"] = probe.chance;
        pj["correct"] = probe.correct;
        pj["total"] = probe.total;
        pj["beta"] = beta;
        pj["seed"] = run.manifest.seed;
        write_text_file(dir / "probe.json", pj.dump(2) + "\n");
      }
    }

    EvaluateOptions eval_opts;
    eval_opts.run_dirs = run_dirs;
    eval_opts.method = "apple_" + beta_dirname(beta);
    auto eval = cmd_evaluate(eval_opts, out / ("eval_" + beta_dirname(beta)));

    report::BetaSweepEntry entry;
    entry.beta = beta;
    entry.evals = eval.evals;
    entry.probe_accuracies = eval.probe_accuracies;
    entries.push_back(std::move(entry));
  }

  auto rows = report::beta_sweep_summary(entries);
  write_text_file(out / "sweep_summary.csv", report::sweep_to_csv(rows));
  write_text_file(out / "sweep_summary.txt", report::sweep_to_text(rows));
  return rows;
}

}  // namespace fairseg::cli
