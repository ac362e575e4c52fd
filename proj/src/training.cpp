#include "fairseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "fairseg/error.hpp"
#include "fairseg/fairness_metrics.hpp"
#include "fairseg/log.hpp"
#include "fairseg/rng.hpp"

namespace fairseg::train {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

nlohmann::json json_from_double(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

double double_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  return j.get<double>();
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double u01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::vector<torch::Tensor> clone_module_state(const torch::nn::Module& m) {
  std::vector<torch::Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.detach().clone());
  for (const auto& b : m.buffers()) out.push_back(b.detach().clone());
  return out;
}

void restore_module_state(torch::nn::Module& m, const std::vector<torch::Tensor>& state) {
  torch::NoGradGuard ng;
  size_t i = 0;
  for (auto& p : m.parameters()) p.copy_(state.at(i++));
  for (auto& b : m.buffers()) b.copy_(state.at(i++));
}

// Training and validation parts of a training set; validation may be empty
// (too little data or validation_fraction == 0).
std::pair<data::SegDataset, data::SegDataset> validation_split(const data::SegDataset& train_set,
                                                               const TrainConfig& config) {
  if (config.validation_fraction <= 0.0) {
    return {train_set, data::SegDataset{{},
                                        train_set.subgroup_count,
                                        train_set.class_count,
                                        train_set.attribute_name,
                                        train_set.subgroup_labels}};
  }
  auto parts = data::split_dataset(train_set, 1.0 - config.validation_fraction,
                                   derive_seed(config.seed, "validation"));
  if (parts.second.size() == 0) {
    log_warn("no validation split (training set too small); keeping the final epoch");
  }
  return parts;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  auto check_lr = [](double lr, const char* name) {
    if (!std::isfinite(lr) || lr <= 0.0) {
      throw ConfigError(std::string("train config: ") + name + " must be finite and > 0");
    }
  };
  check_lr(lr_generator, "lr_generator");
  check_lr(lr_discriminator, "lr_discriminator");
  check_lr(lr_segmentor, "lr_segmentor");
  if (!std::isfinite(alpha) || alpha < 0.0) throw ConfigError("train config: alpha must be >= 0");
  if (!std::isfinite(beta) || beta < 0.0) throw ConfigError("train config: beta must be >= 0");
  if (device != "cpu") {
    throw ConfigError("train config: only device 'cpu' is supported in this build, got '" +
                      device + "'");
  }
  if (!(validation_fraction >= 0.0 && validation_fraction <= 0.5)) {
    throw ConfigError("train config: validation_fraction must be in [0,0.5]");
  }
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["lr_generator"] = lr_generator;
  j["lr_discriminator"] = lr_discriminator;
  j["lr_segmentor"] = lr_segmentor;
  j["alpha"] = alpha;
  j["beta"] = beta;
  j["seed"] = seed;
  j["device"] = device;
  j["validation_fraction"] = validation_fraction;
  j["augment"] = augment;
  j["verbose"] = verbose;
  return j;
}

std::string RunManifest::history_csv() const {
  std::string csv;
  const bool adversarial = kind == "apple";
  if (adversarial) {
    csv = "epoch,L_D,L_G,L_G_seg,L_G_fair";
  } else {
    csv = "epoch,L_seg";
  }
  for (int64_t k = 0; k < subgroup_count; ++k) {
    csv += ",val_dice_k" + std::to_string(k);
  }
  csv += "\n";
  for (const auto& rec : history) {
    csv += std::to_string(rec.epoch);
    if (adversarial) {
      csv += "," + fmt_double(rec.loss_d) + "," + fmt_double(rec.loss_g) + "," +
             fmt_double(rec.loss_g_seg) + "," + fmt_double(rec.loss_g_fair);
    } else {
      csv += "," + fmt_double(rec.loss_seg);
    }
    for (int64_t k = 0; k < subgroup_count; ++k) {
      const double v = k < static_cast<int64_t>(rec.val_dice.size())
                           ? rec.val_dice[k]
                           : std::numeric_limits<double>::quiet_NaN();
      csv += "," + fmt_double(v);
    }
    csv += "\n";
  }
  return csv;
}

void RunManifest::write(const std::filesystem::path& run_dir) const {
  std::filesystem::create_directories(run_dir);
  nlohmann::json j;
  j["format_version"] = 1;
  j["kind"] = kind;
  j["config"] = config;
  j["seed"] = seed;
  j["attribute"] = attribute;
  j["subgroup_count"] = subgroup_count;
  j["class_count"] = class_count;
  j["frozen_hash_start"] = frozen_hash_start;
  j["frozen_hash_end"] = frozen_hash_end;
  j["checkpoints"] = checkpoints;
  j["best_epoch"] = best_epoch;
  j["requires_attribute"] = requires_attribute;
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& rec : history) {
    nlohmann::json e;
    e["epoch"] = rec.epoch;
    if (kind == "apple") {
      e["loss_d"] = json_from_double(rec.loss_d);
      e["loss_g"] = json_from_double(rec.loss_g);
      e["loss_g_seg"] = json_from_double(rec.loss_g_seg);
      e["loss_g_fair"] = json_from_double(rec.loss_g_fair);
    } else {
      e["loss_seg"] = json_from_double(rec.loss_seg);
    }
    nlohmann::json vd = nlohmann::json::array();
    for (double v : rec.val_dice) vd.push_back(json_from_double(v));
    e["val_dice"] = vd;
    e["val_dice_mean"] = json_from_double(rec.val_dice_mean);
    hist.push_back(e);
  }
  j["history"] = hist;
  {
    std::ofstream out(run_dir / "manifest.json", std::ios::binary);
    if (!out) throw IoError("cannot write manifest.json under " + run_dir.string());
    out << j.dump(2) << "\n";
  }
  {
    std::ofstream out(run_dir / "history.csv", std::ios::binary);
    if (!out) throw IoError("cannot write history.csv under " + run_dir.string());
    out << history_csv();
  }
}

RunManifest RunManifest::read(const std::filesystem::path& run_dir) {
  std::ifstream in(run_dir / "manifest.json");
  if (!in) {
    throw StateError("no run manifest at " + run_dir.string());
  }
  nlohmann::json j = nlohmann::json::parse(in);
  RunManifest m;
  m.kind = j.at("kind").get<std::string>();
  m.config = j.at("config");
  m.seed = j.at("seed").get<uint64_t>();
  m.attribute = j.at("attribute").get<std::string>();
  m.subgroup_count = j.at("subgroup_count").get<int64_t>();
  m.class_count = j.at("class_count").get<int64_t>();
  m.frozen_hash_start = j.at("frozen_hash_start").get<std::string>();
  m.frozen_hash_end = j.at("frozen_hash_end").get<std::string>();
  m.checkpoints = j.at("checkpoints").get<std::map<std::string, std::string>>();
  m.best_epoch = j.at("best_epoch").get<int64_t>();
  m.requires_attribute = j.at("requires_attribute").get<bool>();
  for (const auto& e : j.at("history")) {
    EpochRecord rec;
    rec.epoch = e.at("epoch").get<int64_t>();
    if (m.kind == "apple") {
      rec.loss_d = double_from_json(e.at("loss_d"));
      rec.loss_g = double_from_json(e.at("loss_g"));
      rec.loss_g_seg = double_from_json(e.at("loss_g_seg"));
      rec.loss_g_fair = double_from_json(e.at("loss_g_fair"));
    } else {
      rec.loss_seg = double_from_json(e.at("loss_seg"));
    }
    for (const auto& v : e.at("val_dice")) rec.val_dice.push_back(double_from_json(v));
    rec.val_dice_mean = double_from_json(e.at("val_dice_mean"));
    m.history.push_back(rec);
  }
  return m;
}

std::vector<std::vector<int64_t>> make_batches(int64_t n, int64_t batch_size,
                                               std::mt19937_64& rng) {
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int64_t>> batches;
  for (int64_t start = 0; start < n; start += batch_size) {
    const auto end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

Batch collate(const data::SegDataset& dataset, const std::vector<int64_t>& indices,
              std::mt19937_64* augment_rng) {
  TORCH_CHECK(!indices.empty(), "collate: empty index list");
  std::vector<torch::Tensor> images, masks;
  std::vector<int64_t> attrs;
  images.reserve(indices.size());
  masks.reserve(indices.size());
  for (int64_t i : indices) {
    const auto& s = dataset.samples.at(i);
    auto img = s.image;
    auto mask = s.mask;
    if (augment_rng) {
      auto& rng = *augment_rng;
      const bool hflip = (rng() & 1) != 0;
      const bool vflip = (rng() & 1) != 0;
      const auto quarter_turns = static_cast<int64_t>(rng() % 4);
      if (hflip) {
        img = img.flip(2);
        mask = mask.flip(1);
      }
      if (vflip) {
        img = img.flip(1);
        mask = mask.flip(0);
      }
      if (quarter_turns > 0 && img.size(1) == img.size(2)) {
        img = torch::rot90(img, quarter_turns, {1, 2});
        mask = torch::rot90(mask, quarter_turns, {0, 1});
      }
    }
    images.push_back(img);
    masks.push_back(mask);
    attrs.push_back(s.attribute);
  }
  Batch b;
  b.images = torch::stack(images).contiguous();
  b.masks = torch::stack(masks).contiguous();
  b.attributes = torch::tensor(attrs, torch::kInt64);
  return b;
}

std::vector<int64_t> weighted_subgroup_indices(const std::vector<int64_t>& attributes,
                                               int64_t subgroup_count, int64_t n_draws,
                                               std::mt19937_64& rng) {
  if (attributes.empty()) {
    throw DataError("weighted_subgroup_indices: no samples");
  }
  std::vector<int64_t> counts(subgroup_count, 0);
  for (int64_t a : attributes) {
    if (a < 0 || a >= subgroup_count) {
      throw DataError("weighted_subgroup_indices: subgroup id out of range");
    }
    counts[a] += 1;
  }
  for (int64_t k = 0; k < subgroup_count; ++k) {
    if (counts[k] == 0) {
      throw DataError("weighted_subgroup_indices: subgroup " + std::to_string(k) +
                      " is empty; inverse-frequency weights are undefined");
    }
  }
  std::vector<double> cumulative(attributes.size());
  double total = 0.0;
  for (size_t i = 0; i < attributes.size(); ++i) {
    total += 1.0 / static_cast<double>(counts[attributes[i]]);
    cumulative[i] = total;
  }
  std::vector<int64_t> draws;
  draws.reserve(n_draws);
  for (int64_t d = 0; d < n_draws; ++d) {
    const double u = u01(rng) * total;
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    draws.push_back(std::min<int64_t>(static_cast<int64_t>(it - cumulative.begin()),
                                      static_cast<int64_t>(attributes.size()) - 1));
  }
  return draws;
}

ValScores validation_scores(const data::SegDataset& dataset, const BatchPredictor& predict,
                            int64_t batch_size) {
  ValScores scores;
  scores.per_subgroup.assign(dataset.subgroup_count,
                             std::numeric_limits<double>::quiet_NaN());
  std::vector<double> sums(dataset.subgroup_count, 0.0);
  std::vector<int64_t> counts(dataset.subgroup_count, 0);
  double total = 0.0;
  const auto n = dataset.size();
  for (int64_t start = 0; start < n; start += batch_size) {
    std::vector<int64_t> idx;
    for (int64_t i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
    auto batch = collate(dataset, idx);
    auto labels = predict(batch);
    for (size_t bi = 0; bi < idx.size(); ++bi) {
      const auto& s = dataset.samples[idx[bi]];
      const double d = metrics::sample_dice(labels[bi], s.mask, dataset.class_count);
      sums[s.attribute] += d;
      counts[s.attribute] += 1;
      total += d;
    }
  }
  for (int64_t k = 0; k < dataset.subgroup_count; ++k) {
    if (counts[k] > 0) {
      scores.per_subgroup[k] = sums[k] / static_cast<double>(counts[k]);
    }
  }
  scores.sample_mean = n > 0 ? total / static_cast<double>(n) : 0.0;
  return scores;
}

RunManifest fit_segmentor(zoo::SplitSegmentor& segmentor, const data::SegDataset& train_set,
                          const TrainConfig& config, SamplerKind sampler, const std::string& kind,
                          const std::filesystem::path& run_dir) {
  config.validate();
  train_set.validate();
  if (train_set.size() == 0) {
    throw DataError("fit_segmentor: empty training set");
  }

  auto [fit_set, val_set] = validation_split(train_set, config);
  auto params = segmentor.trainable_parameters();
  torch::optim::SGD opt(params, torch::optim::SGDOptions(config.lr_segmentor));

  auto shuffle_rng = make_rng(derive_seed(config.seed, "shuffle"));
  auto sampler_rng = make_rng(derive_seed(config.seed, "sampler"));
  auto augment_rng = make_rng(derive_seed(config.seed, "augment"));

  std::vector<int64_t> fit_attrs;
  for (const auto& s : fit_set.samples) fit_attrs.push_back(s.attribute);

  // Strictly-positive bar: early eval-mode scores can sit at exactly 0 while
  // batch-norm running stats catch up, and snapshotting those would pin the
  // run to its first epoch. All-zero trajectories keep the final weights.
  double best_val = 0.0;
  int64_t best_epoch = -1;
  std::vector<torch::Tensor> best_enc, best_dec;

  RunManifest manifest;
  manifest.kind = kind;
  manifest.config = config.to_json();
  manifest.seed = config.seed;
  manifest.attribute = train_set.attribute_name;
  manifest.subgroup_count = train_set.subgroup_count;
  manifest.class_count = train_set.class_count;

  for (int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    segmentor.set_train(true);
    std::vector<std::vector<int64_t>> batches;
    if (sampler == SamplerKind::Uniform) {
      batches = make_batches(fit_set.size(), config.batch_size, shuffle_rng);
    } else {
      auto draws =
          weighted_subgroup_indices(fit_attrs, fit_set.subgroup_count, fit_set.size(), sampler_rng);
      for (int64_t start = 0; start < static_cast<int64_t>(draws.size());
           start += config.batch_size) {
        const auto end = std::min<int64_t>(draws.size(), start + config.batch_size);
        batches.emplace_back(draws.begin() + start, draws.begin() + end);
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    for (size_t bi = 0; bi < batches.size(); ++bi) {
      auto batch = collate(fit_set, batches[bi], config.augment ? &augment_rng : nullptr);
      auto logits = segmentor.forward(batch.images);
      auto loss = apple::loss_seg(logits, batch.masks);
      const double loss_v = loss.item<double>();
      if (!std::isfinite(loss_v)) {
        throw TrainingError(kind + " training diverged at epoch " + std::to_string(epoch) +
                            ", batch " + std::to_string(bi) + " (loss " + fmt_double(loss_v) +
                            ")");
      }
      opt.zero_grad();
      loss.backward();
      opt.step();
      rec.batch_loss_seg.push_back(loss_v);
    }
    rec.loss_seg = mean_of(rec.batch_loss_seg);

    if (val_set.size() > 0) {
      auto scores = validation_scores(
          val_set, [&](const Batch& b) { return segmentor.predict(b.images); },
          config.batch_size);
      rec.val_dice = scores.per_subgroup;
      rec.val_dice_mean = scores.sample_mean;
      if (scores.sample_mean > best_val) {
        best_val = scores.sample_mean;
        best_epoch = epoch;
        best_enc = clone_module_state(*segmentor.encoder());
        best_dec = clone_module_state(*segmentor.decoder());
      }
    }
    if (config.verbose) {
      std::ostringstream os;
      os << "[" << kind << "] epoch " << epoch << "/" << config.epochs << " L_seg "
         << rec.loss_seg;
      if (val_set.size() > 0) os << " val_dice " << rec.val_dice_mean;
      log_info(os.str());
    }
    manifest.history.push_back(std::move(rec));
  }

  if (best_epoch > 0) {
    restore_module_state(*segmentor.encoder(), best_enc);
    restore_module_state(*segmentor.decoder(), best_dec);
  }
  segmentor.set_train(false);
  manifest.best_epoch = best_epoch;

  if (!run_dir.empty()) {
    segmentor.save(run_dir / "checkpoints" / "segmentor", config.seed);
    manifest.checkpoints["segmentor"] = "checkpoints/segmentor";
    manifest.write(run_dir);
  }
  return manifest;
}

zoo::BaselineTrainResult train_resampled(zoo::SplitSegmentor& segmentor,
                                         const data::SegDataset& train_set,
                                         const TrainConfig& config,
                                         const std::filesystem::path& run_dir) {
  auto manifest =
      fit_segmentor(segmentor, train_set, config, SamplerKind::InverseFrequency, "rs", run_dir);
  double best = 0.0;
  for (const auto& rec : manifest.history) {
    if (manifest.best_epoch > 0 && rec.epoch == manifest.best_epoch) best = rec.val_dice_mean;
  }
  return {std::move(manifest), best};
}

RunManifest train_apple(const zoo::SplitSegmentor& frozen_segmentor,
                        apple::PerturberBundle& bundle, const data::SegDataset& train_set,
                        const TrainConfig& config, const std::filesystem::path& run_dir) {
  config.validate();
  train_set.validate();
  if (!frozen_segmentor.frozen()) {
    throw StateError("train_apple requires a frozen segmentor; call freeze() first");
  }
  const auto& gc = bundle.generator->config();
  const auto [eh, ew] = frozen_segmentor.embedding_spatial();
  const auto [gh, gw] = bundle.generator->embedding_spatial();
  if (gc.embedding_channels != frozen_segmentor.embedding_channels() || gh != eh || gw != ew) {
    throw DataError("perturber geometry (" + std::to_string(gc.embedding_channels) + "@" +
                    std::to_string(gh) + "x" + std::to_string(gw) +
                    ") does not match the segmentor embedding (" +
                    std::to_string(frozen_segmentor.embedding_channels()) + "@" +
                    std::to_string(eh) + "x" + std::to_string(ew) + ")");
  }
  if (bundle.discriminator->config().subgroup_count != train_set.subgroup_count) {
    throw DataError("discriminator was built for " +
                    std::to_string(bundle.discriminator->config().subgroup_count) +
                    " subgroups but the dataset has " + std::to_string(train_set.subgroup_count));
  }
  bundle.hyper.alpha = config.alpha;
  bundle.hyper.beta = config.beta;
  bundle.hyper.validate();

  const auto hash_start = frozen_segmentor.state_hash();
  auto [fit_set, val_set] = validation_split(train_set, config);

  std::vector<torch::Tensor> gp_params = bundle.generator->parameters();
  std::vector<torch::Tensor> dp_params = bundle.discriminator->parameters();
  torch::optim::Adam opt_g(gp_params, torch::optim::AdamOptions(config.lr_generator));
  torch::optim::Adam opt_d(dp_params, torch::optim::AdamOptions(config.lr_discriminator));

  auto shuffle_rng = make_rng(derive_seed(config.seed, "shuffle"));
  auto augment_rng = make_rng(derive_seed(config.seed, "augment"));

  RunManifest manifest;
  manifest.kind = "apple";
  manifest.config = config.to_json();
  manifest.seed = config.seed;
  manifest.attribute = train_set.attribute_name;
  manifest.subgroup_count = train_set.subgroup_count;
  manifest.class_count = train_set.class_count;
  manifest.frozen_hash_start = hash_start;

  std::vector<torch::Tensor> good_gp = clone_module_state(*bundle.generator);
  std::vector<torch::Tensor> good_dp = clone_module_state(*bundle.discriminator);

  // Adversarial training oscillates, so the final epoch is a poor pick. Keep
  // the epoch with the best worst-subgroup validation Dice: the method exists
  // to lift the weakest subgroup, and a mean would let a strong majority mask
  // a regression on it. The floor also guards utility, since any subgroup
  // that collapses becomes the minimum.
  double best_worst = 0.0;
  int64_t best_epoch = -1;
  std::vector<torch::Tensor> best_gp, best_dp;

  auto abort_with = [&](int64_t epoch, size_t batch, const std::string& what) {
    restore_module_state(*bundle.generator, good_gp);
    restore_module_state(*bundle.discriminator, good_dp);
    if (!run_dir.empty()) {
      bundle.save(run_dir / "checkpoints" / "perturber", hash_start, config.seed);
    }
    throw TrainingError("adversarial training diverged at epoch " + std::to_string(epoch) +
                        ", batch " + std::to_string(batch) + ": " + what +
                        "; last-good checkpoint restored" +
                        (run_dir.empty() ? "" : " and saved"));
  };

  for (int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    bundle.generator->train();
    bundle.discriminator->train();
    auto batches = make_batches(fit_set.size(), config.batch_size, shuffle_rng);

    EpochRecord rec;
    rec.epoch = epoch;
    for (size_t bi = 0; bi < batches.size(); ++bi) {
      auto batch = collate(fit_set, batches[bi], config.augment ? &augment_rng : nullptr);

      zoo::LatentEmbedding embedding;
      {
        torch::NoGradGuard ng;
        embedding = frozen_segmentor.encode(batch.images);
      }

      // Discriminator step on the current perturbation, detached from G_p.
      torch::Tensor perturbed_detached;
      {
        torch::NoGradGuard ng;
        perturbed_detached = embedding.tensor + bundle.generator->forward(embedding.tensor);
      }
      auto logits_d = bundle.discriminator->forward(perturbed_detached);
      auto l_d = apple::loss_discriminator(logits_d, batch.attributes);
      const double l_d_v = l_d.item<double>();
      if (!std::isfinite(l_d_v)) abort_with(epoch, bi, "discriminator loss " + fmt_double(l_d_v));
      opt_d.zero_grad();
      l_d.backward();
      opt_d.step();

      // Generator step: fresh perturbation against the updated discriminator.
      auto delta = bundle.generator->forward(embedding.tensor);
      zoo::LatentEmbedding perturbed{embedding.tensor + delta, embedding.skips};
      auto seg_logits = frozen_segmentor.decode(perturbed);
      auto l_seg = apple::loss_seg(seg_logits, batch.masks);
      auto logits_g = bundle.discriminator->forward(perturbed.tensor);
      auto l_fair = apple::loss_fair(logits_g, batch.attributes, config.alpha);
      auto l_g = apple::loss_generator(l_seg, l_fair, config.beta);
      const double l_g_v = l_g.item<double>();
      if (!std::isfinite(l_g_v)) abort_with(epoch, bi, "generator loss " + fmt_double(l_g_v));
      opt_g.zero_grad();
      l_g.backward();
      opt_g.step();

      rec.batch_loss_d.push_back(l_d_v);
      rec.batch_loss_g.push_back(l_g_v);
      rec.batch_loss_g_seg.push_back(l_seg.item<double>());
      rec.batch_loss_g_fair.push_back(l_fair.item<double>());
    }
    rec.loss_d = mean_of(rec.batch_loss_d);
    rec.loss_g = mean_of(rec.batch_loss_g);
    rec.loss_g_seg = mean_of(rec.batch_loss_g_seg);
    rec.loss_g_fair = mean_of(rec.batch_loss_g_fair);

    if (val_set.size() > 0) {
      auto scores = validation_scores(
          val_set,
          [&](const Batch& b) {
            return predict_apple(frozen_segmentor, bundle.generator, b.images);
          },
          config.batch_size);
      rec.val_dice = scores.per_subgroup;
      rec.val_dice_mean = scores.sample_mean;
      double worst = std::numeric_limits<double>::infinity();
      for (double v : scores.per_subgroup) {
        if (std::isfinite(v)) worst = std::min(worst, v);
      }
      if (!std::isfinite(worst)) worst = 0.0;
      if (worst > best_worst) {
        best_worst = worst;
        best_epoch = epoch;
        best_gp = clone_module_state(*bundle.generator);
        best_dp = clone_module_state(*bundle.discriminator);
      }
    }
    if (config.verbose) {
      std::ostringstream os;
      os << "[apple] epoch " << epoch << "/" << config.epochs << " L_D " << rec.loss_d << " L_G "
         << rec.loss_g << " (seg " << rec.loss_g_seg << ", fair " << rec.loss_g_fair << ")";
      if (val_set.size() > 0) os << " val_dice " << rec.val_dice_mean;
      log_info(os.str());
    }
    manifest.history.push_back(std::move(rec));

    good_gp = clone_module_state(*bundle.generator);
    good_dp = clone_module_state(*bundle.discriminator);
  }

  if (best_epoch > 0) {
    restore_module_state(*bundle.generator, best_gp);
    restore_module_state(*bundle.discriminator, best_dp);
  }
  manifest.best_epoch = best_epoch;

  bundle.generator->eval();
  bundle.discriminator->eval();

  manifest.frozen_hash_end = frozen_segmentor.state_hash();
  if (manifest.frozen_hash_end != hash_start) {
    throw TrainingError("frozen segmentor state changed during adversarial training");
  }

  if (!run_dir.empty()) {
    bundle.save(run_dir / "checkpoints" / "perturber", hash_start, config.seed);
    manifest.checkpoints["perturber"] = "checkpoints/perturber";
    manifest.write(run_dir);
  }
  return manifest;
}

torch::Tensor predict_apple(const zoo::SplitSegmentor& frozen_segmentor,
                            apple::PerturbationGenerator& generator, const torch::Tensor& images) {
  torch::NoGradGuard ng;
  const bool was_training = generator->is_training();
  if (was_training) generator->eval();
  auto embedding = frozen_segmentor.encode(images);
  auto perturbed = apple::perturb(generator, embedding);
  auto labels = frozen_segmentor.decode(perturbed).argmax(1);
  if (was_training) generator->train();
  return labels;
}

torch::Tensor SubgroupModelSet::predict(const torch::Tensor& images,
                                        const torch::Tensor& attributes) const {
  TORCH_CHECK(images.dim() == 4, "predict expects BxCxHxW images");
  TORCH_CHECK(attributes.dim() == 1 && attributes.size(0) == images.size(0),
              "predict: attributes must be given per sample (subgroup routing)");
  const auto n = images.size(0);
  auto attrs = attributes.to(torch::kInt64);
  torch::Tensor out;
  for (int64_t k = 0; k < subgroup_count; ++k) {
    auto idx = torch::nonzero(attrs == k).squeeze(1);
    if (idx.numel() == 0) continue;
    auto labels = models[k].predict(images.index_select(0, idx));
    if (!out.defined()) {
      out = torch::zeros({n, labels.size(1), labels.size(2)}, torch::kInt64);
    }
    out.index_copy_(0, idx, labels);
  }
  if (!out.defined()) {
    throw DataError("predict: no sample matched any subgroup model");
  }
  const auto max_attr = attrs.max().item<int64_t>();
  if (max_attr >= subgroup_count) {
    throw DataError("predict: subgroup id " + std::to_string(max_attr) +
                    " has no model (have " + std::to_string(subgroup_count) + ")");
  }
  return out;
}

void SubgroupModelSet::save(const std::filesystem::path& dir, uint64_t seed) const {
  std::filesystem::create_directories(dir);
  for (int64_t k = 0; k < subgroup_count; ++k) {
    models[k].save(dir / ("seg_k" + std::to_string(k)), seed);
  }
  nlohmann::json j;
  j["format_version"] = 1;
  j["subgroup_count"] = subgroup_count;
  std::ofstream out(dir / "sm_manifest.json", std::ios::binary);
  if (!out) throw IoError("cannot write sm_manifest.json under " + dir.string());
  out << j.dump(2) << "\n";
}

SubgroupModelSet SubgroupModelSet::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "sm_manifest.json");
  if (!in) {
    throw StateError("no subgroup-model checkpoint at " + dir.string());
  }
  nlohmann::json j = nlohmann::json::parse(in);
  SubgroupModelSet set;
  set.subgroup_count = j.at("subgroup_count").get<int64_t>();
  for (int64_t k = 0; k < set.subgroup_count; ++k) {
    set.models.push_back(zoo::SplitSegmentor::load(dir / ("seg_k" + std::to_string(k))));
  }
  return set;
}

SubgroupModelsResult train_subgroup_models(const data::SegDataset& train_set,
                                           const TrainConfig& config,
                                           const std::filesystem::path& run_dir,
                                           zoo::SegmentorProfile profile) {
  config.validate();
  train_set.validate();
  const auto sizes = train_set.subgroup_sizes();
  for (int64_t k = 0; k < train_set.subgroup_count; ++k) {
    if (sizes[k] == 0) {
      throw DataError("train_subgroup_models: subgroup " + std::to_string(k) +
                      " has no training samples");
    }
  }

  SubgroupModelsResult result;
  result.models.subgroup_count = train_set.subgroup_count;

  RunManifest top;
  top.kind = "sm";
  top.config = config.to_json();
  top.seed = config.seed;
  top.attribute = train_set.attribute_name;
  top.subgroup_count = train_set.subgroup_count;
  top.class_count = train_set.class_count;
  top.requires_attribute = true;

  const auto& sample0 = train_set.samples.front();
  const auto in_channels = sample0.image.size(0);
  const auto h = sample0.image.size(1);
  const auto w = sample0.image.size(2);

  for (int64_t k = 0; k < train_set.subgroup_count; ++k) {
    auto subset = data::subgroup_subset(train_set, k);
    const auto min_for_split = static_cast<int64_t>(
        std::ceil(1.0 / std::max(config.validation_fraction, 1e-9)));
    if (config.validation_fraction > 0.0 && subset.size() < min_for_split) {
      log_warn("subgroup " + std::to_string(k) + " has only " + std::to_string(subset.size()) +
               " samples; training without a validation split");
    }
    TrainConfig sub_config = config;
    sub_config.seed = derive_seed(config.seed, static_cast<uint64_t>(1000 + k));
    torch::manual_seed(derive_seed(sub_config.seed, "weights"));
    auto model = zoo::build_reference_segmentor(profile, train_set.class_count, in_channels, h, w);
    auto manifest = fit_segmentor(model, subset, sub_config, SamplerKind::Uniform, "sm", {});
    if (!run_dir.empty()) {
      std::ofstream out(run_dir / ("history_k" + std::to_string(k) + ".csv"), std::ios::binary);
      // run_dir may not exist yet on the first model
      if (!out) {
        std::filesystem::create_directories(run_dir);
        out.open(run_dir / ("history_k" + std::to_string(k) + ".csv"), std::ios::binary);
      }
      out << manifest.history_csv();
    }
    result.models.models.push_back(std::move(model));
  }

  if (!run_dir.empty()) {
    result.models.save(run_dir / "checkpoints", config.seed);
    for (int64_t k = 0; k < train_set.subgroup_count; ++k) {
      top.checkpoints["seg_k" + std::to_string(k)] = "checkpoints/seg_k" + std::to_string(k);
    }
    top.write(run_dir);
  }
  result.manifest = std::move(top);
  return result;
}

ProbeResult train_attribute_probe(const zoo::SplitSegmentor& frozen_segmentor,
                                  apple::PerturbationGenerator* generator,
                                  const data::SegDataset& fit_set, const data::SegDataset& eval_set,
                                  uint64_t seed, int64_t epochs, int64_t batch_size, double lr) {
  if (fit_set.size() == 0 || eval_set.size() == 0) {
    throw DataError("attribute probe needs nonempty fit and eval sets");
  }
  auto embed_all = [&](const data::SegDataset& ds) {
    torch::NoGradGuard ng;
    if (generator) (*generator)->eval();
    std::vector<torch::Tensor> chunks;
    std::vector<int64_t> attrs;
    const auto n = ds.size();
    for (int64_t start = 0; start < n; start += batch_size) {
      std::vector<int64_t> idx;
      for (int64_t i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
      auto batch = collate(ds, idx);
      auto embedding = frozen_segmentor.encode(batch.images);
      auto f = generator ? apple::perturb(*generator, embedding).tensor : embedding.tensor;
      chunks.push_back(f);
      for (int64_t i : idx) attrs.push_back(ds.samples[i].attribute);
    }
    return std::make_pair(torch::cat(chunks), torch::tensor(attrs, torch::kInt64));
  };

  auto [fit_emb, fit_attrs] = embed_all(fit_set);
  auto [eval_emb, eval_attrs] = embed_all(eval_set);

  torch::manual_seed(derive_seed(seed, "probe_init"));
  apple::DiscriminatorConfig dc;
  dc.embedding_channels = frozen_segmentor.embedding_channels();
  dc.subgroup_count = fit_set.subgroup_count;
  apple::AttributeDiscriminator probe(dc);
  torch::optim::Adam opt(probe->parameters(), torch::optim::AdamOptions(lr));

  // Fit on inverse-frequency draws so a rare subgroup's signal is not drowned
  // out, and score with balanced accuracy (mean per-class recall) so a
  // majority-vote probe lands exactly at chance regardless of imbalance.
  std::vector<int64_t> fit_attr_vec(fit_attrs.data_ptr<int64_t>(),
                                    fit_attrs.data_ptr<int64_t>() + fit_set.size());
  auto rng = make_rng(derive_seed(seed, "probe_shuffle"));
  probe->train();
  for (int64_t epoch = 0; epoch < epochs; ++epoch) {
    auto drawn = weighted_subgroup_indices(fit_attr_vec, fit_set.subgroup_count, fit_set.size(),
                                           rng);
    for (size_t start = 0; start < drawn.size(); start += static_cast<size_t>(batch_size)) {
      const auto stop = std::min(drawn.size(), start + static_cast<size_t>(batch_size));
      auto idx = torch::tensor(
          std::vector<int64_t>(drawn.begin() + static_cast<int64_t>(start),
                               drawn.begin() + static_cast<int64_t>(stop)),
          torch::kInt64);
      auto logits = probe->forward(fit_emb.index_select(0, idx));
      auto loss = apple::loss_discriminator(logits, fit_attrs.index_select(0, idx));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }

  probe->eval();
  torch::NoGradGuard ng;
  auto pred = probe->forward(eval_emb).argmax(1);
  ProbeResult res;
  res.total = eval_set.size();
  res.correct = (pred == eval_attrs).sum().item<int64_t>();
  double recall_sum = 0.0;
  for (int64_t k = 0; k < eval_set.subgroup_count; ++k) {
    const auto in_class = eval_attrs == k;
    const auto n_class = in_class.sum().item<int64_t>();
    if (n_class == 0) {
      throw DataError("attribute probe: eval set has no samples of subgroup " + std::to_string(k));
    }
    const auto hits = (pred == eval_attrs).logical_and(in_class).sum().item<int64_t>();
    recall_sum += static_cast<double>(hits) / static_cast<double>(n_class);
  }
  res.accuracy = recall_sum / static_cast<double>(eval_set.subgroup_count);
  res.chance = 1.0 / static_cast<double>(fit_set.subgroup_count);
  return res;
}

}  // namespace fairseg::train
