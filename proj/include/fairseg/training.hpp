#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fairseg/apple_core.hpp"
#include "fairseg/data_model.hpp"
#include "fairseg/run_types.hpp"
#include "fairseg/segmentor_zoo.hpp"

namespace fairseg::train {

enum class SamplerKind { Uniform, InverseFrequency };

// Index draws for one epoch of inverse-frequency resampling: each draw picks
// sample i with probability proportional to 1/|subgroup(i)|, with
// replacement. Every subgroup must be populated.
std::vector<int64_t> weighted_subgroup_indices(const std::vector<int64_t>& attributes,
                                               int64_t subgroup_count, int64_t n_draws,
                                               std::mt19937_64& rng);

// Shared engine behind the plain and resampled segmentor trainers: Dice-CE
// objective, momentum-free SGD, best-validation-Dice checkpointing.
RunManifest fit_segmentor(zoo::SplitSegmentor& segmentor, const data::SegDataset& train_set,
                          const TrainConfig& config, SamplerKind sampler, const std::string& kind,
                          const std::filesystem::path& run_dir);

// Inverse-frequency resampled training (same objective as the baseline).
zoo::BaselineTrainResult train_resampled(zoo::SplitSegmentor& segmentor,
                                         const data::SegDataset& train_set,
                                         const TrainConfig& config,
                                         const std::filesystem::path& run_dir = {});

// Alternating adversarial training over a frozen segmentor, one discriminator
// step then one generator step per batch; the generator step runs a fresh
// forward against the just-updated discriminator. Writes gp/dp checkpoints
// plus manifest and history when run_dir is nonempty.
RunManifest train_apple(const zoo::SplitSegmentor& frozen_segmentor,
                        apple::PerturberBundle& bundle, const data::SegDataset& train_set,
                        const TrainConfig& config, const std::filesystem::path& run_dir = {});

// argmax of D_s(f_o + G_p(f_o)); the discriminator plays no role at test
// time. Returns B x H x W int64 labels.
torch::Tensor predict_apple(const zoo::SplitSegmentor& frozen_segmentor,
                            apple::PerturbationGenerator& generator, const torch::Tensor& images);

struct SubgroupModelSet {
  std::vector<zoo::SplitSegmentor> models;  // one per subgroup
  int64_t subgroup_count = 0;

  // Routes each sample to its subgroup's model; attributes are required.
  torch::Tensor predict(const torch::Tensor& images, const torch::Tensor& attributes) const;

  void save(const std::filesystem::path& dir, uint64_t seed) const;
  static SubgroupModelSet load(const std::filesystem::path& dir);
};

struct SubgroupModelsResult {
  SubgroupModelSet models;
  RunManifest manifest;
};

// One independent segmentor per subgroup, each trained with the baseline
// recipe on its own slice. Subgroups too small for a validation split train
// without one (warning).
SubgroupModelsResult train_subgroup_models(const data::SegDataset& train_set,
                                           const TrainConfig& config,
                                           const std::filesystem::path& run_dir = {},
                                           zoo::SegmentorProfile profile = {});

struct ProbeResult {
  double accuracy = 0.0;  // balanced: mean per-subgroup recall on the eval set
  double chance = 0.0;    // 1/K, what a constant or random probe scores
  int64_t correct = 0;    // raw hit count, unbalanced
  int64_t total = 0;
};

// Fits a fresh attribute discriminator on frozen embeddings (perturbed when a
// generator is given, raw otherwise) of the fit set, then reports balanced
// accuracy on the eval set. Measures how much subgroup information survives
// in the embedding.
ProbeResult train_attribute_probe(const zoo::SplitSegmentor& frozen_segmentor,
                                  apple::PerturbationGenerator* generator,
                                  const data::SegDataset& fit_set, const data::SegDataset& eval_set,
                                  uint64_t seed, int64_t epochs = 40, int64_t batch_size = 32,
                                  double lr = 1e-3);

// Collated minibatch of a dataset slice.
struct Batch {
  torch::Tensor images;      // B x C x H x W float32
  torch::Tensor masks;       // B x H x W int64
  torch::Tensor attributes;  // B int64
};

// Stacks the given samples; when augment_rng is nonnull applies per-sample
// random flips (and 90-degree rotations for square images) to image and mask
// together.
Batch collate(const data::SegDataset& dataset, const std::vector<int64_t>& indices,
              std::mt19937_64* augment_rng = nullptr);

// Shuffled index batches covering the dataset once; the last batch may be
// short.
std::vector<std::vector<int64_t>> make_batches(int64_t n, int64_t batch_size,
                                               std::mt19937_64& rng);

// Per-subgroup mean Dice (and the sample mean) of a predictor over a dataset.
struct ValScores {
  std::vector<double> per_subgroup;  // NaN where unpopulated
  double sample_mean = 0.0;
};
using BatchPredictor = std::function<torch::Tensor(const Batch&)>;
ValScores validation_scores(const data::SegDataset& dataset, const BatchPredictor& predict,
                            int64_t batch_size);

}  // namespace fairseg::train
