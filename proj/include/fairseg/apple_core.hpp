#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "fairseg/segmentor_zoo.hpp"

namespace fairseg::apple {

struct GeneratorConfig {
  int64_t embedding_channels = 0;
  std::array<int64_t, 3> encoder_channels{32, 64, 128};
  int64_t bottleneck_blocks = 4;  // at encoder_channels[2] width
  std::array<int64_t, 2> decoder_channels{64, 32};
};

// Residual perturbation network over the frozen segmentor's embedding. The
// final conv is zero-initialized, so a fresh generator is the identity map.
// Stages run strided (2x down, nearest 2x up) when the embedding spatial dims
// are at least 8 and divisible by 8, else everything stays at stride 1.
class PerturbationGeneratorImpl : public torch::nn::Module {
 public:
  PerturbationGeneratorImpl(GeneratorConfig config, int64_t embedding_h, int64_t embedding_w);
  // Residual delta with the same shape as the input embedding.
  torch::Tensor forward(const torch::Tensor& embedding);

  const GeneratorConfig& config() const { return config_; }
  bool strided() const { return strided_; }
  std::pair<int64_t, int64_t> embedding_spatial() const { return {embedding_h_, embedding_w_}; }

 private:
  GeneratorConfig config_;
  int64_t embedding_h_ = 0, embedding_w_ = 0;
  bool strided_ = false;
  torch::nn::Sequential down_{nullptr}, bottleneck_{nullptr}, up_{nullptr};
};
TORCH_MODULE(PerturbationGenerator);

struct DiscriminatorConfig {
  int64_t embedding_channels = 0;
  int64_t subgroup_count = 0;
  std::array<int64_t, 2> hidden{128, 64};
};

// Predicts the protected subgroup from a (perturbed) embedding: global
// average pooling, two Linear-BatchNorm-ReLU blocks, then a linear layer
// producing the K logits.
class AttributeDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit AttributeDiscriminatorImpl(DiscriminatorConfig config);
  torch::Tensor forward(const torch::Tensor& embedding);  // B x K logits

  const DiscriminatorConfig& config() const { return config_; }

 private:
  DiscriminatorConfig config_;
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr}, out_{nullptr};
  torch::nn::BatchNorm1d bn1_{nullptr}, bn2_{nullptr};
};
TORCH_MODULE(AttributeDiscriminator);

// f_p = f_o + G_p(f_o); skip connections pass through untouched.
zoo::LatentEmbedding perturb(PerturbationGenerator& generator,
                             const zoo::LatentEmbedding& embedding);

// Mean cross-entropy (natural log) of the discriminator against the true
// subgroups.
torch::Tensor loss_discriminator(const torch::Tensor& logits, const torch::Tensor& subgroups);

// Batch-mean Shannon entropy (natural log) of softmax(logits); bounded by
// ln(K).
torch::Tensor softmax_entropy(const torch::Tensor& logits);

// Confusion objective for the generator: negated discriminator CE minus
// alpha times the prediction entropy.
torch::Tensor loss_fair(const torch::Tensor& logits, const torch::Tensor& subgroups, double alpha);

// Equally weighted cross-entropy and soft-Dice segmentation loss. Soft Dice
// aggregates per class over the whole batch with smoothing 1e-5.
torch::Tensor loss_seg(const torch::Tensor& logits, const torch::Tensor& masks);

// Total generator objective: seg + beta * fair.
torch::Tensor loss_generator(const torch::Tensor& seg_loss, const torch::Tensor& fair_loss,
                             double beta);

inline constexpr double kDiceSmooth = 1e-5;

struct AppleHyperparams {
  double alpha = 0.1;
  double beta = 1.0;
  void validate() const;
};

struct PerturberBundle {
  PerturbationGenerator generator{nullptr};
  AttributeDiscriminator discriminator{nullptr};
  AppleHyperparams hyper;

  // Builds G_p/D_p matched to the frozen segmentor's embedding geometry.
  static PerturberBundle create(const zoo::SplitSegmentor& segmentor, int64_t subgroup_count,
                                AppleHyperparams hyper, GeneratorConfig generator_config = {},
                                DiscriminatorConfig discriminator_config = {});

  std::string state_hash() const;
  // Writes gp.pt, dp.pt and apple_manifest.json (hyperparams, dims, the base
  // segmentor's state hash, seed).
  void save(const std::filesystem::path& dir, const std::string& base_segmentor_hash,
            uint64_t seed) const;
  static PerturberBundle load(const std::filesystem::path& dir);
  // Base segmentor hash recorded at save time; empty if never saved.
  static std::string saved_base_hash(const std::filesystem::path& dir);
};

}  // namespace fairseg::apple
