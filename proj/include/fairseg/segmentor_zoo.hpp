#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fairseg/data_model.hpp"
#include "fairseg/run_types.hpp"

namespace fairseg::zoo {

// Encoder output at the bottleneck plus the skip features the decoder
// consumes; skips are ordered shallow to deep.
struct LatentEmbedding {
  torch::Tensor tensor;  // B x C x h x w bottleneck features
  std::vector<torch::Tensor> skips;
};

struct SegmentorProfile {
  int64_t base_channels = 8;  // encoder widths are base*(1,2,4,8), bottleneck base*16
};

class DoubleConvImpl : public torch::nn::Module {
 public:
  DoubleConvImpl(int64_t in_channels, int64_t out_channels);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
};
TORCH_MODULE(DoubleConv);

class UNetEncoderImpl : public torch::nn::Module {
 public:
  UNetEncoderImpl(int64_t in_channels, int64_t base_channels);
  // Returns {bottleneck, skips}; four pooling stages, so spatial dims shrink
  // by 16.
  std::pair<torch::Tensor, std::vector<torch::Tensor>> forward(const torch::Tensor& x);

 private:
  DoubleConv inc_{nullptr}, down1_{nullptr}, down2_{nullptr}, down3_{nullptr}, down4_{nullptr};
};
TORCH_MODULE(UNetEncoder);

class UNetDecoderImpl : public torch::nn::Module {
 public:
  UNetDecoderImpl(int64_t base_channels, int64_t class_count);
  torch::Tensor forward(const torch::Tensor& bottleneck, const std::vector<torch::Tensor>& skips);

 private:
  torch::Tensor up_block(DoubleConv& block, const torch::Tensor& x, const torch::Tensor& skip);
  DoubleConv up1_{nullptr}, up2_{nullptr}, up3_{nullptr}, up4_{nullptr};
  torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(UNetDecoder);

// A segmentation network split into encoder and decoder around the
// bottleneck, so the embedding can be perturbed between the halves.
class SplitSegmentor {
 public:
  SplitSegmentor() = default;
  SplitSegmentor(SegmentorProfile profile, int64_t class_count, int64_t in_channels,
                 int64_t input_h, int64_t input_w);

  LatentEmbedding encode(const torch::Tensor& images) const;
  torch::Tensor decode(const LatentEmbedding& embedding) const;
  torch::Tensor forward(const torch::Tensor& images) const;
  // Eval-mode, no-grad argmax labels (B x H x W int64).
  torch::Tensor predict(const torch::Tensor& images) const;

  // Locks every parameter and pins eval mode; frozen segmentors cannot be
  // put back into training.
  void freeze();
  bool frozen() const { return frozen_; }
  void set_train(bool on);

  std::vector<torch::Tensor> trainable_parameters() const;  // StateError when frozen
  std::string state_hash() const;

  void save(const std::filesystem::path& dir, uint64_t seed) const;
  static SplitSegmentor load(const std::filesystem::path& dir);

  int64_t embedding_channels() const { return profile_.base_channels * 16; }
  std::pair<int64_t, int64_t> embedding_spatial() const { return {input_h_ / 16, input_w_ / 16}; }
  int64_t class_count() const { return class_count_; }
  int64_t in_channels() const { return in_channels_; }
  std::pair<int64_t, int64_t> input_spatial() const { return {input_h_, input_w_}; }
  const SegmentorProfile& profile() const { return profile_; }
  int64_t parameter_count() const;
  bool defined() const { return encoder_.get() != nullptr; }

  UNetEncoder& encoder() { return encoder_; }
  UNetDecoder& decoder() { return decoder_; }

 private:
  // mutable so the const inference entry points compile; module holders share
  // state across copies anyway, and forward passes touch buffers in train mode
  mutable UNetEncoder encoder_{nullptr};
  mutable UNetDecoder decoder_{nullptr};
  SegmentorProfile profile_;
  int64_t class_count_ = 0;
  int64_t in_channels_ = 0;
  int64_t input_h_ = 0;
  int64_t input_w_ = 0;
  bool frozen_ = false;
};

// The reference architecture: 4-down/4-up U-Net split at the bottleneck.
// Input dims must be divisible by 16.
SplitSegmentor build_reference_segmentor(SegmentorProfile profile, int64_t class_count,
                                         int64_t in_channels, int64_t input_h, int64_t input_w);

struct BaselineTrainResult {
  train::RunManifest manifest;
  double best_val_dice = 0.0;
};

// Dice-CE baseline training with momentum-free SGD; keeps the best
// validation-Dice epoch. Writes run artifacts when run_dir is nonempty.
BaselineTrainResult train_baseline(SplitSegmentor& segmentor, const data::SegDataset& train_set,
                                   const train::TrainConfig& config,
                                   const std::filesystem::path& run_dir = {});

}  // namespace fairseg::zoo
