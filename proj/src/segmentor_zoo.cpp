#include "fairseg/segmentor_zoo.hpp"

#include <nlohmann/json.hpp>

#include <fstream>

#include "fairseg/error.hpp"
#include "fairseg/hashing.hpp"
#include "fairseg/training.hpp"

namespace fairseg::zoo {

namespace F = torch::nn::functional;

DoubleConvImpl::DoubleConvImpl(int64_t in_channels, int64_t out_channels) {
  conv1_ = register_module(
      "conv1", torch::nn::Conv2d(
                   torch::nn::Conv2dOptions(in_channels, out_channels, 3).padding(1).bias(false)));
  bn1_ = register_module("bn1", torch::nn::BatchNorm2d(out_channels));
  conv2_ = register_module(
      "conv2", torch::nn::Conv2d(
                   torch::nn::Conv2dOptions(out_channels, out_channels, 3).padding(1).bias(false)));
  bn2_ = register_module("bn2", torch::nn::BatchNorm2d(out_channels));
}

torch::Tensor DoubleConvImpl::forward(torch::Tensor x) {
  x = torch::relu(bn1_->forward(conv1_->forward(x)));
  return torch::relu(bn2_->forward(conv2_->forward(x)));
}

UNetEncoderImpl::UNetEncoderImpl(int64_t in_channels, int64_t base_channels) {
  const auto b = base_channels;
  inc_ = register_module("inc", DoubleConv(in_channels, b));
  down1_ = register_module("down1", DoubleConv(b, 2 * b));
  down2_ = register_module("down2", DoubleConv(2 * b, 4 * b));
  down3_ = register_module("down3", DoubleConv(4 * b, 8 * b));
  down4_ = register_module("down4", DoubleConv(8 * b, 16 * b));
}

std::pair<torch::Tensor, std::vector<torch::Tensor>> UNetEncoderImpl::forward(
    const torch::Tensor& x) {
  auto pool = [](const torch::Tensor& t) { return F::max_pool2d(t, F::MaxPool2dFuncOptions(2)); };
  auto s1 = inc_->forward(x);
  auto s2 = down1_->forward(pool(s1));
  auto s3 = down2_->forward(pool(s2));
  auto s4 = down3_->forward(pool(s3));
  auto bottleneck = down4_->forward(pool(s4));
  return {bottleneck, {s1, s2, s3, s4}};
}

UNetDecoderImpl::UNetDecoderImpl(int64_t base_channels, int64_t class_count) {
  const auto b = base_channels;
  up1_ = register_module("up1", DoubleConv(16 * b + 8 * b, 8 * b));
  up2_ = register_module("up2", DoubleConv(8 * b + 4 * b, 4 * b));
  up3_ = register_module("up3", DoubleConv(4 * b + 2 * b, 2 * b));
  up4_ = register_module("up4", DoubleConv(2 * b + b, b));
  out_ = register_module("out",
                         torch::nn::Conv2d(torch::nn::Conv2dOptions(b, class_count, 1).bias(true)));
}

torch::Tensor UNetDecoderImpl::up_block(DoubleConv& block, const torch::Tensor& x,
                                        const torch::Tensor& skip) {
  auto up = F::interpolate(
      x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
  return block->forward(torch::cat({up, skip}, 1));
}

torch::Tensor UNetDecoderImpl::forward(const torch::Tensor& bottleneck,
                                       const std::vector<torch::Tensor>& skips) {
  TORCH_CHECK(skips.size() == 4, "decoder expects 4 skip tensors, got ", skips.size());
  auto x = up_block(up1_, bottleneck, skips[3]);
  x = up_block(up2_, x, skips[2]);
  x = up_block(up3_, x, skips[1]);
  x = up_block(up4_, x, skips[0]);
  return out_->forward(x);
}

SplitSegmentor::SplitSegmentor(SegmentorProfile profile, int64_t class_count, int64_t in_channels,
                               int64_t input_h, int64_t input_w)
    : profile_(profile),
      class_count_(class_count),
      in_channels_(in_channels),
      input_h_(input_h),
      input_w_(input_w) {
  if (profile.base_channels < 1) {
    throw ConfigError("segmentor: base_channels must be >= 1");
  }
  if (class_count < 2) {
    throw ConfigError("segmentor: class_count must be >= 2");
  }
  if (in_channels < 1) {
    throw ConfigError("segmentor: in_channels must be >= 1");
  }
  if (input_h < 16 || input_w < 16 || input_h % 16 != 0 || input_w % 16 != 0) {
    throw ConfigError("segmentor: input dims must be multiples of 16, got " +
                      std::to_string(input_h) + "x" + std::to_string(input_w));
  }
  encoder_ = UNetEncoder(in_channels, profile.base_channels);
  decoder_ = UNetDecoder(profile.base_channels, class_count);
}

LatentEmbedding SplitSegmentor::encode(const torch::Tensor& images) const {
  TORCH_CHECK(defined(), "segmentor is not initialized");
  TORCH_CHECK(images.dim() == 4, "encode expects BxCxHxW input");
  TORCH_CHECK(images.size(1) == in_channels_, "encode: expected ", in_channels_, " channels, got ",
              images.size(1));
  TORCH_CHECK(images.size(2) == input_h_ && images.size(3) == input_w_,
              "encode: expected ", input_h_, "x", input_w_, " input");
  auto [bottleneck, skips] = encoder_->forward(images);
  return {bottleneck, std::move(skips)};
}

torch::Tensor SplitSegmentor::decode(const LatentEmbedding& embedding) const {
  TORCH_CHECK(defined(), "segmentor is not initialized");
  return decoder_->forward(embedding.tensor, embedding.skips);
}

torch::Tensor SplitSegmentor::forward(const torch::Tensor& images) const {
  return decode(encode(images));
}

torch::Tensor SplitSegmentor::predict(const torch::Tensor& images) const {
  torch::NoGradGuard ng;
  const bool was_training = encoder_->is_training();
  if (was_training) {
    encoder_->eval();
    decoder_->eval();
  }
  auto labels = forward(images).argmax(1);
  if (was_training) {
    encoder_->train();
    decoder_->train();
  }
  return labels;
}

void SplitSegmentor::freeze() {
  TORCH_CHECK(defined(), "segmentor is not initialized");
  for (auto& p : encoder_->parameters()) p.set_requires_grad(false);
  for (auto& p : decoder_->parameters()) p.set_requires_grad(false);
  encoder_->eval();
  decoder_->eval();
  frozen_ = true;
}

void SplitSegmentor::set_train(bool on) {
  TORCH_CHECK(defined(), "segmentor is not initialized");
  if (on && frozen_) {
    throw StateError("frozen segmentor cannot be put back into training mode");
  }
  encoder_->train(on);
  decoder_->train(on);
}

std::vector<torch::Tensor> SplitSegmentor::trainable_parameters() const {
  TORCH_CHECK(defined(), "segmentor is not initialized");
  if (frozen_) {
    throw StateError("frozen segmentor has no trainable parameters; optimizer registration refused");
  }
  std::vector<torch::Tensor> params;
  for (auto& p : encoder_->parameters()) params.push_back(p);
  for (auto& p : decoder_->parameters()) params.push_back(p);
  return params;
}

std::string SplitSegmentor::state_hash() const {
  TORCH_CHECK(defined(), "segmentor is not initialized");
  std::vector<std::pair<std::string, torch::Tensor>> state;
  collect_module_state(*encoder_, "encoder.", state);
  collect_module_state(*decoder_, "decoder.", state);
  return hash_named_tensors(state);
}

int64_t SplitSegmentor::parameter_count() const {
  TORCH_CHECK(defined(), "segmentor is not initialized");
  int64_t n = 0;
  for (const auto& p : encoder_->parameters()) n += p.numel();
  for (const auto& p : decoder_->parameters()) n += p.numel();
  return n;
}

void SplitSegmentor::save(const std::filesystem::path& dir, uint64_t seed) const {
  TORCH_CHECK(defined(), "segmentor is not initialized");
  std::filesystem::create_directories(dir);
  {
    torch::serialize::OutputArchive archive;
    encoder_->save(archive);
    archive.save_to((dir / "encoder.pt").string());
  }
  {
    torch::serialize::OutputArchive archive;
    decoder_->save(archive);
    archive.save_to((dir / "decoder.pt").string());
  }
  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["arch"] = "split_unet";
  manifest["base_channels"] = profile_.base_channels;
  manifest["class_count"] = class_count_;
  manifest["in_channels"] = in_channels_;
  manifest["input_h"] = input_h_;
  manifest["input_w"] = input_w_;
  manifest["seed"] = seed;
  manifest["parameter_count"] = parameter_count();
  manifest["state_sha256"] = state_hash();
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) {
    throw IoError("cannot write segmentor manifest under " + dir.string());
  }
  out << manifest.dump(2) << "\n";
}

SplitSegmentor SplitSegmentor::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) {
    throw StateError("no segmentor checkpoint at " + dir.string() + " (missing manifest.json)");
  }
  nlohmann::json manifest = nlohmann::json::parse(in);
  SegmentorProfile profile{manifest.at("base_channels").get<int64_t>()};
  SplitSegmentor seg(profile, manifest.at("class_count").get<int64_t>(),
                     manifest.at("in_channels").get<int64_t>(),
                     manifest.at("input_h").get<int64_t>(), manifest.at("input_w").get<int64_t>());
  {
    torch::serialize::InputArchive archive;
    archive.load_from((dir / "encoder.pt").string());
    seg.encoder_->load(archive);
  }
  {
    torch::serialize::InputArchive archive;
    archive.load_from((dir / "decoder.pt").string());
    seg.decoder_->load(archive);
  }
  const auto expected = manifest.at("state_sha256").get<std::string>();
  const auto actual = seg.state_hash();
  if (actual != expected) {
    throw StateError("segmentor checkpoint at " + dir.string() +
                     " failed its hash check (expected " + expected + ", got " + actual + ")");
  }
  return seg;
}

SplitSegmentor build_reference_segmentor(SegmentorProfile profile, int64_t class_count,
                                         int64_t in_channels, int64_t input_h, int64_t input_w) {
  return SplitSegmentor(profile, class_count, in_channels, input_h, input_w);
}

BaselineTrainResult train_baseline(SplitSegmentor& segmentor, const data::SegDataset& train_set,
                                   const train::TrainConfig& config,
                                   const std::filesystem::path& run_dir) {
  BaselineTrainResult result;
  result.manifest = train::fit_segmentor(segmentor, train_set, config, train::SamplerKind::Uniform,
                                         "baseline", run_dir);
  for (const auto& record : result.manifest.history) {
    if (std::isfinite(record.val_dice_mean) && record.val_dice_mean > result.best_val_dice) {
      result.best_val_dice = record.val_dice_mean;
    }
  }
  return result;
}

}  // namespace fairseg::zoo
