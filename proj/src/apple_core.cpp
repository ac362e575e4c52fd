#include "fairseg/apple_core.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>

#include "fairseg/error.hpp"
#include "fairseg/hashing.hpp"

namespace fairseg::apple {

namespace F = torch::nn::functional;

namespace {

int64_t norm_groups(int64_t channels) {
  int64_t g = std::min<int64_t>(8, channels);
  while (channels % g != 0) --g;
  return g;
}

void append_conv_block(torch::nn::Sequential& seq, int64_t in, int64_t out, int64_t stride) {
  seq->push_back(torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
  seq->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups(out), out)));
  seq->push_back(torch::nn::ReLU());
}

void append_upsample(torch::nn::Sequential& seq) {
  seq->push_back(torch::nn::Upsample(
      torch::nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
}

}  // namespace

PerturbationGeneratorImpl::PerturbationGeneratorImpl(GeneratorConfig config, int64_t embedding_h,
                                                     int64_t embedding_w)
    : config_(config), embedding_h_(embedding_h), embedding_w_(embedding_w) {
  if (config.embedding_channels < 1) {
    throw ConfigError("perturbation generator: embedding_channels must be set");
  }
  for (auto c : config.encoder_channels) {
    if (c < 1) throw ConfigError("perturbation generator: encoder channels must be positive");
  }
  for (auto c : config.decoder_channels) {
    if (c < 1) throw ConfigError("perturbation generator: decoder channels must be positive");
  }
  if (config.bottleneck_blocks < 1) {
    throw ConfigError("perturbation generator: bottleneck_blocks must be >= 1");
  }
  if (embedding_h < 1 || embedding_w < 1) {
    throw ConfigError("perturbation generator: embedding dims must be positive");
  }
  strided_ = embedding_h >= 8 && embedding_w >= 8 && embedding_h % 8 == 0 && embedding_w % 8 == 0;
  const int64_t stride = strided_ ? 2 : 1;

  down_ = torch::nn::Sequential();
  append_conv_block(down_, config.embedding_channels, config.encoder_channels[0], stride);
  append_conv_block(down_, config.encoder_channels[0], config.encoder_channels[1], stride);
  append_conv_block(down_, config.encoder_channels[1], config.encoder_channels[2], stride);

  bottleneck_ = torch::nn::Sequential();
  for (int64_t i = 0; i < config.bottleneck_blocks; ++i) {
    append_conv_block(bottleneck_, config.encoder_channels[2], config.encoder_channels[2], 1);
  }

  up_ = torch::nn::Sequential();
  if (strided_) append_upsample(up_);
  append_conv_block(up_, config.encoder_channels[2], config.decoder_channels[0], 1);
  if (strided_) append_upsample(up_);
  append_conv_block(up_, config.decoder_channels[0], config.decoder_channels[1], 1);
  if (strided_) append_upsample(up_);
  auto final_conv = torch::nn::Conv2d(
      torch::nn::Conv2dOptions(config.decoder_channels[1], config.embedding_channels, 3)
          .padding(1)
          .bias(true));
  {
    // Identity at initialization: the residual starts at exactly zero.
    torch::NoGradGuard ng;
    torch::nn::init::zeros_(final_conv->weight);
    torch::nn::init::zeros_(final_conv->bias);
  }
  up_->push_back(final_conv);

  register_module("down", down_);
  register_module("bottleneck", bottleneck_);
  register_module("up", up_);
}

torch::Tensor PerturbationGeneratorImpl::forward(const torch::Tensor& embedding) {
  TORCH_CHECK(embedding.dim() == 4, "generator expects BxCxhxw embeddings");
  TORCH_CHECK(embedding.size(1) == config_.embedding_channels, "generator expects ",
              config_.embedding_channels, " channels, got ", embedding.size(1));
  TORCH_CHECK(embedding.size(2) == embedding_h_ && embedding.size(3) == embedding_w_,
              "generator expects ", embedding_h_, "x", embedding_w_, " embeddings");
  auto x = down_->forward(embedding);
  x = bottleneck_->forward(x);
  return up_->forward(x);
}

AttributeDiscriminatorImpl::AttributeDiscriminatorImpl(DiscriminatorConfig config)
    : config_(config) {
  if (config.embedding_channels < 1) {
    throw ConfigError("attribute discriminator: embedding_channels must be set");
  }
  if (config.subgroup_count < 2) {
    throw ConfigError("attribute discriminator: subgroup_count must be >= 2");
  }
  if (config.hidden[0] < 1 || config.hidden[1] < 1) {
    throw ConfigError("attribute discriminator: hidden widths must be positive");
  }
  fc1_ = register_module("fc1", torch::nn::Linear(config.embedding_channels, config.hidden[0]));
  bn1_ = register_module("bn1", torch::nn::BatchNorm1d(config.hidden[0]));
  fc2_ = register_module("fc2", torch::nn::Linear(config.hidden[0], config.hidden[1]));
  bn2_ = register_module("bn2", torch::nn::BatchNorm1d(config.hidden[1]));
  out_ = register_module("out", torch::nn::Linear(config.hidden[1], config.subgroup_count));
}

torch::Tensor AttributeDiscriminatorImpl::forward(const torch::Tensor& embedding) {
  TORCH_CHECK(embedding.dim() == 4, "discriminator expects BxCxhxw embeddings");
  TORCH_CHECK(embedding.size(1) == config_.embedding_channels, "discriminator expects ",
              config_.embedding_channels, " channels, got ", embedding.size(1));
  // Batch statistics are undefined for a single sample; fall back to running
  // statistics for that batch.
  const bool bn_fallback = is_training() && embedding.size(0) == 1;
  if (bn_fallback) {
    bn1_->eval();
    bn2_->eval();
  }
  auto x = F::adaptive_avg_pool2d(embedding, F::AdaptiveAvgPool2dFuncOptions(1)).flatten(1);
  x = torch::relu(bn1_->forward(fc1_->forward(x)));
  x = torch::relu(bn2_->forward(fc2_->forward(x)));
  x = out_->forward(x);
  if (bn_fallback) {
    bn1_->train();
    bn2_->train();
  }
  return x;
}

zoo::LatentEmbedding perturb(PerturbationGenerator& generator,
                             const zoo::LatentEmbedding& embedding) {
  auto delta = generator->forward(embedding.tensor);
  return {embedding.tensor + delta, embedding.skips};
}

torch::Tensor loss_discriminator(const torch::Tensor& logits, const torch::Tensor& subgroups) {
  TORCH_CHECK(logits.dim() == 2, "loss_discriminator expects BxK logits");
  TORCH_CHECK(subgroups.dim() == 1 && subgroups.size(0) == logits.size(0),
              "loss_discriminator: subgroup vector must match the batch");
  return F::cross_entropy(logits, subgroups.to(torch::kInt64));
}

torch::Tensor softmax_entropy(const torch::Tensor& logits) {
  TORCH_CHECK(logits.dim() == 2, "softmax_entropy expects BxK logits");
  auto logp = torch::log_softmax(logits, 1);
  return -(logp.exp() * logp).sum(1).mean();
}

torch::Tensor loss_fair(const torch::Tensor& logits, const torch::Tensor& subgroups,
                        double alpha) {
  TORCH_CHECK(std::isfinite(alpha), "loss_fair: alpha must be finite");
  return -loss_discriminator(logits, subgroups) - alpha * softmax_entropy(logits);
}

torch::Tensor loss_seg(const torch::Tensor& logits, const torch::Tensor& masks) {
  TORCH_CHECK(logits.dim() == 4, "loss_seg expects BxLxHxW logits");
  TORCH_CHECK(masks.dim() == 3, "loss_seg expects BxHxW masks");
  TORCH_CHECK(logits.size(0) == masks.size(0) && logits.size(2) == masks.size(1) &&
                  logits.size(3) == masks.size(2),
              "loss_seg: logits and masks disagree on batch or spatial dims");
  const auto class_count = logits.size(1);
  auto target = masks.to(torch::kInt64);
  TORCH_CHECK(target.min().item<int64_t>() >= 0 && target.max().item<int64_t>() < class_count,
              "loss_seg: mask ids must lie in [0,", class_count, ")");

  auto ce = F::cross_entropy(logits, target);

  auto probs = torch::softmax(logits, 1);
  auto onehot = torch::one_hot(target, class_count).permute({0, 3, 1, 2}).to(probs.scalar_type());
  auto inter = (probs * onehot).sum({0, 2, 3});
  auto denom = probs.sum({0, 2, 3}) + onehot.sum({0, 2, 3});
  auto dice = (2.0 * inter + kDiceSmooth) / (denom + kDiceSmooth);
  auto dice_loss = 1.0 - dice.mean();

  return 0.5 * (ce + dice_loss);
}

torch::Tensor loss_generator(const torch::Tensor& seg_loss, const torch::Tensor& fair_loss,
                             double beta) {
  TORCH_CHECK(std::isfinite(beta), "loss_generator: beta must be finite");
  return seg_loss + beta * fair_loss;
}

void AppleHyperparams::validate() const {
  if (!std::isfinite(alpha) || alpha < 0.0) {
    throw ConfigError("alpha must be finite and >= 0, got " + std::to_string(alpha));
  }
  if (!std::isfinite(beta) || beta < 0.0) {
    throw ConfigError("beta must be finite and >= 0, got " + std::to_string(beta));
  }
}

PerturberBundle PerturberBundle::create(const zoo::SplitSegmentor& segmentor,
                                        int64_t subgroup_count, AppleHyperparams hyper,
                                        GeneratorConfig generator_config,
                                        DiscriminatorConfig discriminator_config) {
  hyper.validate();
  const auto [h, w] = segmentor.embedding_spatial();
  generator_config.embedding_channels = segmentor.embedding_channels();
  discriminator_config.embedding_channels = segmentor.embedding_channels();
  discriminator_config.subgroup_count = subgroup_count;

  PerturberBundle bundle;
  bundle.generator = PerturbationGenerator(generator_config, h, w);
  bundle.discriminator = AttributeDiscriminator(discriminator_config);
  bundle.hyper = hyper;
  return bundle;
}

std::string PerturberBundle::state_hash() const {
  std::vector<std::pair<std::string, torch::Tensor>> state;
  collect_module_state(*generator, "generator.", state);
  collect_module_state(*discriminator, "discriminator.", state);
  return hash_named_tensors(state);
}

void PerturberBundle::save(const std::filesystem::path& dir, const std::string& base_segmentor_hash,
                           uint64_t seed) const {
  std::filesystem::create_directories(dir);
  {
    torch::serialize::OutputArchive archive;
    generator->save(archive);
    archive.save_to((dir / "gp.pt").string());
  }
  {
    torch::serialize::OutputArchive archive;
    discriminator->save(archive);
    archive.save_to((dir / "dp.pt").string());
  }
  const auto& gc = generator->config();
  const auto& dc = discriminator->config();
  const auto [h, w] = generator->embedding_spatial();
  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["alpha"] = hyper.alpha;
  manifest["beta"] = hyper.beta;
  manifest["base_segmentor_hash"] = base_segmentor_hash;
  manifest["seed"] = seed;
  manifest["embedding_channels"] = gc.embedding_channels;
  manifest["embedding_h"] = h;
  manifest["embedding_w"] = w;
  manifest["subgroup_count"] = dc.subgroup_count;
  manifest["generator_encoder_channels"] = gc.encoder_channels;
  manifest["generator_bottleneck_blocks"] = gc.bottleneck_blocks;
  manifest["generator_decoder_channels"] = gc.decoder_channels;
  manifest["discriminator_hidden"] = dc.hidden;
  manifest["state_sha256"] = state_hash();
  std::ofstream out(dir / "apple_manifest.json", std::ios::binary);
  if (!out) {
    throw IoError("cannot write apple_manifest.json under " + dir.string());
  }
  out << manifest.dump(2) << "\n";
}

PerturberBundle PerturberBundle::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "apple_manifest.json");
  if (!in) {
    throw StateError("no perturber checkpoint at " + dir.string() +
                     " (missing apple_manifest.json)");
  }
  nlohmann::json manifest = nlohmann::json::parse(in);

  GeneratorConfig gc;
  gc.embedding_channels = manifest.at("embedding_channels").get<int64_t>();
  gc.encoder_channels = manifest.at("generator_encoder_channels").get<std::array<int64_t, 3>>();
  gc.bottleneck_blocks = manifest.at("generator_bottleneck_blocks").get<int64_t>();
  gc.decoder_channels = manifest.at("generator_decoder_channels").get<std::array<int64_t, 2>>();
  DiscriminatorConfig dc;
  dc.embedding_channels = gc.embedding_channels;
  dc.subgroup_count = manifest.at("subgroup_count").get<int64_t>();
  dc.hidden = manifest.at("discriminator_hidden").get<std::array<int64_t, 2>>();

  PerturberBundle bundle;
  bundle.generator = PerturbationGenerator(gc, manifest.at("embedding_h").get<int64_t>(),
                                           manifest.at("embedding_w").get<int64_t>());
  bundle.discriminator = AttributeDiscriminator(dc);
  bundle.hyper.alpha = manifest.at("alpha").get<double>();
  bundle.hyper.beta = manifest.at("beta").get<double>();
  {
    torch::serialize::InputArchive archive;
    archive.load_from((dir / "gp.pt").string());
    bundle.generator->load(archive);
  }
  {
    torch::serialize::InputArchive archive;
    archive.load_from((dir / "dp.pt").string());
    bundle.discriminator->load(archive);
  }
  const auto expected = manifest.at("state_sha256").get<std::string>();
  const auto actual = bundle.state_hash();
  if (actual != expected) {
    throw StateError("perturber checkpoint at " + dir.string() + " failed its hash check");
  }
  return bundle;
}

std::string PerturberBundle::saved_base_hash(const std::filesystem::path& dir) {
  std::ifstream in(dir / "apple_manifest.json");
  if (!in) {
    return {};
  }
  nlohmann::json manifest = nlohmann::json::parse(in);
  return manifest.value("base_segmentor_hash", std::string{});
}

}  // namespace fairseg::apple
