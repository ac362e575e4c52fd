#include "fairseg/synth_data.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "fairseg/error.hpp"
#include "fairseg/image_io.hpp"
#include "fairseg/rng.hpp"

namespace fairseg::synth {

namespace {

constexpr double kMinArea = 0.01;
constexpr double kMaxArea = 0.50;
constexpr double kBaseNoise = 0.02;  // sigma for every sample
// Base appearance draws. The contrast range is deliberately wide: subgroup
// 1's dimmed draws then overlap subgroup 0's faint end instead of forming a
// separate brightness band, so no single global cue gives the subgroup away.
constexpr double kBgLo = 0.15;
constexpr double kBgHi = 0.35;
constexpr double kContrastLo = 0.12;
constexpr double kContrastHi = 0.65;
// Subgroup 1's handicap per unit difficulty gap: foreground/background
// contrast shrinks by the gap itself, and additive noise scales with it.
// The noise has a white part and a structured part, one or two hard-edged
// shape-like artifacts of the kind acquisition leaves behind. Artifacts stay
// a bit dimmer and smaller than the true shape and vanish as the gap goes to
// zero, so they read as secondary structures the net is tempted to segment.
constexpr double kGapNoise = 0.02;        // white component, per unit gap
constexpr double kArtifactAmp = 0.8;      // artifact height = kArtifactAmp * gap * contrast draw
constexpr double kArtifactMinSep = 0.28;  // min artifact distance from the target center
constexpr double kArtifactScaleLo = 0.35; // artifact size range relative to a target draw
constexpr double kArtifactScaleHi = 0.50;

// Hand-rolled draws so generated bytes do not depend on the C++ runtime's
// distribution internals.
double u01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * u01(rng); }

int64_t uniform_int(std::mt19937_64& rng, int64_t lo, int64_t hi) {
  return lo + static_cast<int64_t>(rng() % static_cast<uint64_t>(hi - lo + 1));
}

double normal(std::mt19937_64& rng) {
  const double u1 = std::max(u01(rng), 1e-300);
  const double u2 = u01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

int64_t draw_discrete(std::mt19937_64& rng, const std::vector<double>& weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = u01(rng) * total;
  for (size_t i = 0; i < weights.size(); ++i) {
    u -= weights[i];
    if (u < 0.0) return static_cast<int64_t>(i);
  }
  return static_cast<int64_t>(weights.size()) - 1;
}

struct ShapeDraw {
  std::vector<uint8_t> mask;
  double cx = 0.0;
  double cy = 0.0;
  int64_t area = 0;
};

ShapeDraw rasterize_shape(std::mt19937_64& rng, const SynthConfig& cfg, double cx, double cy,
                          double scale) {
  const auto res = cfg.resolution;
  ShapeDraw out;
  out.mask.assign(static_cast<size_t>(res * res), 0);
  out.cx = cx;
  out.cy = cy;
  if (cfg.shape_family == ShapeFamily::Ellipse) {
    const double a = scale * uniform(rng, 0.12, 0.28) * static_cast<double>(res);
    const double b = scale * uniform(rng, 0.12, 0.28) * static_cast<double>(res);
    const double theta = uniform(rng, 0.0, std::numbers::pi);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int64_t y = 0; y < res; ++y) {
      for (int64_t x = 0; x < res; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx;
        const double dy = static_cast<double>(y) + 0.5 - cy;
        const double xr = dx * ct + dy * st;
        const double yr = -dx * st + dy * ct;
        const bool inside = (xr * xr) / (a * a) + (yr * yr) / (b * b) <= 1.0;
        out.mask[y * res + x] = inside ? 1 : 0;
        out.area += inside;
      }
    }
  } else {
    const double r0 = scale * uniform(rng, 0.15, 0.28) * static_cast<double>(res);
    const double p1 = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double p2 = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    for (int64_t y = 0; y < res; ++y) {
      for (int64_t x = 0; x < res; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx;
        const double dy = static_cast<double>(y) + 0.5 - cy;
        const double r = std::hypot(dx, dy);
        const double phi = std::atan2(dy, dx);
        const double edge =
            r0 * (1.0 + 0.25 * std::sin(3.0 * phi + p1) + 0.15 * std::sin(5.0 * phi + p2));
        const bool inside = r <= edge;
        out.mask[y * res + x] = inside ? 1 : 0;
        out.area += inside;
      }
    }
  }
  return out;
}

ShapeDraw render_target(std::mt19937_64& rng, const SynthConfig& cfg) {
  const auto n_px = cfg.resolution * cfg.resolution;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double cx = uniform(rng, 0.30, 0.70) * static_cast<double>(cfg.resolution);
    const double cy = uniform(rng, 0.30, 0.70) * static_cast<double>(cfg.resolution);
    auto draw = rasterize_shape(rng, cfg, cx, cy, 1.0);
    const double frac = static_cast<double>(draw.area) / static_cast<double>(n_px);
    if (frac >= kMinArea && frac <= kMaxArea) {
      return draw;
    }
  }
  throw TrainingError("synth: could not render a mask inside the area band after 100 attempts");
}

// Adds one hard-edged shape-like artifact away from the target; after 30
// placement tries the last draw is accepted rather than failing the sample.
void add_artifact(std::mt19937_64& rng, const SynthConfig& cfg, const ShapeDraw& target,
                  double amplitude, std::vector<float>& img) {
  const auto res = cfg.resolution;
  const auto resd = static_cast<double>(res);
  double cx = 0.0, cy = 0.0;
  for (int attempt = 0; attempt < 30; ++attempt) {
    cx = uniform(rng, 0.12, 0.88) * resd;
    cy = uniform(rng, 0.12, 0.88) * resd;
    if (std::hypot(cx - target.cx, cy - target.cy) >= kArtifactMinSep * resd) break;
  }
  const double scale = uniform(rng, kArtifactScaleLo, kArtifactScaleHi);
  const ShapeDraw artifact = rasterize_shape(rng, cfg, cx, cy, scale);
  for (int64_t p = 0; p < res * res; ++p) {
    if (artifact.mask[p] != 0) img[p] += static_cast<float>(amplitude);
  }
}

}  // namespace

ShapeFamily shape_family_from_string(const std::string& s) {
  if (s == "ellipse") return ShapeFamily::Ellipse;
  if (s == "blob") return ShapeFamily::Blob;
  throw ConfigError("unknown shape family '" + s + "' (expected 'ellipse' or 'blob')");
}

std::string to_string(ShapeFamily f) {
  return f == ShapeFamily::Ellipse ? "ellipse" : "blob";
}

void SynthConfig::validate() const {
  if (n_samples < 1) {
    throw ConfigError("synth config: n_samples must be >= 1, got " + std::to_string(n_samples));
  }
  if (resolution < 32) {
    throw ConfigError("synth config: resolution must be >= 32, got " + std::to_string(resolution));
  }
  if (!(attribute_balance > 0.0 && attribute_balance < 1.0)) {
    throw ConfigError("synth config: attribute_balance must be in (0,1), got " +
                      std::to_string(attribute_balance));
  }
  if (!(difficulty_gap >= 0.0) || difficulty_gap >= 1.0) {
    throw ConfigError("synth config: difficulty_gap must be in [0,1), got " +
                      std::to_string(difficulty_gap));
  }
  if (age_bin_weights.size() != 5) {
    throw ConfigError("synth config: age_bin_weights needs 5 entries");
  }
  for (double w : age_bin_weights) {
    if (!(w > 0.0)) {
      throw ConfigError("synth config: age_bin_weights must be positive");
    }
  }
}

data::SegDataset generate(const SynthConfig& config, const std::filesystem::path& out_root) {
  config.validate();
  std::filesystem::create_directories(out_root / "images");
  std::filesystem::create_directories(out_root / "masks");

  static const int64_t kAgeEdges[] = {0, 20, 40, 60, 80, 100};
  const auto res = config.resolution;
  const auto n_px = res * res;

  std::string csv = "id,sex,age\n";
  for (int64_t i = 0; i < config.n_samples; ++i) {
    auto rng = make_rng(derive_seed(config.seed, static_cast<uint64_t>(i)));

    const int64_t a = u01(rng) < config.attribute_balance ? 0 : 1;  // balance = P(sex F)
    const int64_t age_bin = draw_discrete(rng, config.age_bin_weights);
    const int64_t age_hi = age_bin == 4 ? kAgeEdges[5] : kAgeEdges[age_bin + 1] - 1;
    const int64_t age = uniform_int(rng, kAgeEdges[age_bin], age_hi);

    const auto target = render_target(rng, config);
    const auto& mask = target.mask;

    const double background = uniform(rng, kBgLo, kBgHi);
    const double contrast = uniform(rng, kContrastLo, kContrastHi);
    double drawn_contrast = contrast;
    double sigma = kBaseNoise;
    if (a == 1) {
      drawn_contrast *= std::max(0.0, 1.0 - config.difficulty_gap);
      sigma += kGapNoise * config.difficulty_gap;
    }

    std::vector<float> img(n_px);
    for (int64_t p = 0; p < n_px; ++p) {
      img[p] = static_cast<float>(background + drawn_contrast * mask[p]);
    }
    if (a == 1 && config.difficulty_gap > 0.0) {
      const double amplitude = kArtifactAmp * config.difficulty_gap * contrast;
      const int64_t artifacts = 1 + (u01(rng) < 0.5 ? 1 : 0);
      for (int64_t b = 0; b < artifacts; ++b) {
        add_artifact(rng, config, target, amplitude, img);
      }
    }
    for (int64_t p = 0; p < n_px; ++p) {
      img[p] += static_cast<float>(sigma * normal(rng));
    }

    char id_buf[16];
    std::snprintf(id_buf, sizeof(id_buf), "s%05d", static_cast<int>(i));
    const std::string id(id_buf);

    auto img_t =
        torch::from_blob(img.data(), {1, res, res}, torch::kFloat32).clamp(0.0, 1.0).clone();
    auto mask_t = torch::from_blob(const_cast<uint8_t*>(mask.data()), {res, res}, torch::kUInt8)
                      .to(torch::kInt64);
    write_image_png(out_root / "images" / (id + ".png"), img_t);
    write_mask_png(out_root / "masks" / (id + ".png"), mask_t);
    csv += id + "," + (a == 1 ? "M" : "F") + "," + std::to_string(age) + "\n";
  }

  {
    std::ofstream out(out_root / "metadata.csv", std::ios::binary);
    if (!out) {
      throw IoError("cannot write metadata.csv under " + out_root.string());
    }
    out << csv;
  }

  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["n_samples"] = config.n_samples;
  manifest["resolution"] = config.resolution;
  manifest["attribute_balance"] = config.attribute_balance;
  manifest["difficulty_gap"] = config.difficulty_gap;
  manifest["shape_family"] = to_string(config.shape_family);
  manifest["seed"] = config.seed;
  manifest["age_bin_weights"] = config.age_bin_weights;
  manifest["class_count"] = 2;
  {
    std::ofstream out(out_root / "synth_manifest.json", std::ios::binary);
    if (!out) {
      throw IoError("cannot write synth_manifest.json under " + out_root.string());
    }
    out << manifest.dump(2) << "\n";
  }

  data::LoadOptions opts;
  opts.resolution = config.resolution;
  opts.class_count = 2;
  return data::load_dataset(out_root, data::AttributeSpec::sex(), opts);
}

}  // namespace fairseg::synth
