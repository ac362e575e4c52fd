#pragma once

#include <torch/torch.h>

#include <filesystem>

namespace fairseg {

// PNG -> float32 CxHxW scaled to [0,1] by the container max (255 or 65535).
// Grayscale files give C=1, color files C=3 (RGB order). resize_to > 0
// resizes to a square of that side (area interpolation).
torch::Tensor read_image_png(const std::filesystem::path& path, int64_t resize_to = 0);

// PNG whose pixel values are class ids -> int64 HxW. Nearest-neighbor resize.
torch::Tensor read_mask_png(const std::filesystem::path& path, int64_t resize_to = 0);

// Quantizes [0,1] CxHxW (C=1 or 3) to 8-bit and writes a PNG.
void write_image_png(const std::filesystem::path& path, const torch::Tensor& image);

// Writes integer HxW class ids as an 8-bit PNG (ids must fit in a byte).
void write_mask_png(const std::filesystem::path& path, const torch::Tensor& mask);

}  // namespace fairseg
