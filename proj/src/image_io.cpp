#include "fairseg/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "fairseg/error.hpp"

namespace fairseg {

namespace {

cv::Mat read_png(const std::filesystem::path& path, int flags) {
  cv::Mat m = cv::imread(path.string(), flags);
  if (m.empty()) {
    throw IoError("failed to read PNG at " + path.string());
  }
  return m;
}

}  // namespace

torch::Tensor read_image_png(const std::filesystem::path& path, int64_t resize_to) {
  cv::Mat m = read_png(path, cv::IMREAD_UNCHANGED);
  if (m.channels() == 4) {
    cv::cvtColor(m, m, cv::COLOR_BGRA2BGR);
  }
  double scale = 255.0;
  if (m.depth() == CV_16U) {
    scale = 65535.0;
  } else if (m.depth() != CV_8U) {
    throw IoError("unsupported PNG bit depth in " + path.string());
  }
  if (resize_to > 0 && (m.rows != resize_to || m.cols != resize_to)) {
    cv::resize(m, m, cv::Size(static_cast<int>(resize_to), static_cast<int>(resize_to)), 0, 0,
               cv::INTER_AREA);
  }
  cv::Mat f;
  m.convertTo(f, CV_32F, 1.0 / scale);
  if (f.channels() == 3) {
    cv::cvtColor(f, f, cv::COLOR_BGR2RGB);
  }
  auto t = torch::from_blob(f.data, {f.rows, f.cols, f.channels()}, torch::kFloat32).clone();
  return t.permute({2, 0, 1}).contiguous();
}

torch::Tensor read_mask_png(const std::filesystem::path& path, int64_t resize_to) {
  cv::Mat m = read_png(path, cv::IMREAD_GRAYSCALE);
  if (resize_to > 0 && (m.rows != resize_to || m.cols != resize_to)) {
    cv::resize(m, m, cv::Size(static_cast<int>(resize_to), static_cast<int>(resize_to)), 0, 0,
               cv::INTER_NEAREST);
  }
  auto t = torch::from_blob(m.data, {m.rows, m.cols}, torch::kUInt8).clone();
  return t.to(torch::kInt64);
}

void write_image_png(const std::filesystem::path& path, const torch::Tensor& image) {
  TORCH_CHECK(image.dim() == 3, "image must be CxHxW");
  auto img = image.detach().to(torch::kFloat32).clamp(0.0, 1.0);
  const auto c = img.size(0);
  TORCH_CHECK(c == 1 || c == 3, "image must have 1 or 3 channels");
  auto hwc = img.permute({1, 2, 0}).contiguous();
  auto bytes = (hwc * 255.0).round().to(torch::kUInt8).contiguous();
  cv::Mat m(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)),
            c == 1 ? CV_8UC1 : CV_8UC3, bytes.data_ptr());
  cv::Mat out = m.clone();
  if (c == 3) {
    cv::cvtColor(out, out, cv::COLOR_RGB2BGR);
  }
  if (!cv::imwrite(path.string(), out)) {
    throw IoError("failed to write PNG at " + path.string());
  }
}

void write_mask_png(const std::filesystem::path& path, const torch::Tensor& mask) {
  TORCH_CHECK(mask.dim() == 2, "mask must be HxW");
  auto ids = mask.detach().to(torch::kInt64);
  TORCH_CHECK(ids.min().item<int64_t>() >= 0 && ids.max().item<int64_t>() <= 255,
              "mask ids must fit in one byte");
  auto bytes = ids.to(torch::kUInt8).contiguous();
  cv::Mat m(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)), CV_8UC1,
            bytes.data_ptr());
  if (!cv::imwrite(path.string(), m)) {
    throw IoError("failed to write PNG at " + path.string());
  }
}

}  // namespace fairseg
