#include "dmtnet/image_io.hpp"

#include <algorithm>
#include <cctype>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace dmtnet::io {
namespace fs = std::filesystem;
namespace {

torch::Tensor mat_to_tensor(const cv::Mat& mat_float) {
  // mat_float: CV_32FC(c), HWC
  cv::Mat contiguous = mat_float.isContinuous() ? mat_float : mat_float.clone();
  const auto h = contiguous.rows, w = contiguous.cols, c = contiguous.channels();
  auto t = torch::from_blob(contiguous.data, {h, w, c}, torch::kFloat32).clone();
  return t.permute({2, 0, 1}).contiguous();
}

cv::Mat tensor_to_mat(const torch::Tensor& image, int cv_depth, double scale) {
  auto t = image.detach().to(torch::kCPU, torch::kFloat32);
  if (t.dim() != 3) {
    throw std::invalid_argument("image tensor must be [C,H,W]");
  }
  const auto c = t.size(0);
  if (c != 1 && c != 3) {
    throw std::invalid_argument("image tensor must have 1 or 3 channels");
  }
  t = t.clamp(0.0, 1.0).mul(scale).round().permute({1, 2, 0}).contiguous();
  cv::Mat f(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), CV_32FC(static_cast<int>(c)),
            t.data_ptr<float>());
  cv::Mat out;
  f.convertTo(out, CV_MAKETYPE(cv_depth, static_cast<int>(c)));
  if (c == 3) {
    cv::cvtColor(out, out, cv::COLOR_RGB2BGR);
  }
  return out;
}

void write_mat(const fs::path& path, const cv::Mat& mat) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  if (!cv::imwrite(path.string(), mat)) {
    throw std::runtime_error("failed to write image " + path.string());
  }
}

}  // namespace

torch::Tensor read_image(const fs::path& path, int channels) {
  if (channels != 1 && channels != 3) {
    throw std::invalid_argument("read_image: channels must be 1 or 3");
  }
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) {
    throw ImageReadError("cannot decode image " + path.string());
  }
  double scale = 1.0;
  switch (raw.depth()) {
    case CV_8U: scale = 1.0 / 255.0; break;
    case CV_16U: scale = 1.0 / 65535.0; break;
    case CV_32F: scale = 1.0; break;
    default: throw ImageReadError("unsupported pixel depth in " + path.string());
  }
  cv::Mat color;
  const int src = raw.channels();
  if (channels == 3) {
    if (src == 1) cv::cvtColor(raw, color, cv::COLOR_GRAY2RGB);
    else if (src == 3) cv::cvtColor(raw, color, cv::COLOR_BGR2RGB);
    else if (src == 4) cv::cvtColor(raw, color, cv::COLOR_BGRA2RGB);
    else throw ImageReadError("unsupported channel count in " + path.string());
  } else {
    if (src == 1) color = raw;
    else if (src == 3) cv::cvtColor(raw, color, cv::COLOR_BGR2GRAY);
    else if (src == 4) cv::cvtColor(raw, color, cv::COLOR_BGRA2GRAY);
    else throw ImageReadError("unsupported channel count in " + path.string());
  }
  cv::Mat f;
  color.convertTo(f, CV_32FC(channels), scale);
  return mat_to_tensor(f);
}

void write_image(const fs::path& path, const torch::Tensor& image) {
  write_mat(path, tensor_to_mat(image, CV_8U, 255.0));
}

void write_plane16(const fs::path& path, const torch::Tensor& plane) {
  if (plane.dim() != 3 || plane.size(0) != 1) {
    throw std::invalid_argument("write_plane16: expected [1,H,W]");
  }
  write_mat(path, tensor_to_mat(plane, CV_16U, 65535.0));
}

torch::Tensor read_plane16(const fs::path& path) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_ANYDEPTH | cv::IMREAD_GRAYSCALE);
  if (raw.empty()) {
    throw ImageReadError("cannot decode plane " + path.string());
  }
  if (raw.depth() != CV_16U) {
    throw ImageReadError("expected 16-bit single-channel PNG: " + path.string());
  }
  cv::Mat f;
  raw.convertTo(f, CV_32FC1, 1.0 / 65535.0);
  return mat_to_tensor(f);
}

torch::Tensor read_depth(const fs::path& path, double png_range) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_ANYDEPTH | cv::IMREAD_GRAYSCALE);
  if (raw.empty()) {
    throw ImageReadError("cannot decode depth map " + path.string());
  }
  cv::Mat f;
  switch (raw.depth()) {
    case CV_16U: raw.convertTo(f, CV_32FC1, png_range / 65535.0); break;
    case CV_8U: raw.convertTo(f, CV_32FC1, png_range / 255.0); break;
    case CV_32F: f = raw; break;
    default: throw ImageReadError("unsupported depth map format " + path.string());
  }
  return mat_to_tensor(f);
}

std::vector<fs::path> list_images(const fs::path& dir) {
  static const std::vector<std::string> exts{".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"};
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (std::find(exts.begin(), exts.end(), ext) != exts.end()) {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

torch::Tensor side_by_side(const std::vector<torch::Tensor>& images) {
  if (images.empty()) {
    throw std::invalid_argument("side_by_side: no images");
  }
  std::vector<torch::Tensor> rgb;
  for (const auto& im : images) {
    rgb.push_back(im.size(0) == 1 ? im.expand({3, im.size(1), im.size(2)}) : im);
  }
  return torch::cat(rgb, 2);
}

}  // namespace dmtnet::io
