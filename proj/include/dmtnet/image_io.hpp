#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

// PNG/JPEG <-> float tensor conversion. Tensors are [C,H,W] float32 in [0,1],
// RGB channel order.
namespace dmtnet::io {

class ImageReadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads an 8- or 16-bit image and maps it linearly to [0,1].
/// `channels` is 3 (RGB) or 1 (gray).
torch::Tensor read_image(const std::filesystem::path& path, int channels = 3);

/// Writes an 8-bit PNG; values are clipped to [0,1] first.
void write_image(const std::filesystem::path& path, const torch::Tensor& image);

/// Single-channel 16-bit PNG, values in [0,1] mapped to [0,65535].
void write_plane16(const std::filesystem::path& path, const torch::Tensor& plane);
torch::Tensor read_plane16(const std::filesystem::path& path);

/// Depth map as [1,H,W]. 16-bit PNGs are normalized depth scaled by
/// `png_range`; 32-bit float TIFFs are taken as raw depth.
torch::Tensor read_depth(const std::filesystem::path& path, double png_range = 1.0);

/// Files with an image extension (png, jpg, jpeg, bmp, tif, tiff) in `dir`,
/// non-recursive, sorted by filename.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

/// Horizontal concatenation of equally tall [3,H,W] images.
torch::Tensor side_by_side(const std::vector<torch::Tensor>& images);

}  // namespace dmtnet::io
