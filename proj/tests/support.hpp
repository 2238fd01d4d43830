#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include <torch/torch.h>

#include "dmtnet/dataset.hpp"
#include "dmtnet/network.hpp"

namespace dmtnet::testing {

/// Removes itself on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("dmtnet_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kDouble) - b.to(torch::kDouble)).abs().max().item<double>();
}

inline bool bit_equal(const torch::Tensor& a, const torch::Tensor& b) {
  return a.sizes() == b.sizes() && a.dtype() == b.dtype() && torch::equal(a, b);
}

/// Tiny network used wherever the architecture, not its capacity, matters.
inline net::NetworkConfig tiny_network() {
  net::NetworkConfig c;
  c.encoder_channels = {8, 8, 12, 12, 16};
  c.feature_channels = 8;
  c.rcabs_jt = 2;
  c.rcabs_a = 1;
  c.rca_reduction = 4;
  c.unet_channels = 4;
  return c;
}

inline std::vector<data::LabeledSample> small_labeled_set(int clean_count, int64_t side, std::uint64_t seed,
                                                          int per_image = 4) {
  const auto sources = data::procedural_sources(clean_count, side, side, seed);
  data::SynthesisOptions opts;
  opts.seed = seed;
  opts.settings_per_image = per_image;
  return data::synthesize_dataset(sources, opts);
}

}  // namespace dmtnet::testing
