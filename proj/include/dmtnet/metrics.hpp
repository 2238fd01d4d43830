#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "dmtnet/dataset.hpp"

namespace dmtnet::metrics {

/// 10*log10(1/MSE) for images in [0,1]; +inf when the images are equal.
/// With `quantize`, both images are rounded to 8-bit levels first.
double psnr(const torch::Tensor& a, const torch::Tensor& b, bool quantize = false);

// Gaussian-window SSIM, averaged over all full windows and then over channels.
struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

double ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& options = {});

struct SampleScore {
  std::string id;
  double psnr = 0;
  double ssim = 0;
  bool scored = true;
  std::string note;
};

struct EvalReport {
  std::vector<SampleScore> samples;
  double mean_psnr = 0;
  double mean_ssim = 0;
  int64_t scored = 0;
  int64_t flagged = 0;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json() const;
  std::string to_csv() const;
  /// Writes report.json and report.csv into `dir`.
  void write(const std::filesystem::path& dir) const;
};

/// Prediction for one sample (a [3,H,W] image).
using Predictor = std::function<torch::Tensor(const data::LabeledSample&)>;

/// Scores predictions against each sample's clean image. Samples without a
/// clean image are flagged and left out of the means.
EvalReport evaluate_samples(std::span<const data::LabeledSample> samples, const Predictor& predict,
                            bool quantize = false);

struct EvalOptions {
  std::optional<std::string> split = std::string("test");
  bool baseline_noop = false;  // score the hazy input itself
  bool quantize = false;
};

/// Runs the checkpoint's student over a manifest and scores it. With
/// baseline_noop the checkpoint is not needed and may be empty.
EvalReport evaluate_dataset(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
                            const EvalOptions& options = {});

}  // namespace dmtnet::metrics
