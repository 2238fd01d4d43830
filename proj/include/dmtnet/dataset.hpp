#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include <torch/torch.h>

#include "dmtnet/haze_physics.hpp"

namespace dmtnet::data {

using Rng = std::mt19937_64;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A clean image with an optional depth map ([3,H,W] and [1,H,W]).
struct CleanSource {
  std::string id;
  torch::Tensor clean;
  std::optional<torch::Tensor> depth;
};

/// Synthesized hazy image together with the planes that produced it.
/// Invariant: compose_hazy(clean, transmission, atmosphere) == hazy.
struct LabeledSample {
  std::string id;
  std::string clean_id;
  torch::Tensor hazy;          // [3,H,W]
  torch::Tensor clean;         // [3,H,W]
  torch::Tensor transmission;  // [1,H,W]
  torch::Tensor atmosphere;    // [3,H,W]
  physics::ScatteringParams params;
};

struct UnlabeledSample {
  std::string id;
  torch::Tensor hazy;  // [3,H,W]
};

struct MixedBatch {
  std::vector<LabeledSample> labeled;
  std::vector<UnlabeledSample> unlabeled;
  int64_t crop_size = 0;
};

/// Batched views of a list of labeled samples, each [N,C,H,W].
struct LabeledTensors {
  torch::Tensor hazy, clean, transmission, atmosphere;
};

struct SynthesisOptions {
  int settings_per_image = 4;
  std::uint64_t seed = 0;
  bool per_channel_atmosphere = false;
  double atmosphere_min = 0.5;
  double atmosphere_max = 1.0;
  double beta_min = 0.5;
  double beta_max = 2.0;
};

/// Samples `settings_per_image` (A, beta) pairs per clean image and renders
/// the hazy images. Each clean image draws from its own stream seeded by
/// (seed, index), so output does not depend on processing order.
std::vector<LabeledSample> synthesize_dataset(std::span<const CleanSource> clean_images,
                                              const SynthesisOptions& options);

/// Crop window and flip decision are drawn once and shared by every plane.
LabeledSample random_crop_and_flip(const LabeledSample& sample, int64_t size, Rng& rng);
UnlabeledSample random_crop_and_flip(const UnlabeledSample& sample, int64_t size, Rng& rng);

/// Same as above with an explicit window; exposed for tests.
LabeledSample crop_and_flip(const LabeledSample& sample, int64_t top, int64_t left, int64_t size, bool flip);

MixedBatch make_mixed_batch(std::span<const LabeledSample> labeled_pool,
                            std::span<const UnlabeledSample> unlabeled_pool, int batch_size,
                            int64_t crop_size, Rng& rng);

/// Labeled-only batch of `count` crops, used by variants trained without
/// unlabeled data.
MixedBatch make_labeled_batch(std::span<const LabeledSample> labeled_pool, int count, int64_t crop_size,
                              Rng& rng);

LabeledTensors stack_labeled(std::span<const LabeledSample> samples);
torch::Tensor stack_unlabeled(std::span<const UnlabeledSample> samples);

/// Additive zero-mean Gaussian noise with std `sigma`, clipped to [0,1].
torch::Tensor perturb_with_noise(const torch::Tensor& image, double sigma, Rng& rng);

/// Procedural clean scene: smooth colored background with random shapes
/// and stripe textures. [3,H,W] in [0,1].
torch::Tensor procedural_clean_image(int64_t height, int64_t width, Rng& rng);

/// `count` procedural sources with ids clean_0000, clean_0001, ...
std::vector<CleanSource> procedural_sources(int count, int64_t height, int64_t width, std::uint64_t seed);

/// Clean images from a directory, paired by file stem with depth maps from
/// `depth_dir` when one exists there.
std::vector<CleanSource> load_clean_sources(const std::filesystem::path& clean_dir,
                                            const std::optional<std::filesystem::path>& depth_dir,
                                            double depth_png_range = 1.0);

/// Flat directory of PNG/JPEG files. Unreadable files are skipped with a
/// warning on stderr.
std::vector<UnlabeledSample> load_unlabeled_dir(const std::filesystem::path& dir);

/// Partition by clean image: the first `test_clean_count` clean ids of a
/// seeded shuffle go to the test split.
struct Split {
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> test;
};
Split split_by_clean_image(std::span<const LabeledSample> samples, int test_clean_count, std::uint64_t seed);

// Manifest: JSON index of a synthesized dataset. Paths are relative to the
// manifest file. Schema "dmtnet.manifest", version 1.
inline constexpr int kManifestVersion = 1;

struct ManifestWriteOptions {
  std::uint64_t seed = 0;
  int settings_per_image = 4;
  bool per_channel_atmosphere = false;
};

/// Writes clean/, hazy/, transmission/ image folders and manifest.json under
/// `out_dir`. Returns the manifest path.
std::filesystem::path write_dataset(const std::filesystem::path& out_dir, const Split& split,
                                    const ManifestWriteOptions& options);

nlohmann::json manifest_json(const Split& split, const ManifestWriteOptions& options);

struct ManifestLoadOptions {
  std::optional<std::string> split;  // "train" | "test"; all when empty
  bool use_stored_hazy = false;      // default recomposes hazy from the stored planes
  /// Keep samples whose clean or transmission file is missing (clean left
  /// undefined, hazy read from disk) instead of failing.
  bool allow_missing_ground_truth = false;
};

std::vector<LabeledSample> load_manifest(const std::filesystem::path& manifest_path,
                                         const ManifestLoadOptions& options = {});

}  // namespace dmtnet::data
