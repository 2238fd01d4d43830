#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <stdexcept>

#include <torch/torch.h>

// Atmospheric scattering model I = J*T + A*(1-T).
//
// Image tensors are channel-first, either a single plane [C,H,W] or a batch
// [N,C,H,W]. Transmission maps carry one channel and broadcast over color.
namespace dmtnet::physics {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Atmospheric light (one value per color channel) and scattering coefficient.
struct ScatteringParams {
  std::array<double, 3> atmospheric_light{1.0, 1.0, 1.0};
  double beta = 1.0;
};

/// Hazy image from a clean image, transmission map and atmosphere map.
/// No clipping is applied: with J, T, A in [0,1] the result is a convex
/// combination and already lies in [0,1]. Differentiable in all inputs.
torch::Tensor compose_hazy(const torch::Tensor& clean, const torch::Tensor& transmission,
                           const torch::Tensor& atmosphere);

/// Hazy image rebuilt from one stage of network predictions. Same function
/// as compose_hazy; kept as a separate name for call-site clarity.
torch::Tensor reconstruct_hazy(const torch::Tensor& pred_clean, const torch::Tensor& pred_transmission,
                               const torch::Tensor& pred_atmosphere);

/// Solves the scattering model for J. Requires T > 0 everywhere.
torch::Tensor recover_clean(const torch::Tensor& hazy, const torch::Tensor& transmission,
                            const torch::Tensor& atmosphere);

/// T = exp(-beta * depth). Depth must be finite and non-negative, beta > 0.
torch::Tensor transmission_from_depth(const torch::Tensor& depth, double beta);

/// Constant [C,H,W] atmosphere map from per-channel light values.
torch::Tensor atmosphere_plane(const std::array<double, 3>& light, int64_t height, int64_t width,
                               int64_t channels = 3);

/// Clamp to [0,1]; applied only when exporting images.
torch::Tensor clip_unit(const torch::Tensor& image);

/// Smooth pseudo-depth in [0,1] for clean images that come without depth:
/// a random linear ramp blended with a few broad Gaussian bumps. Returns [1,H,W].
torch::Tensor synthetic_depth(int64_t height, int64_t width, std::mt19937_64& rng);

}  // namespace dmtnet::physics
