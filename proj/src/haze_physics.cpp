#include "dmtnet/haze_physics.hpp"

#include <cmath>
#include <sstream>

namespace dmtnet::physics {
namespace {

std::string shape_str(const torch::Tensor& t) {
  std::ostringstream os;
  os << t.sizes();
  return os.str();
}

void check_triple(const torch::Tensor& clean, const torch::Tensor& transmission,
                  const torch::Tensor& atmosphere) {
  if (!clean.defined() || !transmission.defined() || !atmosphere.defined()) {
    throw ShapeError("haze model: undefined input tensor");
  }
  if (clean.sizes() != atmosphere.sizes()) {
    throw ShapeError("haze model: clean " + shape_str(clean) + " and atmosphere " +
                     shape_str(atmosphere) + " must have the same shape");
  }
  const auto dim = clean.dim();
  if (dim != 3 && dim != 4) {
    throw ShapeError("haze model: expected [C,H,W] or [N,C,H,W], got " + shape_str(clean));
  }
  if (transmission.dim() != dim) {
    throw ShapeError("haze model: transmission " + shape_str(transmission) +
                     " rank differs from image " + shape_str(clean));
  }
  const auto c = dim - 3;
  for (int64_t d = 0; d < dim; ++d) {
    if (d == c) {
      const auto tc = transmission.size(d);
      if (tc != 1 && tc != clean.size(d)) {
        throw ShapeError("haze model: transmission channels must be 1 or match image, got " +
                         shape_str(transmission));
      }
    } else if (transmission.size(d) != clean.size(d)) {
      throw ShapeError("haze model: transmission " + shape_str(transmission) +
                       " not broadcastable to image " + shape_str(clean));
    }
  }
}

}  // namespace

torch::Tensor compose_hazy(const torch::Tensor& clean, const torch::Tensor& transmission,
                           const torch::Tensor& atmosphere) {
  check_triple(clean, transmission, atmosphere);
  return clean * transmission + atmosphere * (1.0 - transmission);
}

torch::Tensor reconstruct_hazy(const torch::Tensor& pred_clean, const torch::Tensor& pred_transmission,
                               const torch::Tensor& pred_atmosphere) {
  return compose_hazy(pred_clean, pred_transmission, pred_atmosphere);
}

torch::Tensor recover_clean(const torch::Tensor& hazy, const torch::Tensor& transmission,
                            const torch::Tensor& atmosphere) {
  check_triple(hazy, transmission, atmosphere);
  if (transmission.le(0).any().item<bool>()) {
    throw std::domain_error("recover_clean: transmission must be strictly positive");
  }
  return (hazy - atmosphere * (1.0 - transmission)) / transmission;
}

torch::Tensor transmission_from_depth(const torch::Tensor& depth, double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta)) {
    throw std::invalid_argument("transmission_from_depth: beta must be positive and finite");
  }
  if (!depth.isfinite().all().item<bool>()) {
    throw std::invalid_argument("transmission_from_depth: depth contains non-finite values");
  }
  if (depth.lt(0).any().item<bool>()) {
    throw std::invalid_argument("transmission_from_depth: negative depth");
  }
  return torch::exp(-beta * depth);
}

torch::Tensor atmosphere_plane(const std::array<double, 3>& light, int64_t height, int64_t width,
                               int64_t channels) {
  if (channels != 1 && channels != 3) {
    throw ShapeError("atmosphere_plane: channels must be 1 or 3");
  }
  auto plane = torch::empty({channels, height, width}, torch::kFloat32);
  for (int64_t c = 0; c < channels; ++c) {
    plane[c].fill_(light[static_cast<size_t>(c)]);
  }
  return plane;
}

torch::Tensor clip_unit(const torch::Tensor& image) { return image.clamp(0.0, 1.0); }

torch::Tensor synthetic_depth(int64_t height, int64_t width, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double angle = unit(rng) * 2.0 * M_PI;
  const double ramp_weight = 0.5 + 0.5 * unit(rng);

  auto ys = torch::linspace(0.0, 1.0, height, torch::kFloat64).view({height, 1});
  auto xs = torch::linspace(0.0, 1.0, width, torch::kFloat64).view({1, width});
  auto depth = (std::cos(angle) * xs + std::sin(angle) * ys) * ramp_weight;

  const int bumps = 3;
  for (int b = 0; b < bumps; ++b) {
    const double cy = unit(rng), cx = unit(rng);
    const double radius = 0.15 + 0.35 * unit(rng);
    const double amp = (unit(rng) - 0.5) * 0.8;
    auto d2 = (ys - cy).pow(2) + (xs - cx).pow(2);
    depth = depth + amp * torch::exp(-d2 / (2.0 * radius * radius));
  }
  const auto lo = depth.min(), hi = depth.max();
  depth = (depth - lo) / (hi - lo).clamp_min(1e-12);
  return depth.to(torch::kFloat32).unsqueeze(0);
}

}  // namespace dmtnet::physics
