#pragma once
// Independent reference computations shared by the unit and acceptance tests.

#include <cmath>
#include <vector>

#include <torch/torch.h>

#include "dmtnet/trainer.hpp"

namespace dmtnet::testing {

using Grid = std::vector<std::vector<double>>;

/// Window-by-window SSIM of one channel (11x11 Gaussian, sigma 1.5,
/// K1=0.01, K2=0.03, range 1), averaged over every full window.
inline double ssim_oracle_channel(const Grid& x, const Grid& y) {
  const int win = 11;
  const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double g[11][11];
  double gsum = 0;
  for (int i = 0; i < win; ++i) {
    for (int j = 0; j < win; ++j) {
      const double di = i - 5, dj = j - 5;
      g[i][j] = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
      gsum += g[i][j];
    }
  }
  const int h = static_cast<int>(x.size()), w = static_cast<int>(x[0].size());
  double total = 0;
  int windows = 0;
  for (int top = 0; top + win <= h; ++top) {
    for (int left = 0; left + win <= w; ++left) {
      double mx = 0, my = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          mx += g[i][j] / gsum * x[top + i][left + j];
          my += g[i][j] / gsum * y[top + i][left + j];
        }
      double vx = 0, vy = 0, cxy = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          const double wgt = g[i][j] / gsum;
          const double dx = x[top + i][left + j] - mx, dy = y[top + i][left + j] - my;
          vx += wgt * dx * dx;
          vy += wgt * dy * dy;
          cxy += wgt * dx * dy;
        }
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++windows;
    }
  }
  return total / windows;
}

/// Fixed 16x16 test array: a ramp plus hashed texture, different per seed.
inline Grid fixed_array16(int seed) {
  Grid a(16, std::vector<double>(16));
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) {
      const unsigned v = static_cast<unsigned>((i * 73 + j * 151 + seed * 97) * 2654435761u);
      a[i][j] = 0.6 * (i + j) / 30.0 + 0.4 * ((v >> 8) % 1000) / 999.0;
    }
  return a;
}

inline torch::Tensor grid_tensor(const Grid& a) {
  auto t = torch::zeros({1, static_cast<int64_t>(a.size()), static_cast<int64_t>(a[0].size())}, torch::kDouble);
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < a[i].size(); ++j) t[0][static_cast<int64_t>(i)][static_cast<int64_t>(j)] = a[i][j];
  return t;
}

struct ToyImpl : torch::nn::Module {
  explicit ToyImpl(std::vector<double> init) { w = register_parameter("w", torch::tensor(init, torch::kDouble)); }
  torch::Tensor w;
};
TORCH_MODULE(Toy);

/// Runs `steps` SGD steps on a two-parameter toy student with an EMA
/// teacher and returns max |teacher - closed form|, where the closed form is
/// d^N*theta_T(0) + (1-d) * sum_k d^(N-k) * theta_S(k).
inline double ema_closed_form_error(int steps, double decay) {
  Toy student(std::vector<double>{0.7, -1.3}), teacher(std::vector<double>{0.7, -1.3});
  torch::optim::SGD sgd(student->parameters(), 0.05);
  const auto theta0 = teacher->w.detach().clone();
  std::vector<torch::Tensor> trajectory;
  for (int k = 1; k <= steps; ++k) {
    auto loss = (student->w - torch::tensor({2.0, 0.5}, torch::kDouble)).pow(2).sum() + student->w.prod().sin();
    sgd.zero_grad();
    loss.backward();
    sgd.step();
    trajectory.push_back(student->w.detach().clone());
    train::ema_update(*teacher, *student, decay);
  }
  auto expected = std::pow(decay, steps) * theta0;
  for (int k = 1; k <= steps; ++k) {
    expected = expected + (1 - decay) * std::pow(decay, steps - k) * trajectory[static_cast<size_t>(k - 1)];
  }
  return (teacher->w - expected).abs().max().item<double>();
}

}  // namespace dmtnet::testing
