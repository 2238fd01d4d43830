#pragma once

#include <cstdint>
#include <string_view>

#include <torch/torch.h>

#include "json.hpp"
#include "dmtnet/network.hpp"

namespace dmtnet::loss {

/// Weights of the supervised (alpha1..3) and consistency (alpha4..6) terms
/// and the ceiling of the consistency ramp-up.
struct LossWeights {
  double alpha1 = 0.3;
  double alpha2 = 0.1;
  double alpha3 = 0.1;
  double alpha4 = 0.3;
  double alpha5 = 0.1;
  double alpha6 = 0.1;
  double mu_max = 1.0;

  void validate() const;

  /// Named presets: "default" (0.3/0.1/0.1), "M1".."M4" and "table-ours"
  /// from the hyper-parameter study. Consistency weights mirror supervised.
  static LossWeights preset(std::string_view name);
};

nlohmann::json to_json(const LossWeights& w);
LossWeights loss_weights_from_json(const nlohmann::json& j);

/// Scalars of one training step. Component terms (l_*, c_*, dst) are means
/// over the samples of the respective half of the batch; the *_total fields
/// are sums over samples.
struct LossBreakdown {
  double l_j = 0, l_t = 0, l_a = 0, l_rec = 0;
  double c_j = 0, c_t = 0, c_a = 0, c_rec = 0;
  double dst = 0;
  double supervised_total = 0;
  double consistency_total = 0;
  double mu = 0;
  double grand_total = 0;
  int64_t n_labeled = 0;
  int64_t n_unlabeled = 0;

  nlohmann::json to_json() const;
  bool all_finite() const;
};

/// Mean absolute difference.
torch::Tensor l1(const torch::Tensor& a, const torch::Tensor& b);

/// |I - P_I| + |I - P^_I|.
torch::Tensor reconstruction_loss(const torch::Tensor& hazy, const torch::Tensor& recon_coarse,
                                  const torch::Tensor& recon_refined);

struct GroundTruth {
  torch::Tensor clean, transmission, atmosphere;
};

struct SupervisedTerms {
  torch::Tensor l_j, l_t, l_a, dst;
};

/// Per-factor L1 on coarse and refined maps plus the weighted sum
/// dst = l_j + alpha1*l_t + alpha2*l_a. For the J-only ablation (no T/A
/// outputs) l_t and l_a are zero.
SupervisedTerms supervised_disentangled(const net::DidNetOutput& output, const GroundTruth& gt,
                                        const LossWeights& w);

/// dst + alpha3 * rec.
torch::Tensor supervised_total(const torch::Tensor& dst, const torch::Tensor& rec, const LossWeights& w);

struct ConsistencyTerms {
  torch::Tensor c_j, c_t, c_a, c_rec, total;
};

/// Student/teacher agreement on all eight maps. Teacher outputs are detached.
ConsistencyTerms consistency_loss(const net::DidNetOutput& student, const net::DidNetOutput& teacher,
                                  const LossWeights& w);

/// mu_max * exp(-5 (1 - t/t_max)^2).
double rampup_weight(int64_t t, int64_t t_max, double mu_max);

/// sum of supervised losses + mu * sum of consistency losses.
torch::Tensor total_loss(const torch::Tensor& supervised, const torch::Tensor& consistency, double mu);

}  // namespace dmtnet::loss
