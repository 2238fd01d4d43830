#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

// Disentangled dehazing network: shared multi-scale encoder, per-factor
// (clean image J, transmission T, atmosphere A) feature projections, RCAB
// merge chains producing coarse maps, residual U-Net refiners, and
// reconstruction of the hazy input from each stage's predictions.
namespace dmtnet::net {

inline constexpr int kScales = 5;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class EncoderKind { small, resnext };
enum class OutputActivation { sigmoid, none };

struct NetworkConfig {
  EncoderKind encoder_kind = EncoderKind::small;
  std::array<int64_t, kScales> encoder_channels{32, 48, 64, 96, 128};
  int64_t resnext_cardinality = 8;
  /// Width of disentangled features and of every merged feature map.
  int64_t feature_channels = 32;
  int rcabs_jt = 20;
  int rcabs_a = 2;
  int64_t rca_reduction = 16;
  /// Number of convolution layers in each refiner U-Net (odd, >= 3).
  int unet_depth = 5;
  int64_t unet_channels = 16;
  OutputActivation output_activation = OutputActivation::sigmoid;
  /// Zero the last refiner convolution so refined == coarse at init.
  bool zero_init_refiner_output = true;
  /// Disentangler 1x1 projections carry no bias term.
  bool bias_free_disentangler = true;

  // Ablation switches. disentangle=false keeps only the J chain, fed directly
  // by the encoder features; refine=false makes refined maps equal coarse ones.
  bool disentangle = true;
  bool refine = true;

  void validate() const;
};

nlohmann::json to_json(const NetworkConfig& config);
NetworkConfig network_config_from_json(const nlohmann::json& j);

struct EncoderFeatures {
  std::vector<torch::Tensor> ef;  // EF1..EF5, strides 2..32
};

struct DisentangledFeatures {
  std::vector<torch::Tensor> dfj, dft, dfa;
};

struct CoarsePredictions {
  torch::Tensor p_j, p_t, p_a;
  /// Merged features per chain, ordered H4, H3, H2, H1.
  std::vector<torch::Tensor> merges_j, merges_t, merges_a;
};

struct DidNetOutput {
  CoarsePredictions coarse;
  torch::Tensor refined_j, refined_t, refined_a;
  torch::Tensor recon_coarse, recon_refined;

  /// False for the J-only ablation, which predicts no T/A maps.
  bool has_physics() const { return coarse.p_t.defined(); }
};

/// Residual channel attention block:
/// x + CA(conv(relu(conv(x)))), CA = sigmoid gate from pooled channel stats.
class RCABImpl : public torch::nn::Module {
 public:
  RCABImpl(int64_t channels, int64_t reduction);
  torch::Tensor forward(const torch::Tensor& x);
  /// Zeroes the second convolution so the block is the identity.
  void zero_residual();

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Conv2d squeeze_{nullptr}, excite_{nullptr};
};
TORCH_MODULE(RCAB);

/// Adjacent-scale merge: conv1x1(concat(RCABs(upsample(low)), high)).
class MergeBlockImpl : public torch::nn::Module {
 public:
  MergeBlockImpl(int64_t low_channels, int64_t high_channels, int64_t out_channels, int n_rcabs,
                 int64_t reduction);
  torch::Tensor forward(const torch::Tensor& low, const torch::Tensor& high);
  int rcab_count() const { return n_rcabs_; }
  RCAB rcab(int i) const { return RCAB(rcabs_->ptr<RCABImpl>(static_cast<size_t>(i))); }

 private:
  int n_rcabs_;
  torch::nn::ModuleList rcabs_;
  torch::nn::Conv2d project_{nullptr};
};
TORCH_MODULE(MergeBlock);

/// Functional form of a merge; rejects `low` that is not spatially smaller.
torch::Tensor merge_adjacent(MergeBlock& block, const torch::Tensor& low, const torch::Tensor& high);

class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const NetworkConfig& config);
  std::vector<torch::Tensor> forward(const torch::Tensor& image);

 private:
  torch::nn::ModuleList stages_;
};
TORCH_MODULE(Encoder);

/// Per-scale 1x1 projections of one branch.
class DisentanglerImpl : public torch::nn::Module {
 public:
  DisentanglerImpl(const std::array<int64_t, kScales>& in_channels, int64_t out_channels, bool bias);
  std::vector<torch::Tensor> forward(const std::vector<torch::Tensor>& features);

 private:
  torch::nn::ModuleList projections_;
};
TORCH_MODULE(Disentangler);

/// Coarse decoding chain: merges scale 5 up to scale 1, then upsamples to
/// the input size and applies a 1x1 prediction head.
class DecoderChainImpl : public torch::nn::Module {
 public:
  DecoderChainImpl(const std::array<int64_t, kScales>& feature_channels, int64_t width, int n_rcabs,
                   int64_t reduction, int64_t out_channels, OutputActivation activation);
  /// Returns the prediction and the merged maps H4..H1.
  std::pair<torch::Tensor, std::vector<torch::Tensor>> forward(const std::vector<torch::Tensor>& features,
                                                               torch::IntArrayRef output_size);
  MergeBlock merge(int i) const { return MergeBlock(merges_->ptr<MergeBlockImpl>(static_cast<size_t>(i))); }

 private:
  OutputActivation activation_;
  torch::nn::ModuleList merges_;
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(DecoderChain);

/// Small U-Net with `depth` convolutions returning the residual U(P).
class RefinerUNetImpl : public torch::nn::Module {
 public:
  RefinerUNetImpl(int64_t channels, int64_t width, int depth, bool zero_init_output);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  int levels_;
  torch::nn::Conv2d in_conv_{nullptr};
  torch::nn::ModuleList down_, up_;
};
TORCH_MODULE(RefinerUNet);

class DidNetImpl : public torch::nn::Module {
 public:
  explicit DidNetImpl(NetworkConfig config);

  /// Input [N,3,H,W] with H, W >= 32. Feature sizes are ceil(H / 2^k).
  EncoderFeatures encode(const torch::Tensor& image);
  DisentangledFeatures disentangle(const EncoderFeatures& features);
  CoarsePredictions decode_coarse(const DisentangledFeatures& features, torch::IntArrayRef output_size);
  /// Returns {refined_j, refined_t, refined_a}; undefined entries stay undefined.
  std::array<torch::Tensor, 3> refine(const CoarsePredictions& coarse);
  DidNetOutput forward(const torch::Tensor& image);

  const NetworkConfig& config() const { return config_; }

  Encoder encoder{nullptr};
  Disentangler disentangle_j{nullptr}, disentangle_t{nullptr}, disentangle_a{nullptr};
  DecoderChain decoder_j{nullptr}, decoder_t{nullptr}, decoder_a{nullptr};
  RefinerUNet refiner_j{nullptr}, refiner_t{nullptr}, refiner_a{nullptr};

 private:
  torch::Tensor activate_refined(const torch::Tensor& coarse, const torch::Tensor& residual) const;
  NetworkConfig config_;
};
TORCH_MODULE(DidNet);

/// Copies every parameter and buffer of `src` into `dst` (same structure).
void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src);

/// Number of scalar parameters.
int64_t parameter_count(const torch::nn::Module& module);

/// Parameter counts keyed by top-level submodule name.
std::map<std::string, int64_t> parameter_counts_by_submodule(const torch::nn::Module& module);

/// Loads encoder weights saved with torch::save from an Encoder built with
/// the same configuration.
void load_encoder_weights(DidNetImpl& model, const std::filesystem::path& path);

}  // namespace dmtnet::net
