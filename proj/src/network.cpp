#include "dmtnet/network.hpp"

#include <sstream>

#include "dmtnet/haze_physics.hpp"

namespace dmtnet::net {
namespace F = torch::nn::functional;
using nlohmann::json;

namespace {

torch::nn::Conv2d conv(int64_t in, int64_t out, int64_t kernel, int64_t stride = 1, bool bias = true,
                       int64_t groups = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel)
                               .stride(stride)
                               .padding(kernel / 2)
                               .bias(bias)
                               .groups(groups));
}

torch::Tensor resize_to(const torch::Tensor& x, torch::IntArrayRef size) {
  if (x.size(-2) == size[0] && x.size(-1) == size[1]) {
    return x;
  }
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{size[0], size[1]})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

torch::Tensor apply_activation(const torch::Tensor& x, OutputActivation activation) {
  return activation == OutputActivation::sigmoid ? torch::sigmoid(x) : x;
}

std::string encoder_name(EncoderKind k) { return k == EncoderKind::small ? "small" : "resnext"; }
std::string activation_name(OutputActivation a) { return a == OutputActivation::sigmoid ? "sigmoid" : "none"; }

class ResNeXtBlockImpl : public torch::nn::Module {
 public:
  ResNeXtBlockImpl(int64_t in, int64_t out, int64_t stride, int64_t cardinality) {
    int64_t mid = std::max<int64_t>(cardinality, out / 2);
    mid = (mid + cardinality - 1) / cardinality * cardinality;
    reduce_ = register_module("reduce", conv(in, mid, 1));
    grouped_ = register_module("grouped", conv(mid, mid, 3, stride, true, cardinality));
    expand_ = register_module("expand", conv(mid, out, 1));
    if (stride != 1 || in != out) {
      shortcut_ = register_module("shortcut", conv(in, out, 1, stride));
    }
  }
  torch::Tensor forward(const torch::Tensor& x) {
    auto y = expand_(torch::relu(grouped_(torch::relu(reduce_(x)))));
    auto skip = shortcut_ ? shortcut_(x) : x;
    return torch::relu(y + skip);
  }

 private:
  torch::nn::Conv2d reduce_{nullptr}, grouped_{nullptr}, expand_{nullptr}, shortcut_{nullptr};
};
TORCH_MODULE(ResNeXtBlock);

}  // namespace

void NetworkConfig::validate() const {
  for (auto c : encoder_channels) {
    if (c <= 0) throw ConfigError("encoder_channels must be positive");
  }
  if (resnext_cardinality < 1) throw ConfigError("resnext_cardinality must be >= 1");
  if (feature_channels <= 0) throw ConfigError("feature_channels must be positive");
  if (rcabs_jt < 1 || rcabs_a < 1) throw ConfigError("rcabs_jt and rcabs_a must be >= 1");
  if (rca_reduction < 1) throw ConfigError("rca_reduction must be >= 1");
  if (unet_depth < 3 || unet_depth % 2 == 0) throw ConfigError("unet_depth must be odd and >= 3");
  if (unet_channels <= 0) throw ConfigError("unet_channels must be positive");
}

json to_json(const NetworkConfig& c) {
  return {{"encoder_kind", encoder_name(c.encoder_kind)},
          {"encoder_channels", c.encoder_channels},
          {"resnext_cardinality", c.resnext_cardinality},
          {"feature_channels", c.feature_channels},
          {"rcabs_jt", c.rcabs_jt},
          {"rcabs_a", c.rcabs_a},
          {"rca_reduction", c.rca_reduction},
          {"unet_depth", c.unet_depth},
          {"unet_channels", c.unet_channels},
          {"output_activation", activation_name(c.output_activation)},
          {"zero_init_refiner_output", c.zero_init_refiner_output},
          {"bias_free_disentangler", c.bias_free_disentangler},
          {"disentangle", c.disentangle},
          {"refine", c.refine}};
}

NetworkConfig network_config_from_json(const json& j) {
  NetworkConfig c;
  if (j.contains("encoder_kind")) {
    const auto k = j.at("encoder_kind").get<std::string>();
    if (k == "small") c.encoder_kind = EncoderKind::small;
    else if (k == "resnext") c.encoder_kind = EncoderKind::resnext;
    else throw ConfigError("unknown encoder_kind '" + k + "'");
  }
  if (j.contains("output_activation")) {
    const auto a = j.at("output_activation").get<std::string>();
    if (a == "sigmoid") c.output_activation = OutputActivation::sigmoid;
    else if (a == "none") c.output_activation = OutputActivation::none;
    else throw ConfigError("unknown output_activation '" + a + "'");
  }
  c.encoder_channels = j.value("encoder_channels", c.encoder_channels);
  c.resnext_cardinality = j.value("resnext_cardinality", c.resnext_cardinality);
  c.feature_channels = j.value("feature_channels", c.feature_channels);
  c.rcabs_jt = j.value("rcabs_jt", c.rcabs_jt);
  c.rcabs_a = j.value("rcabs_a", c.rcabs_a);
  c.rca_reduction = j.value("rca_reduction", c.rca_reduction);
  c.unet_depth = j.value("unet_depth", c.unet_depth);
  c.unet_channels = j.value("unet_channels", c.unet_channels);
  c.zero_init_refiner_output = j.value("zero_init_refiner_output", c.zero_init_refiner_output);
  c.bias_free_disentangler = j.value("bias_free_disentangler", c.bias_free_disentangler);
  c.disentangle = j.value("disentangle", c.disentangle);
  c.refine = j.value("refine", c.refine);
  c.validate();
  return c;
}

// ---------------------------------------------------------------- RCAB

RCABImpl::RCABImpl(int64_t channels, int64_t reduction) {
  const auto squeezed = std::max<int64_t>(1, channels / reduction);
  conv1_ = register_module("conv1", conv(channels, channels, 3));
  conv2_ = register_module("conv2", conv(channels, channels, 3));
  squeeze_ = register_module("squeeze", conv(channels, squeezed, 1));
  excite_ = register_module("excite", conv(squeezed, channels, 1));
}

torch::Tensor RCABImpl::forward(const torch::Tensor& x) {
  auto r = conv2_(torch::relu(conv1_(x)));
  auto gate = torch::sigmoid(excite_(torch::relu(squeeze_(r.mean({2, 3}, /*keepdim=*/true)))));
  return x + r * gate;
}

void RCABImpl::zero_residual() {
  torch::NoGradGuard guard;
  conv2_->weight.zero_();
  conv2_->bias.zero_();
}

// ---------------------------------------------------------------- merge

MergeBlockImpl::MergeBlockImpl(int64_t low_channels, int64_t high_channels, int64_t out_channels, int n_rcabs,
                               int64_t reduction)
    : n_rcabs_(n_rcabs) {
  if (n_rcabs < 1) throw ConfigError("merge block needs at least one RCAB");
  rcabs_ = register_module("rcabs", torch::nn::ModuleList());
  for (int i = 0; i < n_rcabs; ++i) {
    rcabs_->push_back(RCAB(low_channels, reduction));
  }
  project_ = register_module("project", conv(low_channels + high_channels, out_channels, 1));
}

torch::Tensor MergeBlockImpl::forward(const torch::Tensor& low, const torch::Tensor& high) {
  auto x = resize_to(low, {high.size(-2), high.size(-1)});
  for (const auto& block : *rcabs_) {
    x = block->as<RCABImpl>()->forward(x);
  }
  return project_(torch::cat({x, high}, 1));
}

torch::Tensor merge_adjacent(MergeBlock& block, const torch::Tensor& low, const torch::Tensor& high) {
  const auto lh = low.size(-2), lw = low.size(-1), hh = high.size(-2), hw = high.size(-1);
  if (lh > hh || lw > hw || lh * lw >= hh * hw) {
    std::ostringstream os;
    os << "merge_adjacent: low-resolution input " << low.sizes() << " is not smaller than " << high.sizes();
    throw std::invalid_argument(os.str());
  }
  return block->forward(low, high);
}

// ---------------------------------------------------------------- encoder

EncoderImpl::EncoderImpl(const NetworkConfig& config) {
  stages_ = register_module("stages", torch::nn::ModuleList());
  int64_t in = 3;
  for (int s = 0; s < kScales; ++s) {
    const auto out = config.encoder_channels[static_cast<size_t>(s)];
    torch::nn::Sequential stage;
    if (config.encoder_kind == EncoderKind::small) {
      stage->push_back(conv(in, out, 3, 2));
      stage->push_back(torch::nn::ReLU());
      stage->push_back(conv(out, out, 3));
      stage->push_back(torch::nn::ReLU());
    } else if (s == 0) {
      stage->push_back(conv(in, out, 3, 2));
      stage->push_back(torch::nn::ReLU());
      stage->push_back(ResNeXtBlock(out, out, 1, config.resnext_cardinality));
    } else {
      stage->push_back(ResNeXtBlock(in, out, 2, config.resnext_cardinality));
    }
    stages_->push_back(stage);
    in = out;
  }
}

std::vector<torch::Tensor> EncoderImpl::forward(const torch::Tensor& image) {
  std::vector<torch::Tensor> features;
  auto x = image;
  for (const auto& stage : *stages_) {
    x = stage->as<torch::nn::SequentialImpl>()->forward(x);
    features.push_back(x);
  }
  return features;
}

// ---------------------------------------------------------------- disentangler

DisentanglerImpl::DisentanglerImpl(const std::array<int64_t, kScales>& in_channels, int64_t out_channels,
                                   bool bias) {
  projections_ = register_module("projections", torch::nn::ModuleList());
  for (auto c : in_channels) {
    projections_->push_back(conv(c, out_channels, 1, 1, bias));
  }
}

std::vector<torch::Tensor> DisentanglerImpl::forward(const std::vector<torch::Tensor>& features) {
  std::vector<torch::Tensor> out;
  for (size_t i = 0; i < features.size(); ++i) {
    out.push_back(projections_[i]->as<torch::nn::Conv2dImpl>()->forward(features[i]));
  }
  return out;
}

// ---------------------------------------------------------------- decoder

DecoderChainImpl::DecoderChainImpl(const std::array<int64_t, kScales>& feature_channels, int64_t width,
                                   int n_rcabs, int64_t reduction, int64_t out_channels,
                                   OutputActivation activation)
    : activation_(activation) {
  merges_ = register_module("merges", torch::nn::ModuleList());
  // H4 = M(F5 -> F4), H3 = M(H4 -> F3), H2 = M(H3 -> F2), H1 = M(H2 -> F1).
  int64_t low = feature_channels[kScales - 1];
  for (int s = kScales - 2; s >= 0; --s) {
    merges_->push_back(MergeBlock(low, feature_channels[static_cast<size_t>(s)], width, n_rcabs, reduction));
    low = width;
  }
  head_ = register_module("head", conv(width, out_channels, 1));
}

std::pair<torch::Tensor, std::vector<torch::Tensor>> DecoderChainImpl::forward(
    const std::vector<torch::Tensor>& features, torch::IntArrayRef output_size) {
  std::vector<torch::Tensor> merged;
  auto low = features[kScales - 1];
  size_t m = 0;
  for (int s = kScales - 2; s >= 0; --s, ++m) {
    MergeBlock holder(merges_->ptr<MergeBlockImpl>(m));
    low = merge_adjacent(holder, low, features[static_cast<size_t>(s)]);
    merged.push_back(low);
  }
  auto pred = apply_activation(head_(resize_to(low, output_size)), activation_);
  return {pred, merged};
}

// ---------------------------------------------------------------- refiner

RefinerUNetImpl::RefinerUNetImpl(int64_t channels, int64_t width, int depth, bool zero_init_output)
    : levels_((depth - 1) / 2) {
  in_conv_ = register_module("in_conv", conv(channels, width, 3));
  down_ = register_module("down", torch::nn::ModuleList());
  up_ = register_module("up", torch::nn::ModuleList());
  for (int k = 1; k <= levels_; ++k) {
    down_->push_back(conv(width << (k - 1), width << k, 3, 2));
  }
  // up_[0] is the deepest decoder stage; the last one emits the residual.
  for (int k = levels_; k >= 1; --k) {
    const auto in = (width << k) + (width << (k - 1));
    const auto out = k == 1 ? channels : (width << (k - 1));
    up_->push_back(conv(in, out, 3));
  }
  if (zero_init_output) {
    torch::NoGradGuard guard;
    auto last = up_[static_cast<size_t>(levels_ - 1)]->as<torch::nn::Conv2dImpl>();
    last->weight.zero_();
    last->bias.zero_();
  }
}

torch::Tensor RefinerUNetImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> skips{torch::relu(in_conv_(x))};
  for (const auto& d : *down_) {
    skips.push_back(torch::relu(d->as<torch::nn::Conv2dImpl>()->forward(skips.back())));
  }
  auto y = skips.back();
  for (int i = 0; i < levels_; ++i) {
    const auto& skip = skips[static_cast<size_t>(levels_ - 1 - i)];
    y = up_[static_cast<size_t>(i)]->as<torch::nn::Conv2dImpl>()->forward(
        torch::cat({resize_to(y, {skip.size(-2), skip.size(-1)}), skip}, 1));
    if (i + 1 < levels_) {
      y = torch::relu(y);
    }
  }
  return y;
}

// ---------------------------------------------------------------- DID-Net

DidNetImpl::DidNetImpl(NetworkConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  encoder = register_module("encoder", Encoder(c));
  std::array<int64_t, kScales> branch_channels;
  branch_channels.fill(c.feature_channels);
  if (c.disentangle) {
    disentangle_j = register_module("disentangle_j", Disentangler(c.encoder_channels, c.feature_channels,
                                                                  !c.bias_free_disentangler));
    disentangle_t = register_module("disentangle_t", Disentangler(c.encoder_channels, c.feature_channels,
                                                                  !c.bias_free_disentangler));
    disentangle_a = register_module("disentangle_a", Disentangler(c.encoder_channels, c.feature_channels,
                                                                  !c.bias_free_disentangler));
    decoder_j = register_module("decoder_j", DecoderChain(branch_channels, c.feature_channels, c.rcabs_jt,
                                                          c.rca_reduction, 3, c.output_activation));
    decoder_t = register_module("decoder_t", DecoderChain(branch_channels, c.feature_channels, c.rcabs_jt,
                                                          c.rca_reduction, 1, c.output_activation));
    decoder_a = register_module("decoder_a", DecoderChain(branch_channels, c.feature_channels, c.rcabs_a,
                                                          c.rca_reduction, 3, c.output_activation));
  } else {
    decoder_j = register_module("decoder_j", DecoderChain(c.encoder_channels, c.feature_channels, c.rcabs_jt,
                                                          c.rca_reduction, 3, c.output_activation));
  }
  if (c.refine) {
    refiner_j = register_module("refiner_j",
                                RefinerUNet(3, c.unet_channels, c.unet_depth, c.zero_init_refiner_output));
    if (c.disentangle) {
      refiner_t = register_module("refiner_t",
                                  RefinerUNet(1, c.unet_channels, c.unet_depth, c.zero_init_refiner_output));
      refiner_a = register_module("refiner_a",
                                  RefinerUNet(3, c.unet_channels, c.unet_depth, c.zero_init_refiner_output));
    }
  }
}

EncoderFeatures DidNetImpl::encode(const torch::Tensor& image) {
  if (image.dim() != 4 || image.size(1) != 3) {
    std::ostringstream os;
    os << "encode: expected [N,3,H,W] input, got " << image.sizes();
    throw std::invalid_argument(os.str());
  }
  const auto h = image.size(2), w = image.size(3);
  if (h < 32 || w < 32) {
    const auto ph = std::max<int64_t>(0, 32 - h), pw = std::max<int64_t>(0, 32 - w);
    throw std::invalid_argument("encode: input " + std::to_string(h) + "x" + std::to_string(w) +
                                " is smaller than 32x32; pad by " + std::to_string(ph) + " rows and " +
                                std::to_string(pw) + " columns");
  }
  return {encoder->forward(image)};
}

DisentangledFeatures DidNetImpl::disentangle(const EncoderFeatures& features) {
  if (!config_.disentangle) {
    return {features.ef, {}, {}};
  }
  return {disentangle_j->forward(features.ef), disentangle_t->forward(features.ef),
          disentangle_a->forward(features.ef)};
}

CoarsePredictions DidNetImpl::decode_coarse(const DisentangledFeatures& features, torch::IntArrayRef output_size) {
  CoarsePredictions out;
  std::tie(out.p_j, out.merges_j) = decoder_j->forward(features.dfj, output_size);
  if (config_.disentangle) {
    std::tie(out.p_t, out.merges_t) = decoder_t->forward(features.dft, output_size);
    std::tie(out.p_a, out.merges_a) = decoder_a->forward(features.dfa, output_size);
  }
  return out;
}

torch::Tensor DidNetImpl::activate_refined(const torch::Tensor& coarse, const torch::Tensor& residual) const {
  auto refined = coarse + residual;
  return config_.output_activation == OutputActivation::sigmoid ? refined.clamp(0.0, 1.0) : refined;
}

std::array<torch::Tensor, 3> DidNetImpl::refine(const CoarsePredictions& coarse) {
  if (!config_.refine) {
    return {coarse.p_j, coarse.p_t, coarse.p_a};
  }
  std::array<torch::Tensor, 3> out;
  out[0] = activate_refined(coarse.p_j, refiner_j->forward(coarse.p_j));
  if (config_.disentangle) {
    out[1] = activate_refined(coarse.p_t, refiner_t->forward(coarse.p_t));
    out[2] = activate_refined(coarse.p_a, refiner_a->forward(coarse.p_a));
  }
  return out;
}

DidNetOutput DidNetImpl::forward(const torch::Tensor& image) {
  DidNetOutput out;
  const auto features = encode(image);
  out.coarse = decode_coarse(disentangle(features), {image.size(2), image.size(3)});
  auto refined = refine(out.coarse);
  out.refined_j = refined[0];
  out.refined_t = refined[1];
  out.refined_a = refined[2];
  if (out.has_physics()) {
    out.recon_coarse = physics::reconstruct_hazy(out.coarse.p_j, out.coarse.p_t, out.coarse.p_a);
    out.recon_refined = physics::reconstruct_hazy(out.refined_j, out.refined_t, out.refined_a);
  }
  return out;
}

// ---------------------------------------------------------------- utilities

void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard guard;
  auto dst_params = dst.named_parameters(true);
  const auto src_params = src.named_parameters(true);
  if (dst_params.size() != src_params.size()) {
    throw std::invalid_argument("copy_parameters: parameter count mismatch");
  }
  for (const auto& item : src_params) {
    auto* target = dst_params.find(item.key());
    if (target == nullptr || target->sizes() != item.value().sizes()) {
      throw std::invalid_argument("copy_parameters: mismatch at '" + item.key() + "'");
    }
    target->copy_(item.value());
  }
  auto dst_buffers = dst.named_buffers(true);
  for (const auto& item : src.named_buffers(true)) {
    if (auto* target = dst_buffers.find(item.key())) target->copy_(item.value());
  }
}

int64_t parameter_count(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters(true)) n += p.numel();
  return n;
}

std::map<std::string, int64_t> parameter_counts_by_submodule(const torch::nn::Module& module) {
  std::map<std::string, int64_t> out;
  for (const auto& child : module.named_children()) {
    out[child.key()] = parameter_count(*child.value());
  }
  return out;
}

void load_encoder_weights(DidNetImpl& model, const std::filesystem::path& path) {
  Encoder loaded(model.config());
  try {
    torch::load(loaded, path.string());
  } catch (const c10::Error& e) {
    throw std::runtime_error("cannot load encoder weights from " + path.string() + ": " + e.what_without_backtrace());
  }
  try {
    copy_parameters(*model.encoder, *loaded);
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error("encoder weights " + path.string() + " do not fit: " + e.what());
  }
}

}  // namespace dmtnet::net
