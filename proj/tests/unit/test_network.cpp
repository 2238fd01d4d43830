#include "doctest_torch.hpp"

#include <set>

#include "dmtnet/haze_physics.hpp"
#include "dmtnet/losses.hpp"
#include "dmtnet/network.hpp"
#include "support.hpp"

using namespace dmtnet;
using dmtnet::testing::bit_equal;
using dmtnet::testing::tiny_network;

namespace {

std::vector<int64_t> spatial(const std::vector<torch::Tensor>& maps) {
  std::vector<int64_t> out;
  for (const auto& m : maps) out.push_back(m.size(-1));
  return out;
}

void check_output_shapes(const net::DidNetOutput& o, int64_t n, int64_t h, int64_t w) {
  for (const auto& [t, c] : std::vector<std::pair<torch::Tensor, int64_t>>{{o.coarse.p_j, 3},
                                                                          {o.coarse.p_t, 1},
                                                                          {o.coarse.p_a, 3},
                                                                          {o.refined_j, 3},
                                                                          {o.refined_t, 1},
                                                                          {o.refined_a, 3},
                                                                          {o.recon_coarse, 3},
                                                                          {o.recon_refined, 3}}) {
    REQUIRE(t.defined());
    CHECK(t.sizes() == torch::IntArrayRef({n, c, h, w}));
  }
}

// Sum of |grad| over every parameter of `module`, treating undefined as zero.
double grad_mass(const torch::nn::Module& module) {
  double s = 0;
  for (const auto& p : module.parameters()) {
    if (p.grad().defined()) s += p.grad().abs().sum().item<double>();
  }
  return s;
}

}  // namespace

TEST_CASE("encoder stride table") {
  torch::NoGradGuard guard;
  net::DidNet model(tiny_network());
  auto f240 = model->encode(torch::rand({1, 3, 240, 240}));
  CHECK(spatial(f240.ef) == std::vector<int64_t>{120, 60, 30, 15, 8});
  auto f64 = model->encode(torch::rand({1, 3, 64, 64}));
  CHECK(spatial(f64.ef) == std::vector<int64_t>{32, 16, 8, 4, 2});
  CHECK_THROWS_AS(model->encode(torch::rand({1, 3, 16, 64})), std::invalid_argument);
}

TEST_CASE("forward passes are bit-identical") {
  torch::NoGradGuard guard;
  net::DidNet model(tiny_network());
  model->eval();
  auto x = torch::rand({2, 3, 64, 64});
  auto a = model->encode(x);
  auto b = model->encode(x);
  for (int i = 0; i < net::kScales; ++i) CHECK(bit_equal(a.ef[i], b.ef[i]));
  CHECK(bit_equal(model->forward(x).refined_j, model->forward(x).refined_j));
}

TEST_CASE("disentangled features match encoder shapes; zero in gives zero out") {
  torch::NoGradGuard guard;
  auto cfg = tiny_network();
  net::DidNet model(cfg);
  auto ef = model->encode(torch::rand({1, 3, 64, 64}));
  auto df = model->disentangle(ef);
  for (int i = 0; i < net::kScales; ++i) {
    for (const auto* branch : {&df.dfj, &df.dft, &df.dfa}) {
      CHECK((*branch)[i].size(-1) == ef.ef[i].size(-1));
      CHECK((*branch)[i].size(-2) == ef.ef[i].size(-2));
      CHECK((*branch)[i].size(1) == cfg.feature_channels);
    }
  }
  net::EncoderFeatures zeros;
  for (const auto& e : ef.ef) zeros.ef.push_back(torch::zeros_like(e));
  auto dz = model->disentangle(zeros);
  for (int i = 0; i < net::kScales; ++i) CHECK(dz.dfa[i].abs().max().item<double>() == 0.0);
}

TEST_CASE("merge block shapes and argument checks") {
  net::MergeBlock block(16, 8, 12, 2, 4);
  auto out = net::merge_adjacent(block, torch::rand({1, 16, 15, 15}), torch::rand({1, 8, 30, 30}));
  CHECK(out.sizes() == torch::IntArrayRef({1, 12, 30, 30}));
  CHECK(block->rcab_count() == 2);
  CHECK_THROWS_AS(net::merge_adjacent(block, torch::rand({1, 16, 30, 30}), torch::rand({1, 8, 30, 30})),
                  std::invalid_argument);
}

TEST_CASE("parameter count grows linearly with the RCAB count") {
  std::vector<int64_t> counts;
  for (int n = 1; n <= 4; ++n) counts.push_back(net::parameter_count(*net::MergeBlock(16, 8, 16, n, 4)));
  const int64_t per_rcab = net::parameter_count(*net::RCAB(16, 4));
  for (size_t i = 1; i < counts.size(); ++i) CHECK(counts[i] - counts[i - 1] == per_rcab);
  // rcabs_jt only changes the J and T chains.
  auto a = tiny_network(), b = tiny_network();
  b.rcabs_jt = a.rcabs_jt + 3;
  const auto ca = net::parameter_counts_by_submodule(*net::DidNet(a));
  const auto cb = net::parameter_counts_by_submodule(*net::DidNet(b));
  const int64_t rcab_w = net::parameter_count(*net::RCAB(a.feature_channels, a.rca_reduction));
  CHECK(cb.at("decoder_j") - ca.at("decoder_j") == 3 * (net::kScales - 1) * rcab_w);
  CHECK(cb.at("decoder_t") - ca.at("decoder_t") == 3 * (net::kScales - 1) * rcab_w);
  CHECK(cb.at("decoder_a") == ca.at("decoder_a"));
}

TEST_CASE("RCAB with zeroed residual is the identity") {
  torch::NoGradGuard guard;
  net::RCAB block(8, 4);
  block->zero_residual();
  auto x = torch::randn({2, 8, 9, 9});
  CHECK(bit_equal(block->forward(x), x));
}

TEST_CASE("eight-output contract") {
  torch::NoGradGuard guard;
  net::DidNet model(tiny_network());
  check_output_shapes(model->forward(torch::rand({2, 3, 64, 64})), 2, 64, 64);
  auto o = model->forward(torch::rand({1, 3, 240, 240}));
  check_output_shapes(o, 1, 240, 240);
  for (const auto& t : {o.coarse.p_j, o.coarse.p_t, o.coarse.p_a}) {
    CHECK(t.min().item<double>() >= 0.0);
    CHECK(t.max().item<double>() <= 1.0);
  }
  check_output_shapes(model->forward(torch::rand({1, 3, 72, 100})), 1, 72, 100);
}

TEST_CASE("full-size batch of sixteen 240x240 crops") {
  torch::NoGradGuard guard;
  net::DidNet model(tiny_network());
  check_output_shapes(model->forward(torch::rand({16, 3, 240, 240})), 16, 240, 240);
}

TEST_CASE("refined equals coarse at initialization and reconstructions use the scattering model") {
  torch::NoGradGuard guard;
  net::DidNet model(tiny_network());
  auto o = model->forward(torch::rand({1, 3, 64, 64}));
  CHECK(bit_equal(o.refined_j, o.coarse.p_j));
  CHECK(bit_equal(o.refined_t, o.coarse.p_t));
  CHECK(bit_equal(o.refined_a, o.coarse.p_a));
  CHECK(bit_equal(o.recon_coarse, physics::reconstruct_hazy(o.coarse.p_j, o.coarse.p_t, o.coarse.p_a)));
  CHECK(bit_equal(o.recon_refined, physics::reconstruct_hazy(o.refined_j, o.refined_t, o.refined_a)));
}

TEST_CASE("refiners own disjoint parameters") {
  net::DidNet model(tiny_network());
  std::set<const void*> seen;
  size_t total = 0;
  for (const auto* r : {&model->refiner_j, &model->refiner_t, &model->refiner_a}) {
    for (const auto& p : (*r)->parameters()) {
      seen.insert(p.data_ptr());
      ++total;
    }
  }
  CHECK(total > 0);
  CHECK(seen.size() == total);
}

TEST_CASE("a loss on the atmosphere map leaves the J and T projections untouched") {
  net::DidNet model(tiny_network());
  auto o = model->forward(torch::rand({1, 3, 64, 64}));
  o.coarse.p_a.sum().backward();
  CHECK(grad_mass(*model->disentangle_j) == 0.0);
  CHECK(grad_mass(*model->disentangle_t) == 0.0);
  CHECK(grad_mass(*model->decoder_j) == 0.0);
  CHECK(grad_mass(*model->disentangle_a) > 0.0);
  CHECK(grad_mass(*model->encoder) > 0.0);
}

TEST_CASE("perturbing the T chain leaves P_J bit-unchanged") {
  torch::NoGradGuard guard;
  net::DidNet model(tiny_network());
  model->eval();
  auto x = torch::rand({1, 3, 64, 64});
  auto before = model->forward(x);
  for (auto& p : model->decoder_t->parameters()) p.add_(torch::randn_like(p));
  for (auto& p : model->disentangle_t->parameters()) p.add_(torch::randn_like(p));
  auto after = model->forward(x);
  CHECK(bit_equal(before.coarse.p_j, after.coarse.p_j));
  CHECK(bit_equal(before.refined_j, after.refined_j));
  CHECK(!bit_equal(before.coarse.p_t, after.coarse.p_t));
}

TEST_CASE("ablation switches") {
  torch::NoGradGuard guard;
  auto cfg = tiny_network();
  cfg.disentangle = false;
  cfg.refine = false;
  net::DidNet basic(cfg);
  auto o = basic->forward(torch::rand({1, 3, 64, 64}));
  CHECK(!o.has_physics());
  CHECK(bit_equal(o.refined_j, o.coarse.p_j));
  const auto counts = net::parameter_counts_by_submodule(*basic);
  CHECK(counts.count("decoder_t") == 0);
  CHECK(counts.count("refiner_j") == 0);

  cfg.disentangle = true;
  net::DidNet stage1(cfg);
  auto o1 = stage1->forward(torch::rand({1, 3, 64, 64}));
  CHECK(o1.has_physics());
  CHECK(net::parameter_counts_by_submodule(*stage1).count("refiner_j") == 0);
}

TEST_CASE("config validation and json round trip") {
  auto cfg = tiny_network();
  cfg.unet_depth = 4;
  CHECK_THROWS_AS(cfg.validate(), net::ConfigError);
  cfg = tiny_network();
  cfg.rcabs_a = 0;
  CHECK_THROWS_AS(cfg.validate(), net::ConfigError);
  cfg = tiny_network();
  cfg.encoder_kind = net::EncoderKind::resnext;
  auto back = net::network_config_from_json(net::to_json(cfg));
  CHECK(back.encoder_kind == net::EncoderKind::resnext);
  CHECK(back.encoder_channels == cfg.encoder_channels);
  CHECK(back.rcabs_jt == cfg.rcabs_jt);
}

TEST_CASE("resnext encoder runs") {
  torch::NoGradGuard guard;
  auto cfg = tiny_network();
  cfg.encoder_kind = net::EncoderKind::resnext;
  cfg.encoder_channels = {16, 16, 32, 32, 32};
  cfg.resnext_cardinality = 4;
  net::DidNet model(cfg);
  check_output_shapes(model->forward(torch::rand({1, 3, 64, 64})), 1, 64, 64);
}

TEST_CASE("encoder weights load from a saved encoder") {
  dmtnet::testing::TempDir dir("enc");
  auto cfg = tiny_network();
  net::Encoder source(cfg);
  torch::save(source, (dir / "enc.pt").string());
  net::DidNet model(cfg);
  net::load_encoder_weights(*model, dir / "enc.pt");
  auto a = source->named_parameters();
  for (const auto& item : model->encoder->named_parameters()) CHECK(torch::equal(item.value(), a[item.key()]));
  auto other = cfg;
  other.encoder_channels = {8, 8, 8, 8, 8};
  net::DidNet wrong(other);
  CHECK_THROWS(net::load_encoder_weights(*wrong, dir / "enc.pt"));
}

TEST_CASE("gradients match finite differences in double precision") {
  torch::manual_seed(21);
  auto cfg = tiny_network();
  net::DidNet model(cfg);
  model->to(torch::kDouble);
  // Give the refiners a non-zero output layer so their parameters matter.
  {
    torch::NoGradGuard guard;
    for (auto& p : model->refiner_j->parameters()) p.add_(0.05 * torch::randn_like(p));
  }
  auto x = torch::rand({1, 3, 32, 32}, torch::kDouble);
  auto gt_j = torch::rand({1, 3, 32, 32}, torch::kDouble);
  auto objective = [&] {
    auto o = model->forward(x);
    return ((o.refined_j - gt_j).pow(2).mean() + o.coarse.p_t.mean() + o.recon_refined.pow(2).mean() +
            o.refined_a.mean());
  };
  model->zero_grad();
  objective().backward();

  std::mt19937_64 rng(3);
  int checked = 0;
  double worst = 0;
  for (auto& item : model->named_parameters()) {
    auto& p = item.value();
    auto flat = p.data().view(-1);
    auto grad = p.grad().view(-1);
    std::uniform_int_distribution<int64_t> pick(0, flat.numel() - 1);
    for (int k = 0; k < 2; ++k) {
      const int64_t i = pick(rng);
      const double orig = flat[i].item<double>();
      const double h = 1e-6;
      double fp, fm;
      {
        torch::NoGradGuard guard;
        flat[i] = orig + h;
        fp = objective().item<double>();
        flat[i] = orig - h;
        fm = objective().item<double>();
        flat[i] = orig;
      }
      const double fd = (fp - fm) / (2 * h);
      const double ad = grad[i].item<double>();
      const double scale = std::max({std::abs(fd), std::abs(ad), 1e-7});
      const double rel = std::abs(fd - ad) / scale;
      worst = std::max(worst, rel);
      if (rel > 1e-2) MESSAGE(item.key() << "[" << i << "] fd=" << fd << " ad=" << ad);
      ++checked;
    }
  }
  CHECK(checked > 50);
  CHECK(worst <= 1e-2);
}

TEST_CASE("500 steps on one labeled sample cut the supervised loss below 10%") {
  torch::manual_seed(0);
  const auto samples = dmtnet::testing::small_labeled_set(1, 32, 3, 1);
  const auto& s = samples[0];
  net::DidNet model(tiny_network());
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(5e-3));
  auto x = s.hazy.unsqueeze(0);
  loss::GroundTruth gt{s.clean.unsqueeze(0), s.transmission.unsqueeze(0), s.atmosphere.unsqueeze(0)};
  loss::LossWeights w;
  double first = 0, last = 0;
  for (int step = 0; step < 500; ++step) {
    auto o = model->forward(x);
    auto sup = loss::supervised_total(loss::supervised_disentangled(o, gt, w).dst,
                                      loss::reconstruction_loss(x, o.recon_coarse, o.recon_refined), w);
    if (step == 0) first = sup.item<double>();
    last = sup.item<double>();
    for (auto& g : opt.param_groups()) {
      static_cast<torch::optim::AdamOptions&>(g.options()).lr(5e-3 * std::pow(1.0 - step / 500.0, 0.9));
    }
    opt.zero_grad();
    sup.backward();
    opt.step();
  }
  MESSAGE("supervised loss " << first << " -> " << last);
  CHECK(last < 0.1 * first);
}
