#include "dmtnet/losses.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>

namespace dmtnet::loss {
using nlohmann::json;

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.defined() || !b.defined()) {
    throw std::invalid_argument(std::string(what) + ": undefined tensor");
  }
  if (a.sizes() != b.sizes()) {
    std::ostringstream os;
    os << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw std::invalid_argument(os.str());
  }
}

torch::Tensor pair_l1(const torch::Tensor& target, const torch::Tensor& coarse, const torch::Tensor& refined) {
  return l1(target, coarse) + l1(target, refined);
}

torch::Tensor zero_like_loss(const torch::Tensor& ref) { return torch::zeros({}, ref.options()); }

}  // namespace

void LossWeights::validate() const {
  for (double v : {alpha1, alpha2, alpha3, alpha4, alpha5, alpha6, mu_max}) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument("loss weights must be finite and non-negative");
    }
  }
}

LossWeights LossWeights::preset(std::string_view name) {
  auto mirrored = [](double a1, double a2, double a3) {
    LossWeights w;
    w.alpha1 = w.alpha4 = a1;
    w.alpha2 = w.alpha5 = a2;
    w.alpha3 = w.alpha6 = a3;
    return w;
  };
  if (name == "default") return mirrored(0.3, 0.1, 0.1);
  if (name == "M1") return mirrored(0.3, 0.7, 0.1);
  if (name == "M2") return mirrored(0.3, 0.7, 0.7);
  if (name == "M3") return mirrored(0.7, 0.7, 0.1);
  if (name == "M4") return mirrored(0.7, 0.1, 0.7);
  if (name == "table-ours") return mirrored(0.7, 0.1, 0.7);
  throw std::invalid_argument("unknown loss weight preset '" + std::string(name) + "'");
}

json to_json(const LossWeights& w) {
  return {{"alpha1", w.alpha1}, {"alpha2", w.alpha2}, {"alpha3", w.alpha3}, {"alpha4", w.alpha4},
          {"alpha5", w.alpha5}, {"alpha6", w.alpha6}, {"mu_max", w.mu_max}};
}

LossWeights loss_weights_from_json(const json& j) {
  LossWeights w = LossWeights::preset(j.value("preset", std::string("default")));
  w.alpha1 = j.value("alpha1", w.alpha1);
  w.alpha2 = j.value("alpha2", w.alpha2);
  w.alpha3 = j.value("alpha3", w.alpha3);
  w.alpha4 = j.value("alpha4", w.alpha4);
  w.alpha5 = j.value("alpha5", w.alpha5);
  w.alpha6 = j.value("alpha6", w.alpha6);
  w.mu_max = j.value("mu_max", w.mu_max);
  w.validate();
  return w;
}

json LossBreakdown::to_json() const {
  return {{"l_j", l_j},
          {"l_t", l_t},
          {"l_a", l_a},
          {"l_rec", l_rec},
          {"c_j", c_j},
          {"c_t", c_t},
          {"c_a", c_a},
          {"c_rec", c_rec},
          {"dst", dst},
          {"supervised_total", supervised_total},
          {"consistency_total", consistency_total},
          {"mu", mu},
          {"grand_total", grand_total},
          {"n_labeled", n_labeled},
          {"n_unlabeled", n_unlabeled}};
}

bool LossBreakdown::all_finite() const {
  for (double v : {l_j, l_t, l_a, l_rec, c_j, c_t, c_a, c_rec, dst, supervised_total, consistency_total, mu,
                   grand_total}) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

torch::Tensor l1(const torch::Tensor& a, const torch::Tensor& b) {
  require_same_shape(a, b, "l1");
  return (a - b).abs().mean();
}

torch::Tensor reconstruction_loss(const torch::Tensor& hazy, const torch::Tensor& recon_coarse,
                                  const torch::Tensor& recon_refined) {
  require_same_shape(hazy, recon_coarse, "reconstruction_loss");
  require_same_shape(hazy, recon_refined, "reconstruction_loss");
  return pair_l1(hazy, recon_coarse, recon_refined);
}

SupervisedTerms supervised_disentangled(const net::DidNetOutput& output, const GroundTruth& gt,
                                        const LossWeights& w) {
  if (!gt.clean.defined()) {
    throw std::invalid_argument("supervised loss: missing clean ground truth");
  }
  SupervisedTerms terms;
  terms.l_j = pair_l1(gt.clean, output.coarse.p_j, output.refined_j);
  if (output.has_physics()) {
    if (!gt.transmission.defined() || !gt.atmosphere.defined()) {
      throw std::invalid_argument("supervised loss: missing transmission or atmosphere ground truth");
    }
    terms.l_t = pair_l1(gt.transmission, output.coarse.p_t, output.refined_t);
    terms.l_a = pair_l1(gt.atmosphere, output.coarse.p_a, output.refined_a);
  } else {
    terms.l_t = zero_like_loss(terms.l_j);
    terms.l_a = zero_like_loss(terms.l_j);
  }
  terms.dst = terms.l_j + w.alpha1 * terms.l_t + w.alpha2 * terms.l_a;
  return terms;
}

torch::Tensor supervised_total(const torch::Tensor& dst, const torch::Tensor& rec, const LossWeights& w) {
  return dst + w.alpha3 * rec;
}

ConsistencyTerms consistency_loss(const net::DidNetOutput& student, const net::DidNetOutput& teacher,
                                  const LossWeights& w) {
  auto agree = [](const torch::Tensor& s, const torch::Tensor& s_hat, const torch::Tensor& t,
                  const torch::Tensor& t_hat) { return l1(s, t.detach()) + l1(s_hat, t_hat.detach()); };
  if (student.has_physics() != teacher.has_physics()) {
    throw std::invalid_argument("consistency loss: student and teacher outputs differ in structure");
  }
  ConsistencyTerms terms;
  terms.c_j = agree(student.coarse.p_j, student.refined_j, teacher.coarse.p_j, teacher.refined_j);
  if (student.has_physics()) {
    terms.c_t = agree(student.coarse.p_t, student.refined_t, teacher.coarse.p_t, teacher.refined_t);
    terms.c_a = agree(student.coarse.p_a, student.refined_a, teacher.coarse.p_a, teacher.refined_a);
    terms.c_rec = agree(student.recon_coarse, student.recon_refined, teacher.recon_coarse, teacher.recon_refined);
  } else {
    terms.c_t = terms.c_a = terms.c_rec = zero_like_loss(terms.c_j);
  }
  terms.total = terms.c_j + w.alpha4 * terms.c_t + w.alpha5 * terms.c_a + w.alpha6 * terms.c_rec;
  return terms;
}

double rampup_weight(int64_t t, int64_t t_max, double mu_max) {
  if (t_max <= 0) {
    throw std::invalid_argument("rampup_weight: t_max must be positive");
  }
  if (t < 0 || t > t_max) {
    throw std::invalid_argument("rampup_weight: t outside [0, t_max]");
  }
  const double phase = 1.0 - static_cast<double>(t) / static_cast<double>(t_max);
  return mu_max * std::exp(-5.0 * phase * phase);
}

torch::Tensor total_loss(const torch::Tensor& supervised, const torch::Tensor& consistency, double mu) {
  if (!consistency.defined()) {
    return supervised;
  }
  return supervised + mu * consistency;
}

}  // namespace dmtnet::loss
