#include "dmtnet/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "dmtnet/trainer.hpp"

namespace dmtnet::metrics {
namespace F = torch::nn::functional;
using nlohmann::json;

namespace {

void check_pair(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.defined() || !b.defined() || a.sizes() != b.sizes()) {
    std::ostringstream os;
    os << what << ": shape mismatch";
    if (a.defined() && b.defined()) os << " " << a.sizes() << " vs " << b.sizes();
    throw std::invalid_argument(os.str());
  }
}

torch::Tensor as_planes(const torch::Tensor& x) {
  // [C,H,W] or [H,W] -> [1,C,H,W] double
  auto t = x.detach().to(torch::kCPU, torch::kFloat64);
  if (t.dim() == 2) t = t.unsqueeze(0);
  if (t.dim() != 3) throw std::invalid_argument("ssim: expected [C,H,W] image");
  return t.unsqueeze(0);
}

json number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  return v;
}

std::string format_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

double psnr(const torch::Tensor& a, const torch::Tensor& b, bool quantize) {
  check_pair(a, b, "psnr");
  auto x = a.detach().to(torch::kFloat64), y = b.detach().to(torch::kFloat64);
  if (quantize) {
    x = (x.clamp(0, 1) * 255.0).round() / 255.0;
    y = (y.clamp(0, 1) * 255.0).round() / 255.0;
  }
  const double mse = (x - y).pow(2).mean().item<double>();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& o) {
  check_pair(a, b, "ssim");
  auto x = as_planes(a), y = as_planes(b);
  const auto c = x.size(1), h = x.size(2), w = x.size(3);
  if (h < o.window || w < o.window) {
    throw std::invalid_argument("ssim: image " + std::to_string(h) + "x" + std::to_string(w) +
                                " is smaller than the " + std::to_string(o.window) + "x" +
                                std::to_string(o.window) + " window");
  }
  auto coords = torch::arange(o.window, torch::kFloat64) - (o.window - 1) / 2.0;
  auto g = torch::exp(-coords.pow(2) / (2.0 * o.sigma * o.sigma));
  g = g / g.sum();
  auto kernel = torch::outer(g, g).expand({c, 1, o.window, o.window}).contiguous();
  auto filt = [&](const torch::Tensor& t) { return F::conv2d(t, kernel, F::Conv2dFuncOptions().groups(c)); };

  const double c1 = std::pow(o.k1 * o.dynamic_range, 2), c2 = std::pow(o.k2 * o.dynamic_range, 2);
  auto mu_x = filt(x), mu_y = filt(y);
  auto sxx = filt(x * x) - mu_x * mu_x;
  auto syy = filt(y * y) - mu_y * mu_y;
  auto sxy = filt(x * y) - mu_x * mu_y;
  auto map = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x.pow(2) + mu_y.pow(2) + c1) * (sxx + syy + c2));
  return map.mean({2, 3}).mean().item<double>();
}

json EvalReport::to_json() const {
  json rows = json::array();
  for (const auto& s : samples) {
    json row = {{"id", s.id}, {"scored", s.scored}};
    if (s.scored) {
      row["psnr"] = number(s.psnr);
      row["ssim"] = number(s.ssim);
    } else {
      row["note"] = s.note;
    }
    rows.push_back(row);
  }
  return {{"samples", rows},
          {"mean_psnr", number(mean_psnr)},
          {"mean_ssim", number(mean_ssim)},
          {"scored", scored},
          {"flagged", flagged},
          {"config", config}};
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "id,psnr,ssim,status\n";
  for (const auto& s : samples) {
    if (s.scored) {
      os << s.id << "," << format_number(s.psnr) << "," << format_number(s.ssim) << ",ok\n";
    } else {
      os << s.id << ",,,flagged\n";
    }
  }
  os << "mean," << format_number(mean_psnr) << "," << format_number(mean_ssim) << ",aggregate\n";
  return os.str();
}

void EvalReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream js(dir / "report.json"), csv(dir / "report.csv");
  if (!js || !csv) {
    throw std::runtime_error("cannot write evaluation report into " + dir.string());
  }
  js << to_json().dump(2) << "\n";
  csv << to_csv();
}

EvalReport evaluate_samples(std::span<const data::LabeledSample> samples, const Predictor& predict, bool quantize) {
  EvalReport report;
  double sum_psnr = 0, sum_ssim = 0;
  for (const auto& s : samples) {
    SampleScore score{s.id};
    if (!s.clean.defined()) {
      score.scored = false;
      score.note = "missing ground truth";
      ++report.flagged;
      report.samples.push_back(score);
      continue;
    }
    const auto pred = predict(s);
    score.psnr = psnr(pred, s.clean, quantize);
    score.ssim = quantize ? ssim((pred.clamp(0, 1) * 255).round() / 255, (s.clean * 255).round() / 255)
                          : ssim(pred, s.clean);
    sum_psnr += score.psnr;
    sum_ssim += score.ssim;
    ++report.scored;
    report.samples.push_back(score);
  }
  if (report.scored > 0) {
    report.mean_psnr = sum_psnr / static_cast<double>(report.scored);
    report.mean_ssim = sum_ssim / static_cast<double>(report.scored);
  } else {
    report.mean_psnr = report.mean_ssim = std::numeric_limits<double>::quiet_NaN();
  }
  return report;
}

EvalReport evaluate_dataset(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
                            const EvalOptions& options) {
  data::ManifestLoadOptions load;
  load.split = options.split;
  load.allow_missing_ground_truth = true;
  const auto samples = data::load_manifest(manifest, load);
  if (samples.empty()) {
    throw std::invalid_argument("evaluate_dataset: manifest " + manifest.string() + " has no samples" +
                                (options.split ? " in split '" + *options.split + "'" : std::string()));
  }
  EvalReport report;
  if (options.baseline_noop) {
    report = evaluate_samples(samples, [](const data::LabeledSample& s) { return s.hazy; }, options.quantize);
  } else {
    auto model = train::load_student(checkpoint);
    report = evaluate_samples(
        samples, [&](const data::LabeledSample& s) { return train::dehaze(model, s.hazy); }, options.quantize);
  }
  report.config = {{"checkpoint", options.baseline_noop ? "" : checkpoint.string()},
                   {"manifest", manifest.string()},
                   {"split", options.split ? json(*options.split) : json(nullptr)},
                   {"baseline_noop", options.baseline_noop},
                   {"quantize", options.quantize}};
  return report;
}

}  // namespace dmtnet::metrics
