#include "dmtnet/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include <opencv2/imgproc.hpp>

#include "dmtnet/image_io.hpp"

namespace dmtnet::data {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Rng stream_for(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

void check_crop(const std::string& id, const torch::Tensor& image, int64_t size) {
  if (size <= 0) {
    throw DatasetError("crop size must be positive");
  }
  if (image.size(-2) < size || image.size(-1) < size) {
    throw DatasetError("sample '" + id + "' is " + std::to_string(image.size(-2)) + "x" +
                       std::to_string(image.size(-1)) + ", smaller than crop " + std::to_string(size));
  }
}

torch::Tensor window(const torch::Tensor& plane, int64_t top, int64_t left, int64_t size, bool flip) {
  auto out = plane.slice(-2, top, top + size).slice(-1, left, left + size);
  if (flip) {
    out = out.flip({-1});
  }
  return out.contiguous();
}

struct Window {
  int64_t top, left;
  bool flip;
};

Window draw_window(const torch::Tensor& image, int64_t size, Rng& rng) {
  std::uniform_int_distribution<int64_t> ty(0, image.size(-2) - size);
  std::uniform_int_distribution<int64_t> tx(0, image.size(-1) - size);
  std::bernoulli_distribution coin(0.5);
  const auto top = ty(rng);
  const auto left = tx(rng);
  return {top, left, coin(rng)};
}

json params_json(const physics::ScatteringParams& p) {
  return {{"atmospheric_light", p.atmospheric_light}, {"beta", p.beta}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) {
    throw DatasetError("cannot write " + path.string());
  }
  out << text;
}

}  // namespace

std::vector<LabeledSample> synthesize_dataset(std::span<const CleanSource> clean_images,
                                              const SynthesisOptions& options) {
  if (clean_images.empty()) {
    throw DatasetError("synthesize_dataset: no clean images given");
  }
  if (options.settings_per_image < 1) {
    throw DatasetError("synthesize_dataset: settings_per_image must be >= 1");
  }
  std::vector<LabeledSample> out;
  out.reserve(clean_images.size() * static_cast<size_t>(options.settings_per_image));
  for (size_t i = 0; i < clean_images.size(); ++i) {
    const auto& src = clean_images[i];
    if (src.clean.dim() != 3 || src.clean.size(0) != 3) {
      throw DatasetError("clean image '" + src.id + "' must be [3,H,W]");
    }
    auto rng = stream_for(options.seed, i);
    const auto h = src.clean.size(1), w = src.clean.size(2);
    torch::Tensor depth = src.depth ? *src.depth : physics::synthetic_depth(h, w, rng);
    if (depth.dim() != 3 || depth.size(0) != 1 || depth.size(1) != h || depth.size(2) != w) {
      throw DatasetError("depth map for '" + src.id + "' does not match its clean image size");
    }
    std::uniform_real_distribution<double> light(options.atmosphere_min, options.atmosphere_max);
    std::uniform_real_distribution<double> beta(options.beta_min, options.beta_max);
    for (int k = 0; k < options.settings_per_image; ++k) {
      physics::ScatteringParams params;
      if (options.per_channel_atmosphere) {
        for (auto& a : params.atmospheric_light) a = light(rng);
      } else {
        params.atmospheric_light.fill(light(rng));
      }
      params.beta = beta(rng);

      LabeledSample s;
      s.id = src.id + "_s" + std::to_string(k);
      s.clean_id = src.id;
      s.clean = src.clean.to(torch::kFloat32);
      s.transmission = physics::transmission_from_depth(depth, params.beta).to(torch::kFloat32);
      s.atmosphere = physics::atmosphere_plane(params.atmospheric_light, h, w);
      s.hazy = physics::compose_hazy(s.clean, s.transmission, s.atmosphere);
      s.params = params;
      out.push_back(std::move(s));
    }
  }
  return out;
}

LabeledSample crop_and_flip(const LabeledSample& sample, int64_t top, int64_t left, int64_t size, bool flip) {
  check_crop(sample.id, sample.hazy, size);
  LabeledSample out;
  out.id = sample.id;
  out.clean_id = sample.clean_id;
  out.params = sample.params;
  out.hazy = window(sample.hazy, top, left, size, flip);
  out.clean = window(sample.clean, top, left, size, flip);
  out.transmission = window(sample.transmission, top, left, size, flip);
  out.atmosphere = window(sample.atmosphere, top, left, size, flip);
  return out;
}

LabeledSample random_crop_and_flip(const LabeledSample& sample, int64_t size, Rng& rng) {
  check_crop(sample.id, sample.hazy, size);
  const auto win = draw_window(sample.hazy, size, rng);
  return crop_and_flip(sample, win.top, win.left, size, win.flip);
}

UnlabeledSample random_crop_and_flip(const UnlabeledSample& sample, int64_t size, Rng& rng) {
  check_crop(sample.id, sample.hazy, size);
  const auto win = draw_window(sample.hazy, size, rng);
  return {sample.id, window(sample.hazy, win.top, win.left, size, win.flip)};
}

MixedBatch make_mixed_batch(std::span<const LabeledSample> labeled_pool,
                            std::span<const UnlabeledSample> unlabeled_pool, int batch_size,
                            int64_t crop_size, Rng& rng) {
  if (batch_size <= 0 || batch_size % 2 != 0) {
    throw DatasetError("mixed batch size must be positive and even, got " + std::to_string(batch_size));
  }
  if (labeled_pool.empty() || unlabeled_pool.empty()) {
    throw DatasetError("mixed batch needs non-empty labeled and unlabeled pools");
  }
  MixedBatch batch;
  batch.crop_size = crop_size;
  const int half = batch_size / 2;
  std::uniform_int_distribution<size_t> pick_l(0, labeled_pool.size() - 1);
  std::uniform_int_distribution<size_t> pick_u(0, unlabeled_pool.size() - 1);
  for (int i = 0; i < half; ++i) {
    batch.labeled.push_back(random_crop_and_flip(labeled_pool[pick_l(rng)], crop_size, rng));
  }
  for (int i = 0; i < half; ++i) {
    batch.unlabeled.push_back(random_crop_and_flip(unlabeled_pool[pick_u(rng)], crop_size, rng));
  }
  return batch;
}

MixedBatch make_labeled_batch(std::span<const LabeledSample> labeled_pool, int count, int64_t crop_size,
                              Rng& rng) {
  if (count <= 0) {
    throw DatasetError("labeled batch size must be positive");
  }
  if (labeled_pool.empty()) {
    throw DatasetError("labeled pool is empty");
  }
  MixedBatch batch;
  batch.crop_size = crop_size;
  std::uniform_int_distribution<size_t> pick(0, labeled_pool.size() - 1);
  for (int i = 0; i < count; ++i) {
    batch.labeled.push_back(random_crop_and_flip(labeled_pool[pick(rng)], crop_size, rng));
  }
  return batch;
}

LabeledTensors stack_labeled(std::span<const LabeledSample> samples) {
  if (samples.empty()) {
    return {};
  }
  std::vector<torch::Tensor> h, c, t, a;
  for (const auto& s : samples) {
    h.push_back(s.hazy);
    c.push_back(s.clean);
    t.push_back(s.transmission);
    a.push_back(s.atmosphere);
  }
  return {torch::stack(h), torch::stack(c), torch::stack(t), torch::stack(a)};
}

torch::Tensor stack_unlabeled(std::span<const UnlabeledSample> samples) {
  if (samples.empty()) {
    return {};
  }
  std::vector<torch::Tensor> h;
  for (const auto& s : samples) h.push_back(s.hazy);
  return torch::stack(h);
}

torch::Tensor perturb_with_noise(const torch::Tensor& image, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) {
    throw std::invalid_argument("perturb_with_noise: sigma must be >= 0");
  }
  if (sigma == 0.0) {
    return image.clone();
  }
  auto gen = at::make_generator<at::CPUGeneratorImpl>(rng());
  auto noise = torch::randn(image.sizes(), gen, image.options().device(torch::kCPU)).to(image.device());
  return (image + sigma * noise).clamp(0.0, 1.0);
}

torch::Tensor procedural_clean_image(int64_t height, int64_t width, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int h = static_cast<int>(height), w = static_cast<int>(width);
  auto color = [&] { return cv::Scalar(unit(rng), unit(rng), unit(rng)); };

  // Vertical sky-to-ground style gradient between two random colors.
  cv::Mat img(h, w, CV_32FC3);
  const auto top = color(), bottom = color();
  for (int y = 0; y < h; ++y) {
    const double f = h > 1 ? static_cast<double>(y) / (h - 1) : 0.0;
    img.row(y).setTo(top * (1.0 - f) + bottom * f);
  }

  std::uniform_int_distribution<int> shape_count(4, 9);
  const int shapes = shape_count(rng);
  const int scale = std::max(1, std::min(h, w));
  for (int s = 0; s < shapes; ++s) {
    const cv::Point center(static_cast<int>(unit(rng) * w), static_cast<int>(unit(rng) * h));
    const int extent = std::max(2, static_cast<int>((0.08 + 0.3 * unit(rng)) * scale));
    const auto fill = color();
    const int kind = static_cast<int>(unit(rng) * 3.0);
    cv::Mat mask = cv::Mat::zeros(h, w, CV_8UC1);
    if (kind == 0) {
      cv::rectangle(mask, center - cv::Point(extent, extent / 2), center + cv::Point(extent, extent / 2),
                    cv::Scalar(255), cv::FILLED);
    } else if (kind == 1) {
      cv::circle(mask, center, extent, cv::Scalar(255), cv::FILLED);
    } else {
      std::vector<cv::Point> tri{center + cv::Point(0, -extent), center + cv::Point(extent, extent),
                                 center + cv::Point(-extent, extent)};
      cv::fillConvexPoly(mask, tri, cv::Scalar(255));
    }
    cv::Mat layer(h, w, CV_32FC3, fill);
    if (unit(rng) < 0.5) {
      // stripe texture
      const double period = 6.0 + 14.0 * unit(rng);
      const double angle = unit(rng) * M_PI;
      const double amp = 0.1 + 0.2 * unit(rng);
      for (int y = 0; y < h; ++y) {
        auto* row = layer.ptr<cv::Vec3f>(y);
        for (int x = 0; x < w; ++x) {
          const double v = amp * std::sin(2.0 * M_PI * (x * std::cos(angle) + y * std::sin(angle)) / period);
          for (int c = 0; c < 3; ++c) row[x][c] = static_cast<float>(row[x][c] + v);
        }
      }
    }
    layer.copyTo(img, mask);
  }
  cv::GaussianBlur(img, img, cv::Size(5, 5), 1.0);
  auto t = torch::from_blob(img.data, {h, w, 3}, torch::kFloat32).clone();
  return t.permute({2, 0, 1}).clamp(0.0, 1.0).contiguous();
}

std::vector<CleanSource> procedural_sources(int count, int64_t height, int64_t width, std::uint64_t seed) {
  std::vector<CleanSource> out;
  for (int i = 0; i < count; ++i) {
    auto rng = stream_for(seed ^ 0x9e3779b97f4a7c15ULL, static_cast<std::uint64_t>(i));
    char id[32];
    std::snprintf(id, sizeof id, "clean_%04d", i);
    out.push_back({id, procedural_clean_image(height, width, rng), std::nullopt});
  }
  return out;
}

std::vector<CleanSource> load_clean_sources(const fs::path& clean_dir, const std::optional<fs::path>& depth_dir,
                                            double depth_png_range) {
  if (!fs::is_directory(clean_dir)) {
    throw DatasetError("clean image directory does not exist: " + clean_dir.string());
  }
  if (depth_dir && !fs::is_directory(*depth_dir)) {
    throw DatasetError("depth directory does not exist: " + depth_dir->string());
  }
  std::map<std::string, fs::path> depth_by_stem;
  if (depth_dir) {
    for (const auto& p : io::list_images(*depth_dir)) depth_by_stem[p.stem().string()] = p;
  }
  std::vector<CleanSource> out;
  for (const auto& p : io::list_images(clean_dir)) {
    CleanSource src{p.stem().string(), io::read_image(p, 3), std::nullopt};
    if (auto it = depth_by_stem.find(src.id); it != depth_by_stem.end()) {
      src.depth = io::read_depth(it->second, depth_png_range);
    }
    out.push_back(std::move(src));
  }
  if (out.empty()) {
    throw DatasetError("no images found in " + clean_dir.string());
  }
  return out;
}

std::vector<UnlabeledSample> load_unlabeled_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw DatasetError("unlabeled directory does not exist: " + dir.string());
  }
  std::vector<UnlabeledSample> out;
  for (const auto& p : io::list_images(dir)) {
    try {
      out.push_back({p.stem().string(), io::read_image(p, 3)});
    } catch (const io::ImageReadError& e) {
      std::cerr << "warning: skipping " << p << ": " << e.what() << "\n";
    }
  }
  return out;
}

Split split_by_clean_image(std::span<const LabeledSample> samples, int test_clean_count, std::uint64_t seed) {
  std::vector<std::string> ids;
  std::set<std::string> seen;
  for (const auto& s : samples) {
    if (seen.insert(s.clean_id).second) ids.push_back(s.clean_id);
  }
  if (test_clean_count < 0 || static_cast<size_t>(test_clean_count) > ids.size()) {
    throw DatasetError("test split size " + std::to_string(test_clean_count) + " exceeds " +
                       std::to_string(ids.size()) + " clean images");
  }
  auto rng = stream_for(seed, 0x5117);
  std::shuffle(ids.begin(), ids.end(), rng);
  const std::set<std::string> test_ids(ids.begin(), ids.begin() + test_clean_count);
  Split split;
  for (const auto& s : samples) {
    (test_ids.count(s.clean_id) ? split.test : split.train).push_back(s);
  }
  return split;
}

json manifest_json(const Split& split, const ManifestWriteOptions& options) {
  json samples = json::array();
  auto add = [&](const std::vector<LabeledSample>& list, const char* name) {
    for (const auto& s : list) {
      samples.push_back({{"id", s.id},
                         {"clean_id", s.clean_id},
                         {"split", name},
                         {"hazy", "hazy/" + s.id + ".png"},
                         {"clean", "clean/" + s.clean_id + ".png"},
                         {"transmission", "transmission/" + s.id + ".png"},
                         {"params", params_json(s.params)}});
    }
  };
  add(split.train, "train");
  add(split.test, "test");
  return {{"schema", "dmtnet.manifest"},
          {"version", kManifestVersion},
          {"seed", options.seed},
          {"settings_per_image", options.settings_per_image},
          {"per_channel_atmosphere", options.per_channel_atmosphere},
          {"samples", samples}};
}

fs::path write_dataset(const fs::path& out_dir, const Split& split, const ManifestWriteOptions& options) {
  fs::create_directories(out_dir / "hazy");
  fs::create_directories(out_dir / "clean");
  fs::create_directories(out_dir / "transmission");
  std::set<std::string> written_clean;
  for (const auto* list : {&split.train, &split.test}) {
    for (const auto& s : *list) {
      io::write_image(out_dir / "hazy" / (s.id + ".png"), physics::clip_unit(s.hazy));
      io::write_plane16(out_dir / "transmission" / (s.id + ".png"), s.transmission);
      if (written_clean.insert(s.clean_id).second) {
        io::write_image(out_dir / "clean" / (s.clean_id + ".png"), s.clean);
      }
    }
  }
  const auto path = out_dir / "manifest.json";
  write_text(path, manifest_json(split, options).dump(2) + "\n");
  return path;
}

std::vector<LabeledSample> load_manifest(const fs::path& manifest_path, const ManifestLoadOptions& options) {
  std::ifstream in(manifest_path);
  if (!in) {
    throw DatasetError("cannot open manifest " + manifest_path.string());
  }
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw DatasetError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  if (doc.value("schema", "") != "dmtnet.manifest" || doc.value("version", 0) != kManifestVersion) {
    throw DatasetError("unsupported manifest schema in " + manifest_path.string());
  }
  const auto root = manifest_path.parent_path();
  std::map<std::string, torch::Tensor> clean_cache;
  std::vector<LabeledSample> out;
  for (const auto& entry : doc.at("samples")) {
    const auto split = entry.at("split").get<std::string>();
    if (options.split && *options.split != split) continue;
    LabeledSample s;
    s.id = entry.at("id").get<std::string>();
    s.clean_id = entry.at("clean_id").get<std::string>();
    s.params.atmospheric_light = entry.at("params").at("atmospheric_light").get<std::array<double, 3>>();
    s.params.beta = entry.at("params").at("beta").get<double>();
    const auto clean_rel = entry.at("clean").get<std::string>();
    const auto trans_rel = entry.at("transmission").get<std::string>();
    const auto hazy_rel = entry.at("hazy").get<std::string>();
    if (!fs::exists(root / clean_rel) || !fs::exists(root / trans_rel)) {
      if (!options.allow_missing_ground_truth) {
        throw DatasetError("sample '" + s.id + "' is missing ground-truth files");
      }
      s.hazy = io::read_image(root / hazy_rel, 3);
      out.push_back(std::move(s));
      continue;
    }
    auto it = clean_cache.find(clean_rel);
    if (it == clean_cache.end()) {
      it = clean_cache.emplace(clean_rel, io::read_image(root / clean_rel, 3)).first;
    }
    s.clean = it->second;
    s.transmission = io::read_plane16(root / trans_rel);
    s.atmosphere = physics::atmosphere_plane(s.params.atmospheric_light, s.clean.size(1), s.clean.size(2));
    s.hazy = options.use_stored_hazy ? io::read_image(root / hazy_rel, 3)
                                     : physics::compose_hazy(s.clean, s.transmission, s.atmosphere);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace dmtnet::data
