#include "dmtnet/cli.hpp"

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "dmtnet/dataset.hpp"
#include "dmtnet/image_io.hpp"
#include "dmtnet/metrics.hpp"
#include "dmtnet/run_config.hpp"
#include "dmtnet/trainer.hpp"

namespace dmtnet::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

fs::path resolve_out(const std::string& out, const char* command) {
  if (!out.empty()) return out;
  if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') {
    return fs::path(root) / command;
  }
  throw UsageError(std::string("--out is required (or set ") + kOutputRootEnv + ")");
}

void echo_config(std::ostream& out, const char* command, const json& config) {
  out << "[" << command << "] resolved config: " << config.dump() << "\n";
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("malformed config " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string clean, depth, out;
  int procedural = 0;
  int64_t size = 64;
  int per_image = 4;
  std::uint64_t seed = 0;
  int test_clean = -1;
  double depth_range = 1.0;
  bool per_channel = false;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  if (a.clean.empty() == (a.procedural <= 0)) {
    throw UsageError("synth needs exactly one of --clean DIR or --procedural N");
  }
  if (!a.clean.empty() && !fs::is_directory(a.clean)) {
    throw UsageError("clean image directory does not exist: " + a.clean);
  }
  if (!a.depth.empty() && !fs::is_directory(a.depth)) {
    throw UsageError("depth directory does not exist: " + a.depth);
  }
  if (a.per_image < 1) throw UsageError("--per-image must be >= 1");
  if (a.size < 32) throw UsageError("--size must be >= 32");
  const auto out_dir = resolve_out(a.out, "synth");

  std::vector<data::CleanSource> sources =
      a.clean.empty() ? data::procedural_sources(a.procedural, a.size, a.size, a.seed)
                      : data::load_clean_sources(a.clean, a.depth.empty() ? std::nullopt
                                                                         : std::optional<fs::path>(a.depth),
                                                 a.depth_range);
  const int test_clean = a.test_clean >= 0 ? a.test_clean
                                           : static_cast<int>(std::lround(0.25 * static_cast<double>(sources.size())));
  echo_config(out, "synth",
              {{"clean", a.clean.empty() ? json(nullptr) : json(a.clean)},
               {"procedural", a.procedural},
               {"size", a.size},
               {"depth", a.depth.empty() ? json(nullptr) : json(a.depth)},
               {"depth_range", a.depth_range},
               {"per_image", a.per_image},
               {"seed", a.seed},
               {"test_clean", test_clean},
               {"per_channel_atmosphere", a.per_channel},
               {"out", out_dir.string()}});

  data::SynthesisOptions opts;
  opts.settings_per_image = a.per_image;
  opts.seed = a.seed;
  opts.per_channel_atmosphere = a.per_channel;
  const auto samples = data::synthesize_dataset(sources, opts);
  const auto split = data::split_by_clean_image(samples, test_clean, a.seed);
  const auto manifest = data::write_dataset(out_dir, split, {a.seed, a.per_image, a.per_channel});

  double a_lo = 1e9, a_hi = -1e9, b_lo = 1e9, b_hi = -1e9;
  for (const auto& s : samples) {
    for (double v : s.params.atmospheric_light) a_lo = std::min(a_lo, v), a_hi = std::max(a_hi, v);
    b_lo = std::min(b_lo, s.params.beta);
    b_hi = std::max(b_hi, s.params.beta);
  }
  out << "clean images: " << sources.size() << "\n"
      << "samples: " << samples.size() << " (train " << split.train.size() << ", test " << split.test.size()
      << ")\n"
      << "atmospheric light range: [" << a_lo << ", " << a_hi << "]\n"
      << "beta range: [" << b_lo << ", " << b_hi << "]\n"
      << "manifest: " << manifest.string() << "\n"
      << "manifest hash: " << file_hash(manifest) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config, out, resume, variant, manifest, unlabeled, validation, preset;
  std::optional<int64_t> t_max, batch_size, crop_size, checkpoint_every, validate_every;
  std::optional<std::uint64_t> seed;
};

RunConfig resolve_run_config(const TrainArgs& a) {
  json j = a.config.empty() ? json::object() : read_json_file(a.config);
  if (!a.resume.empty()) {
    try {
      j = train::read_checkpoint_config(a.resume).at("run");
    } catch (const train::CheckpointError& e) {
      throw UsageError(e.what());
    }
  }
  auto& data = j["data"];
  if (!data.is_object()) data = json::object();
  if (!a.manifest.empty()) data["labeled_manifest"] = a.manifest;
  if (!a.unlabeled.empty()) data["unlabeled_dir"] = a.unlabeled;
  if (!a.validation.empty()) data["validation_manifest"] = a.validation;
  auto& tr = j["train"];
  if (!tr.is_object()) tr = json::object();
  if (a.resume.empty()) {
    if (a.t_max) tr["t_max"] = *a.t_max;
    if (a.batch_size) tr["batch_size"] = *a.batch_size;
    if (a.crop_size) tr["crop_size"] = *a.crop_size;
    if (a.seed) tr["seed"] = *a.seed;
    if (!a.variant.empty()) j["variant"] = a.variant;
    if (!a.preset.empty()) {
      auto& w = j["weights"];
      w = json{{"preset", a.preset}};
    }
  }
  if (a.checkpoint_every) j["checkpoint_every"] = *a.checkpoint_every;
  if (a.validate_every) j["validate_every"] = *a.validate_every;
  try {
    auto rc = run_config_from_json(j);
    if (rc.data.labeled_manifest.empty()) throw UsageError("no labeled manifest given (--manifest)");
    if (!fs::exists(rc.data.labeled_manifest)) {
      throw UsageError("labeled manifest not found: " + rc.data.labeled_manifest.string());
    }
    if (rc.data.unlabeled_dir && !fs::is_directory(*rc.data.unlabeled_dir)) {
      throw UsageError("unlabeled directory not found: " + rc.data.unlabeled_dir->string());
    }
    return rc;
  } catch (const json::exception& e) {
    throw UsageError(std::string("invalid run config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("invalid run config: ") + e.what());
  }
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  if (!a.resume.empty() && !fs::exists(a.resume)) {
    throw UsageError("checkpoint not found: " + a.resume);
  }
  const auto rc = resolve_run_config(a);
  const auto out_dir = resolve_out(a.out, "train");
  echo_config(out, "train", to_json(rc));

  train::TrainingData data;
  data.labeled = data::load_manifest(rc.data.labeled_manifest, {.split = std::string("train")});
  if (data.labeled.empty()) throw UsageError("labeled manifest has no training samples");
  if (rc.train.use_unlabeled) {
    if (rc.data.unlabeled_dir) data.unlabeled = data::load_unlabeled_dir(*rc.data.unlabeled_dir);
    if (data.unlabeled.empty()) {
      err << "warning: variant 'full' without unlabeled images; consistency loss inactive\n";
    }
  }
  std::vector<data::LabeledSample> validation;
  if (rc.data.validation_manifest) {
    validation = data::load_manifest(*rc.data.validation_manifest, {.split = std::string("test")});
  }

  auto state = a.resume.empty() ? train::TrainState(make_train_setup(rc)) : train::TrainState::load(a.resume);
  if (a.resume.empty() && rc.encoder_weights) {
    net::load_encoder_weights(*state.student(), *rc.encoder_weights);
    state.sync_teacher();
  }

  fs::create_directories(out_dir / "checkpoints");
  std::ofstream log(out_dir / "train_log.jsonl", a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot open training log in " + out_dir.string());
  log << json{{"event", "config"}, {"iteration", state.iteration()}, {"config", to_json(rc)}}.dump() << "\n";

  fs::path last_checkpoint;
  train::TrainHooks hooks;
  hooks.checkpoint_every = rc.checkpoint_every > 0 ? rc.checkpoint_every : std::max<int64_t>(1, state.t_max());
  hooks.checkpoint = [&](const train::TrainState& s) {
    char name[64];
    std::snprintf(name, sizeof name, "iter_%06lld.pt", static_cast<long long>(s.iteration()));
    last_checkpoint = out_dir / "checkpoints" / name;
    s.save(last_checkpoint);
    log << json{{"event", "checkpoint"}, {"iteration", s.iteration()}, {"path", last_checkpoint.string()}}.dump()
        << "\n";
  };
  hooks.on_step = [&](const loss::LossBreakdown& bd, const train::TrainState& s) {
    if (rc.log_every > 0 && s.iteration() % rc.log_every == 0) {
      auto row = bd.to_json();
      row["iteration"] = s.iteration();
      log << row.dump() << "\n";
    }
  };
  if (!validation.empty() && rc.validate_every > 0) {
    hooks.validate_every = rc.validate_every;
    hooks.validate = [&](const train::TrainState& s) {
      auto model = s.student();
      const auto report = metrics::evaluate_samples(
          validation, [&](const data::LabeledSample& x) { return train::dehaze(model, x.hazy); });
      log << json{{"event", "validation"},
                  {"iteration", s.iteration()},
                  {"mean_psnr", report.mean_psnr},
                  {"mean_ssim", report.mean_ssim}}
                 .dump()
          << "\n";
      out << "iteration " << s.iteration() << ": validation PSNR " << report.mean_psnr << " dB, SSIM "
          << report.mean_ssim << "\n";
    };
  }

  train::train_loop(state, data, rc.weights, hooks);
  out << "trained to iteration " << state.iteration() << "\n";
  if (!last_checkpoint.empty()) out << "checkpoint: " << last_checkpoint.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- dehaze

struct DehazeArgs {
  std::string ckpt, input, out, gt;
  bool panel = false;
  bool strict = false;
};

int cmd_dehaze(const DehazeArgs& a, std::ostream& out, std::ostream& err) {
  if (!fs::exists(a.ckpt)) throw UsageError("checkpoint not found: " + a.ckpt);
  if (!fs::exists(a.input)) throw UsageError("input not found: " + a.input);
  if (!a.gt.empty() && !fs::is_directory(a.gt)) throw UsageError("ground-truth directory not found: " + a.gt);
  const auto out_dir = resolve_out(a.out, "dehaze");
  echo_config(out, "dehaze",
              {{"ckpt", a.ckpt}, {"input", a.input}, {"out", out_dir.string()}, {"panel", a.panel},
               {"gt", a.gt.empty() ? json(nullptr) : json(a.gt)}, {"strict", a.strict}});

  std::vector<fs::path> inputs =
      fs::is_directory(a.input) ? io::list_images(a.input) : std::vector<fs::path>{fs::path(a.input)};
  std::map<std::string, fs::path> gt_by_stem;
  if (!a.gt.empty()) {
    for (const auto& p : io::list_images(a.gt)) gt_by_stem[p.stem().string()] = p;
  }
  auto model = train::load_student(a.ckpt);
  int written = 0, failed = 0;
  for (const auto& path : inputs) {
    torch::Tensor hazy;
    try {
      hazy = io::read_image(path, 3);
    } catch (const io::ImageReadError& e) {
      err << "warning: skipping " << path.string() << ": " << e.what() << "\n";
      ++failed;
      continue;
    }
    if (hazy.size(1) < 32 || hazy.size(2) < 32) {
      err << "warning: skipping " << path.string() << ": smaller than 32x32\n";
      ++failed;
      continue;
    }
    const auto result = train::dehaze(model, hazy);
    io::write_image(out_dir / (path.stem().string() + ".png"), result);
    if (a.panel) {
      std::vector<torch::Tensor> tiles{hazy, result};
      if (auto it = gt_by_stem.find(path.stem().string()); it != gt_by_stem.end()) {
        auto gt = io::read_image(it->second, 3);
        if (gt.sizes() == hazy.sizes()) tiles.push_back(gt);
      }
      io::write_image(out_dir / "panels" / (path.stem().string() + "_panel.png"), io::side_by_side(tiles));
    }
    ++written;
  }
  out << "dehazed " << written << " image(s), skipped " << failed << "\n";
  return a.strict && failed > 0 ? kExitRuntime : kExitOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string ckpt, manifest, out, split = "test";
  bool baseline_noop = false;
  bool quantized = false;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  if (!a.baseline_noop && (a.ckpt.empty() || !fs::exists(a.ckpt))) {
    throw UsageError("checkpoint not found: " + (a.ckpt.empty() ? std::string("(none given)") : a.ckpt));
  }
  if (!fs::exists(a.manifest)) throw UsageError("manifest not found: " + a.manifest);
  if (a.split != "train" && a.split != "test" && a.split != "all") {
    throw UsageError("--split must be train, test or all");
  }
  const auto out_dir = resolve_out(a.out, "eval");
  metrics::EvalOptions opts;
  opts.split = a.split == "all" ? std::nullopt : std::optional<std::string>(a.split);
  opts.baseline_noop = a.baseline_noop;
  opts.quantize = a.quantized;
  echo_config(out, "eval",
              {{"ckpt", a.ckpt}, {"manifest", a.manifest}, {"split", a.split}, {"baseline_noop", a.baseline_noop},
               {"quantized", a.quantized}, {"out", out_dir.string()}});
  metrics::EvalReport report;
  try {
    report = metrics::evaluate_dataset(a.ckpt, a.manifest, opts);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  report.write(out_dir);
  out << "scored " << report.scored << " sample(s), flagged " << report.flagged << "\n"
      << "mean PSNR: " << report.mean_psnr << " dB\n"
      << "mean SSIM: " << report.mean_ssim << "\n"
      << "report: " << (out_dir / "report.json").string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- inspect

struct InspectArgs {
  std::string ckpt, config, variant;
};

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  if (a.ckpt.empty() == a.config.empty()) throw UsageError("inspect needs exactly one of --ckpt or --config");
  net::NetworkConfig network;
  if (!a.ckpt.empty()) {
    if (!fs::exists(a.ckpt)) throw UsageError("checkpoint not found: " + a.ckpt);
    auto cfg = train::read_checkpoint_config(a.ckpt);
    network = net::network_config_from_json(cfg.at("network"));
    echo_config(out, "inspect", cfg);
  } else {
    auto j = read_json_file(a.config);
    if (!a.variant.empty()) j["variant"] = a.variant;
    if (!j.contains("train")) j["train"] = json{{"t_max", 1}};
    try {
      network = run_config_from_json(j).network;
    } catch (const std::exception& e) {
      throw UsageError(std::string("invalid config: ") + e.what());
    }
    echo_config(out, "inspect", {{"network", net::to_json(network)}});
  }
  net::DidNet model(network);
  if (!a.ckpt.empty()) model = train::load_student(a.ckpt);
  const auto counts = net::parameter_counts_by_submodule(*model);
  for (const auto& [name, n] : counts) {
    out << std::left << std::setw(16) << name << n << "\n";
  }
  out << std::left << std::setw(16) << "total" << net::parameter_count(*model) << "\n";
  return kExitOk;
}

}  // namespace

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::uint64_t h = 14695981039346656037ULL;
  char buf[4096];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"disentangled mean-teacher single-image dehazing", "dmtnet"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Synthesize a labeled hazy dataset");
  synth->add_option("--clean", sa.clean, "Directory of clean images");
  synth->add_option("--procedural", sa.procedural, "Generate N procedural clean images instead of --clean");
  synth->add_option("--size", sa.size, "Side of procedural images")->capture_default_str();
  synth->add_option("--depth", sa.depth, "Directory of depth maps matched by file stem");
  synth->add_option("--depth-range", sa.depth_range, "Depth value of a saturated 16-bit PNG")->capture_default_str();
  synth->add_option("--out", sa.out, "Output directory");
  synth->add_option("--per-image", sa.per_image, "Haze settings per clean image")->capture_default_str();
  synth->add_option("--seed", sa.seed, "Random seed")->capture_default_str();
  synth->add_option("--test-clean", sa.test_clean, "Clean images held out for the test split (default 25%)");
  synth->add_flag("--per-channel-atmosphere", sa.per_channel, "Sample atmospheric light per color channel");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train the network");
  trn->add_option("--config", ta.config, "Run config JSON");
  trn->add_option("--out", ta.out, "Output directory for log and checkpoints");
  trn->add_option("--resume", ta.resume, "Continue from a checkpoint");
  trn->add_option("--variant", ta.variant, "basic | basic+stage1 | basic+two-stages | full");
  trn->add_option("--manifest", ta.manifest, "Labeled dataset manifest");
  trn->add_option("--unlabeled", ta.unlabeled, "Directory of unlabeled hazy images");
  trn->add_option("--validation", ta.validation, "Manifest whose test split is used for validation");
  trn->add_option("--weights-preset", ta.preset, "default | M1 | M2 | M3 | M4 | table-ours");
  trn->add_option("--t-max", ta.t_max, "Total iterations");
  trn->add_option("--batch-size", ta.batch_size, "Batch size (labeled + unlabeled)");
  trn->add_option("--crop-size", ta.crop_size, "Training crop side");
  trn->add_option("--seed", ta.seed, "Random seed");
  trn->add_option("--checkpoint-every", ta.checkpoint_every, "Checkpoint interval (0: end only)");
  trn->add_option("--validate-every", ta.validate_every, "Validation interval");

  DehazeArgs da;
  auto* dhz = app.add_subcommand("dehaze", "Dehaze an image or a directory of images");
  dhz->add_option("--ckpt", da.ckpt, "Checkpoint")->required();
  dhz->add_option("--input", da.input, "Image file or directory")->required();
  dhz->add_option("--out", da.out, "Output directory");
  dhz->add_option("--gt", da.gt, "Directory of ground-truth images for panels");
  dhz->add_flag("--panel", da.panel, "Also write input|output|gt panels");
  dhz->add_flag("--strict", da.strict, "Exit with 1 if any input cannot be read");

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "Score a checkpoint on a dataset manifest");
  evl->add_option("--ckpt", ea.ckpt, "Checkpoint");
  evl->add_option("--manifest", ea.manifest, "Dataset manifest")->required();
  evl->add_option("--out", ea.out, "Report directory");
  evl->add_option("--split", ea.split, "train | test | all")->capture_default_str();
  evl->add_flag("--baseline-noop", ea.baseline_noop, "Score the hazy inputs themselves");
  evl->add_flag("--quantized", ea.quantized, "Score after 8-bit quantization");

  InspectArgs ia;
  auto* insp = app.add_subcommand("inspect", "Parameter counts per submodule");
  insp->add_option("--ckpt", ia.ckpt, "Checkpoint");
  insp->add_option("--config", ia.config, "Run config JSON");
  insp->add_option("--variant", ia.variant, "Variant override for --config");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(sa, out);
    if (trn->parsed()) return cmd_train(ta, out, err);
    if (dhz->parsed()) return cmd_dehaze(da, out, err);
    if (evl->parsed()) return cmd_eval(ea, out);
    if (insp->parsed()) return cmd_inspect(ia, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace dmtnet::cli
