#include "dmtnet/trainer.hpp"

#include <cmath>
#include <sstream>

#include "dmtnet/haze_physics.hpp"

namespace dmtnet::train {
namespace F = torch::nn::functional;
using nlohmann::json;

namespace {

constexpr const char* kFormat = "dmtnet.checkpoint";

json full_config(const TrainSetup& s) {
  return {{"network", net::to_json(s.network)},
          {"schedule", to_json(s.schedule)},
          {"train", to_json(s.options)},
          {"run", s.snapshot}};
}

std::string read_string(torch::serialize::InputArchive& archive, const std::string& key) {
  c10::IValue v;
  if (!archive.try_read(key, v) || !v.isString()) {
    throw CheckpointError("checkpoint entry '" + key + "' missing or malformed");
  }
  return v.toStringRef();
}

int64_t read_int(torch::serialize::InputArchive& archive, const std::string& key) {
  c10::IValue v;
  if (!archive.try_read(key, v) || !v.isInt()) {
    throw CheckpointError("checkpoint entry '" + key + "' missing or malformed");
  }
  return v.toInt();
}

torch::serialize::InputArchive open_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw CheckpointError("checkpoint not found: " + path.string());
  }
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw CheckpointError("cannot read checkpoint " + path.string());
  }
  if (read_string(archive, "format") != kFormat || read_int(archive, "version") != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint format in " + path.string());
  }
  return archive;
}

TrainSetup setup_from_config(const json& config) {
  TrainSetup s;
  s.network = net::network_config_from_json(config.at("network"));
  s.schedule = schedule_from_json(config.at("schedule"));
  s.options = train_options_from_json(config.at("train"));
  s.snapshot = config.value("run", json::object());
  return s;
}

void load_module(torch::nn::Module& module, torch::serialize::InputArchive& archive, const std::string& key) {
  torch::serialize::InputArchive sub;
  if (!archive.try_read(key, sub)) {
    throw CheckpointError("checkpoint lacks '" + key + "' parameters");
  }
  module.load(sub);
}

double scalar(const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; }

}  // namespace

void Schedule::validate() const {
  if (!(lr0 > 0.0)) throw std::invalid_argument("schedule: lr0 must be positive");
  if (!(power >= 0.0)) throw std::invalid_argument("schedule: power must be non-negative");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw std::invalid_argument("schedule: ema_decay must be in [0,1)");
}

void TrainOptions::validate() const {
  if (t_max < 0) throw std::invalid_argument("train: t_max must be >= 0");
  if (batch_size < 2 || batch_size % 2 != 0) throw std::invalid_argument("train: batch_size must be even and >= 2");
  if (crop_size < 32) throw std::invalid_argument("train: crop_size must be >= 32");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("train: noise_sigma must be >= 0");
}

json to_json(const Schedule& s) {
  return {{"lr0", s.lr0},           {"power", s.power},           {"ema_decay", s.ema_decay},
          {"adam_beta1", s.adam_beta1}, {"adam_beta2", s.adam_beta2}, {"adam_eps", s.adam_eps}};
}

Schedule schedule_from_json(const json& j) {
  Schedule s;
  s.lr0 = j.value("lr0", s.lr0);
  s.power = j.value("power", s.power);
  s.ema_decay = j.value("ema_decay", s.ema_decay);
  s.adam_beta1 = j.value("adam_beta1", s.adam_beta1);
  s.adam_beta2 = j.value("adam_beta2", s.adam_beta2);
  s.adam_eps = j.value("adam_eps", s.adam_eps);
  s.validate();
  return s;
}

json to_json(const TrainOptions& o) {
  json j = {{"t_max", o.t_max},
            {"batch_size", o.batch_size},
            {"crop_size", o.crop_size},
            {"noise_sigma", o.noise_sigma},
            {"symmetric_noise", o.symmetric_noise},
            {"use_unlabeled", o.use_unlabeled},
            {"seed", o.seed},
            {"deterministic", o.deterministic}};
  j["mu_override"] = o.mu_override ? json(*o.mu_override) : json(nullptr);
  return j;
}

TrainOptions train_options_from_json(const json& j) {
  if (!j.contains("t_max")) {
    throw std::invalid_argument("train: t_max is required");
  }
  TrainOptions o;
  o.t_max = j.at("t_max").get<int64_t>();
  o.batch_size = j.value("batch_size", o.batch_size);
  o.crop_size = j.value("crop_size", o.crop_size);
  o.noise_sigma = j.value("noise_sigma", o.noise_sigma);
  o.symmetric_noise = j.value("symmetric_noise", o.symmetric_noise);
  o.use_unlabeled = j.value("use_unlabeled", o.use_unlabeled);
  o.seed = j.value("seed", o.seed);
  o.deterministic = j.value("deterministic", o.deterministic);
  if (j.contains("mu_override") && !j.at("mu_override").is_null()) {
    o.mu_override = j.at("mu_override").get<double>();
  }
  o.validate();
  return o;
}

double poly_lr(int64_t t, int64_t t_max, const Schedule& schedule) {
  if (t_max <= 0 || t < 0 || t > t_max) {
    throw std::invalid_argument("poly_lr: need 0 <= t <= t_max and t_max > 0");
  }
  return schedule.lr0 * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(t_max), schedule.power);
}

void ema_update(torch::nn::Module& teacher, const torch::nn::Module& student, double decay) {
  if (!(decay >= 0.0 && decay < 1.0)) {
    throw std::invalid_argument("ema_update: decay must be in [0,1)");
  }
  torch::NoGradGuard guard;
  auto teacher_params = teacher.named_parameters(true);
  const auto student_params = student.named_parameters(true);
  for (const auto& item : teacher_params) {
    const auto* source = student_params.find(item.key());
    if (source == nullptr) {
      throw std::invalid_argument("ema_update: student has no parameter '" + item.key() + "'");
    }
    if (source->sizes() != item.value().sizes()) {
      throw std::invalid_argument("ema_update: shape mismatch at '" + item.key() + "'");
    }
  }
  if (student_params.size() != teacher_params.size()) {
    for (const auto& item : student_params) {
      if (teacher_params.find(item.key()) == nullptr) {
        throw std::invalid_argument("ema_update: teacher has no parameter '" + item.key() + "'");
      }
    }
  }
  for (auto& item : teacher_params) {
    item.value().lerp_(student_params[item.key()], 1.0 - decay);
  }
}

// ---------------------------------------------------------------- state

TrainState::TrainState(TrainSetup setup) : setup_(std::move(setup)) {
  setup_.network.validate();
  setup_.schedule.validate();
  setup_.options.validate();
  if (setup_.options.deterministic) {
    at::globalContext().setDeterministicAlgorithms(true, false);
  }
  torch::manual_seed(setup_.options.seed);
  student_ = net::DidNet(setup_.network);
  teacher_ = net::DidNet(setup_.network);
  net::copy_parameters(*teacher_, *student_);
  for (auto& p : teacher_->parameters()) p.set_requires_grad(false);

  const auto& s = setup_.schedule;
  optimizer_ = std::make_unique<torch::optim::Adam>(
      student_->parameters(),
      torch::optim::AdamOptions(s.lr0).betas({s.adam_beta1, s.adam_beta2}).eps(s.adam_eps));
  rng_.seed(setup_.options.seed);
  record_teacher_versions();
}

void TrainState::sync_teacher() {
  torch::NoGradGuard guard;
  net::copy_parameters(*teacher_, *student_);
  record_teacher_versions();
}

void TrainState::record_teacher_versions() {
  teacher_versions_.clear();
  for (const auto& p : teacher_->parameters()) teacher_versions_.push_back(p._version());
  ema_updates_ = 0;
}

bool TrainState::teacher_only_ema_mutated() const {
  const auto params = teacher_->parameters();
  if (params.size() != teacher_versions_.size()) return false;
  for (size_t i = 0; i < params.size(); ++i) {
    if (static_cast<int64_t>(params[i]._version()) != teacher_versions_[i] + ema_updates_) return false;
  }
  return true;
}

void TrainState::apply_ema() {
  ema_update(*teacher_, *student_, setup_.schedule.ema_decay);
  ++ema_updates_;
}

void TrainState::save(const std::filesystem::path& path) const {
  torch::serialize::OutputArchive archive;
  archive.write("format", c10::IValue(std::string(kFormat)));
  archive.write("version", c10::IValue(static_cast<int64_t>(kCheckpointVersion)));
  archive.write("config", c10::IValue(full_config(setup_).dump()));
  archive.write("iteration", c10::IValue(t_));
  std::ostringstream rng_state;
  rng_state << rng_;
  archive.write("rng", c10::IValue(rng_state.str()));

  torch::serialize::OutputArchive student_archive, teacher_archive, optimizer_archive;
  student_->save(student_archive);
  teacher_->save(teacher_archive);
  optimizer_->save(optimizer_archive);
  archive.write("student", student_archive);
  archive.write("teacher", teacher_archive);
  archive.write("optimizer", optimizer_archive);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  try {
    archive.save_to(tmp);
  } catch (const c10::Error& e) {
    throw CheckpointError("failed to write checkpoint " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw CheckpointError("failed to move checkpoint into place at " + path.string() + ": " + ec.message());
  }
}

TrainState TrainState::load(const std::filesystem::path& path) {
  auto archive = open_checkpoint(path);
  TrainState state(setup_from_config(json::parse(read_string(archive, "config"))));
  load_module(*state.student_, archive, "student");
  load_module(*state.teacher_, archive, "teacher");
  for (auto& p : state.teacher_->parameters()) p.set_requires_grad(false);
  torch::serialize::InputArchive optimizer_archive;
  if (!archive.try_read("optimizer", optimizer_archive)) {
    throw CheckpointError("checkpoint lacks optimizer state");
  }
  state.optimizer_->load(optimizer_archive);
  state.t_ = read_int(archive, "iteration");
  std::istringstream rng_state(read_string(archive, "rng"));
  rng_state >> state.rng_;
  state.record_teacher_versions();
  return state;
}

// ---------------------------------------------------------------- step

loss::LossBreakdown train_step(TrainState& state, const data::MixedBatch& batch, const loss::LossWeights& weights) {
  const auto& opts = state.setup_.options;
  const auto t = state.t_;
  if (t >= opts.t_max) {
    throw std::logic_error("train_step: iteration budget exhausted");
  }
  if (batch.labeled.empty() && batch.unlabeled.empty()) {
    throw std::invalid_argument("train_step: empty batch");
  }
  const double lr = poly_lr(t, opts.t_max, state.setup_.schedule);
  for (auto& group : state.optimizer_->param_groups()) {
    static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
  }
  const double mu = opts.mu_override.value_or(loss::rampup_weight(t, opts.t_max, weights.mu_max));

  auto& student = state.student_;
  const auto dtype = student->parameters().front().scalar_type();
  student->train();

  loss::LossBreakdown bd;
  bd.mu = mu;
  torch::Tensor supervised_sum, consistency_sum;

  if (!batch.labeled.empty()) {
    const auto lt = data::stack_labeled(batch.labeled);
    const auto out = student->forward(lt.hazy.to(dtype));
    const loss::GroundTruth gt{lt.clean.to(dtype), lt.transmission.to(dtype), lt.atmosphere.to(dtype)};
    const auto terms = loss::supervised_disentangled(out, gt, weights);
    const auto rec = out.has_physics()
                         ? loss::reconstruction_loss(lt.hazy.to(dtype), out.recon_coarse, out.recon_refined)
                         : torch::zeros({}, terms.dst.options());
    const auto n = static_cast<double>(batch.labeled.size());
    supervised_sum = n * loss::supervised_total(terms.dst, rec, weights);
    bd.n_labeled = static_cast<int64_t>(batch.labeled.size());
    bd.l_j = scalar(terms.l_j);
    bd.l_t = scalar(terms.l_t);
    bd.l_a = scalar(terms.l_a);
    bd.l_rec = scalar(rec);
    bd.dst = scalar(terms.dst);
  }

  if (!batch.unlabeled.empty() && opts.use_unlabeled) {
    const auto hazy = data::stack_unlabeled(batch.unlabeled).to(dtype);
    const auto student_in =
        opts.symmetric_noise ? data::perturb_with_noise(hazy, opts.noise_sigma, state.rng_) : hazy;
    const auto teacher_in = data::perturb_with_noise(hazy, opts.noise_sigma, state.rng_);
    const auto s_out = student->forward(student_in);
    net::DidNetOutput t_out;
    {
      torch::NoGradGuard no_grad;
      state.teacher_->eval();
      t_out = state.teacher_->forward(teacher_in);
    }
    const auto terms = loss::consistency_loss(s_out, t_out, weights);
    consistency_sum = static_cast<double>(batch.unlabeled.size()) * terms.total;
    bd.n_unlabeled = static_cast<int64_t>(batch.unlabeled.size());
    bd.c_j = scalar(terms.c_j);
    bd.c_t = scalar(terms.c_t);
    bd.c_a = scalar(terms.c_a);
    bd.c_rec = scalar(terms.c_rec);
  }

  if (!supervised_sum.defined()) {
    supervised_sum = torch::zeros({}, torch::TensorOptions().dtype(dtype));
  }
  const auto total = loss::total_loss(supervised_sum, consistency_sum, mu);
  bd.supervised_total = scalar(supervised_sum);
  bd.consistency_total = scalar(consistency_sum);
  bd.grand_total = scalar(total);
  if (!bd.all_finite()) {
    throw NonFiniteLossError("non-finite loss at iteration " + std::to_string(t) + ": " + bd.to_json().dump(),
                             bd);
  }

  state.optimizer_->zero_grad();
  total.backward();
  state.optimizer_->step();
  state.apply_ema();
  ++state.t_;
  return bd;
}

data::MixedBatch next_batch(TrainState& state, const TrainingData& data) {
  const auto& opts = state.setup().options;
  if (opts.use_unlabeled && !data.unlabeled.empty()) {
    return data::make_mixed_batch(data.labeled, data.unlabeled, opts.batch_size, opts.crop_size, state.rng());
  }
  return data::make_labeled_batch(data.labeled, opts.batch_size / 2, opts.crop_size, state.rng());
}

void train_loop(TrainState& state, const TrainingData& data, const loss::LossWeights& weights,
                const TrainHooks& hooks) {
  while (state.iteration() < state.t_max()) {
    const auto batch = next_batch(state, data);
    const auto bd = train_step(state, batch, weights);
    const auto t = state.iteration();
    if (hooks.on_step) hooks.on_step(bd, state);
    if (hooks.validate && hooks.validate_every > 0 && t % hooks.validate_every == 0) {
      hooks.validate(state);
    }
    if (hooks.checkpoint && hooks.checkpoint_every > 0 && t % hooks.checkpoint_every == 0) {
      try {
        hooks.checkpoint(state);
      } catch (const std::exception& first) {
        try {
          hooks.checkpoint(state);
        } catch (const std::exception& second) {
          throw CheckpointError("checkpoint at iteration " + std::to_string(t) +
                                " failed twice: " + second.what());
        }
      }
    }
  }
}

torch::Tensor dehaze(net::DidNet& model, const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) {
    throw std::invalid_argument("dehaze: expected a [3,H,W] image");
  }
  torch::NoGradGuard guard;
  model->eval();
  const auto dtype = model->parameters().front().scalar_type();
  const auto h = image.size(1), w = image.size(2);
  const auto ph = (32 - h % 32) % 32, pw = (32 - w % 32) % 32;
  auto x = image.unsqueeze(0).to(dtype);
  if (ph || pw) {
    x = F::pad(x, F::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReplicate));
  }
  auto out = model->forward(x).refined_j;
  return physics::clip_unit(out.slice(2, 0, h).slice(3, 0, w).squeeze(0)).to(torch::kFloat32).contiguous();
}

torch::Tensor infer(TrainState& state, const torch::Tensor& image) { return dehaze(state.student(), image); }

net::DidNet load_student(const std::filesystem::path& checkpoint) {
  auto archive = open_checkpoint(checkpoint);
  const auto config = json::parse(read_string(archive, "config"));
  net::DidNet model(net::network_config_from_json(config.at("network")));
  load_module(*model, archive, "student");
  model->eval();
  return model;
}

json read_checkpoint_config(const std::filesystem::path& checkpoint) {
  auto archive = open_checkpoint(checkpoint);
  return json::parse(read_string(archive, "config"));
}

}  // namespace dmtnet::train
