#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "dmtnet/dataset.hpp"
#include "dmtnet/losses.hpp"
#include "dmtnet/network.hpp"

namespace dmtnet::train {

struct Schedule {
  double lr0 = 1e-4;
  double power = 0.9;
  double ema_decay = 0.99;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

struct TrainOptions {
  int64_t t_max = 0;
  /// Mixed batches hold batch_size/2 labeled + batch_size/2 unlabeled crops;
  /// labeled-only runs use batch_size/2 labeled crops.
  int batch_size = 16;
  int64_t crop_size = 240;
  double noise_sigma = 0.05;
  /// Perturb the student's unlabeled input too (independent noise draw).
  bool symmetric_noise = false;
  bool use_unlabeled = true;
  /// Replaces the ramp-up weight when set.
  std::optional<double> mu_override;
  std::uint64_t seed = 0;
  bool deterministic = true;

  void validate() const;
};

nlohmann::json to_json(const Schedule& s);
Schedule schedule_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainOptions& o);
TrainOptions train_options_from_json(const nlohmann::json& j);

/// lr0 * (1 - t/t_max)^power.
double poly_lr(int64_t t, int64_t t_max, const Schedule& schedule);

/// teacher <- decay*teacher + (1-decay)*student for every parameter, matched
/// by name. Throws naming the first parameter that is missing or misshapen.
void ema_update(torch::nn::Module& teacher, const torch::nn::Module& student, double decay);

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(const std::string& what, loss::LossBreakdown breakdown)
      : std::runtime_error(what), breakdown_(breakdown) {}
  const loss::LossBreakdown& breakdown() const { return breakdown_; }

 private:
  loss::LossBreakdown breakdown_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainSetup {
  net::NetworkConfig network;
  Schedule schedule;
  TrainOptions options;
  /// Opaque run description stored alongside checkpoints.
  nlohmann::json snapshot = nlohmann::json::object();
};

/// Student, EMA teacher, optimizer, iteration counter and the data RNG.
/// The teacher starts as an exact copy of the student and is only ever
/// modified by ema_update.
class TrainState {
 public:
  explicit TrainState(TrainSetup setup);

  net::DidNet& student() { return student_; }
  const net::DidNet& student() const { return student_; }
  net::DidNet& teacher() { return teacher_; }
  const net::DidNet& teacher() const { return teacher_; }
  torch::optim::Adam& optimizer() { return *optimizer_; }

  int64_t iteration() const { return t_; }
  int64_t t_max() const { return setup_.options.t_max; }
  const TrainSetup& setup() const { return setup_; }
  data::Rng& rng() { return rng_; }

  /// True when every teacher parameter's version counter advanced exactly
  /// once per EMA update since construction/load.
  bool teacher_only_ema_mutated() const;
  int64_t ema_updates() const { return ema_updates_; }

  /// Re-copies the student into the teacher, e.g. after loading pretrained
  /// encoder weights into the student before the first step.
  void sync_teacher();

  void save(const std::filesystem::path& path) const;
  static TrainState load(const std::filesystem::path& path);

 private:
  friend loss::LossBreakdown train_step(TrainState&, const data::MixedBatch&, const loss::LossWeights&);
  void record_teacher_versions();
  void apply_ema();

  TrainSetup setup_;
  net::DidNet student_{nullptr};
  net::DidNet teacher_{nullptr};
  std::unique_ptr<torch::optim::Adam> optimizer_;
  int64_t t_ = 0;
  data::Rng rng_;
  std::vector<int64_t> teacher_versions_;
  int64_t ema_updates_ = 0;
};

/// One optimization step: supervised loss on the labeled half, consistency
/// between student (clean input) and teacher (noisy input) on the unlabeled
/// half weighted by the ramp-up, one Adam step on the student, one EMA
/// update of the teacher, t += 1.
loss::LossBreakdown train_step(TrainState& state, const data::MixedBatch& batch, const loss::LossWeights& weights);

struct TrainingData {
  std::vector<data::LabeledSample> labeled;
  std::vector<data::UnlabeledSample> unlabeled;
};

/// Draws the next batch from the state's RNG.
data::MixedBatch next_batch(TrainState& state, const TrainingData& data);

struct TrainHooks {
  int64_t checkpoint_every = 0;
  std::function<void(const TrainState&)> checkpoint;
  int64_t validate_every = 0;
  std::function<void(const TrainState&)> validate;
  std::function<void(const loss::LossBreakdown&, const TrainState&)> on_step;
};

/// Steps until t == t_max. Checkpoint hooks that throw are retried once;
/// a second failure raises CheckpointError with the state left intact.
void train_loop(TrainState& state, const TrainingData& data, const loss::LossWeights& weights,
                const TrainHooks& hooks = {});

/// Student's refined clean prediction for a [3,H,W] image. The input is
/// edge-padded to a multiple of 32 and the result cropped back.
torch::Tensor dehaze(net::DidNet& model, const torch::Tensor& image);
torch::Tensor infer(TrainState& state, const torch::Tensor& image);

/// Student network (with its config) from a checkpoint file.
net::DidNet load_student(const std::filesystem::path& checkpoint);

/// Full configuration JSON stored in a checkpoint.
nlohmann::json read_checkpoint_config(const std::filesystem::path& checkpoint);

inline constexpr int kCheckpointVersion = 1;

}  // namespace dmtnet::train
