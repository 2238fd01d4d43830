#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"
#include "dmtnet/losses.hpp"
#include "dmtnet/network.hpp"
#include "dmtnet/trainer.hpp"

namespace dmtnet {

/// Ablation ladder. Each rung adds one ingredient to the previous one:
///   basic            J chain on raw encoder features, labeled data only
///   basic+stage1     + per-factor disentangling and T/A chains
///   basic+two-stages + U-Net refiners
///   full             + unlabeled data through the mean teacher
enum class Variant { basic, basic_stage1, basic_two_stages, full };

Variant parse_variant(std::string_view name);
std::string to_string(Variant v);

struct DataPaths {
  std::filesystem::path labeled_manifest;
  std::optional<std::filesystem::path> unlabeled_dir;
  std::optional<std::filesystem::path> validation_manifest;
};

struct RunConfig {
  DataPaths data;
  net::NetworkConfig network;
  loss::LossWeights weights;
  train::Schedule schedule;
  train::TrainOptions train;
  Variant variant = Variant::full;
  int64_t checkpoint_every = 0;  // 0: only after the last iteration
  int64_t validate_every = 0;
  int64_t log_every = 1;
  std::optional<std::filesystem::path> encoder_weights;

  void validate() const;
};

/// Forces the network/training switches implied by `config.variant`.
void apply_variant(RunConfig& config);

/// Parses a run config; `train.t_max` is required. Missing fields take
/// defaults, and the variant switches are applied.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& config);

train::TrainSetup make_train_setup(const RunConfig& config);

/// Small network for CPU runs: narrow encoder and features, 4/1 RCABs per
/// merge, 8-wide refiners.
net::NetworkConfig desk_network();

}  // namespace dmtnet
