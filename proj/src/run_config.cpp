#include "dmtnet/run_config.hpp"

#include <stdexcept>

namespace dmtnet {
using nlohmann::json;

Variant parse_variant(std::string_view name) {
  if (name == "basic") return Variant::basic;
  if (name == "basic+stage1" || name == "basic+StageI") return Variant::basic_stage1;
  if (name == "basic+two-stages") return Variant::basic_two_stages;
  if (name == "full") return Variant::full;
  throw std::invalid_argument("unknown variant '" + std::string(name) +
                              "' (expected basic, basic+stage1, basic+two-stages, full)");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::basic: return "basic";
    case Variant::basic_stage1: return "basic+stage1";
    case Variant::basic_two_stages: return "basic+two-stages";
    case Variant::full: return "full";
  }
  return "full";
}

void RunConfig::validate() const {
  network.validate();
  weights.validate();
  schedule.validate();
  train.validate();
  if (checkpoint_every < 0 || validate_every < 0 || log_every < 0) {
    throw std::invalid_argument("intervals must be non-negative");
  }
}

void apply_variant(RunConfig& c) {
  c.network.disentangle = c.variant != Variant::basic;
  c.network.refine = c.variant == Variant::basic_two_stages || c.variant == Variant::full;
  c.train.use_unlabeled = c.variant == Variant::full;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  if (j.contains("data")) {
    const auto& d = j.at("data");
    c.data.labeled_manifest = d.value("labeled_manifest", std::string());
    if (d.contains("unlabeled_dir") && !d.at("unlabeled_dir").is_null()) {
      c.data.unlabeled_dir = d.at("unlabeled_dir").get<std::string>();
    }
    if (d.contains("validation_manifest") && !d.at("validation_manifest").is_null()) {
      c.data.validation_manifest = d.at("validation_manifest").get<std::string>();
    }
  }
  if (j.contains("network")) c.network = net::network_config_from_json(j.at("network"));
  if (j.contains("weights")) c.weights = loss::loss_weights_from_json(j.at("weights"));
  if (j.contains("schedule")) c.schedule = train::schedule_from_json(j.at("schedule"));
  if (!j.contains("train")) {
    throw std::invalid_argument("run config needs a 'train' section with t_max");
  }
  c.train = train::train_options_from_json(j.at("train"));
  c.variant = parse_variant(j.value("variant", std::string("full")));
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.validate_every = j.value("validate_every", c.validate_every);
  c.log_every = j.value("log_every", c.log_every);
  if (j.contains("encoder_weights") && !j.at("encoder_weights").is_null()) {
    c.encoder_weights = j.at("encoder_weights").get<std::string>();
  }
  apply_variant(c);
  c.validate();
  return c;
}

json to_json(const RunConfig& c) {
  auto opt_path = [](const std::optional<std::filesystem::path>& p) { return p ? json(p->string()) : json(nullptr); };
  return {{"data",
           {{"labeled_manifest", c.data.labeled_manifest.string()},
            {"unlabeled_dir", opt_path(c.data.unlabeled_dir)},
            {"validation_manifest", opt_path(c.data.validation_manifest)}}},
          {"network", net::to_json(c.network)},
          {"weights", loss::to_json(c.weights)},
          {"schedule", train::to_json(c.schedule)},
          {"train", train::to_json(c.train)},
          {"variant", to_string(c.variant)},
          {"checkpoint_every", c.checkpoint_every},
          {"validate_every", c.validate_every},
          {"log_every", c.log_every},
          {"encoder_weights", opt_path(c.encoder_weights)}};
}

train::TrainSetup make_train_setup(const RunConfig& c) {
  return {c.network, c.schedule, c.train, to_json(c)};
}

net::NetworkConfig desk_network() {
  net::NetworkConfig n;
  n.encoder_channels = {16, 24, 32, 48, 64};
  n.feature_channels = 16;
  n.rcabs_jt = 4;
  n.rcabs_a = 1;
  n.rca_reduction = 4;
  n.unet_channels = 8;
  return n;
}

}  // namespace dmtnet
