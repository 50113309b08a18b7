#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "udaseg/losses.hpp"
#include "udaseg/model.hpp"

namespace udaseg {

struct OptimConfig {
  double lr = 1e-3;
  int warmup_iters = 100;
  double poly_power = 0.9;
  double min_lr = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  bool per_stage_steps = false;  // one combined step per iteration by default
};

struct PseudoConfig {
  double threshold = 0.968;
  bool confidence_weighting = true;
};

struct MixConfig {
  bool enabled = true;
  double fraction = 0.5;
  bool prior_guided = true;
  // Empty = taxonomy file's default combination.
  std::vector<std::string> active_groups;
};

struct MaskConfig {
  bool enabled = true;
  int patch_size = 16;
  double ratio = 0.7;
};

struct DataConfig {
  std::string root;  // benchmark root containing source/ and target/
  std::string taxonomy;
  std::string source_split = "train";
  std::string target_split = "train";
  std::string val_split = "val";
};

struct DebugConfig {
  int dump_interval = 0;  // 0 = off; else mix/mask strips every N iterations
};

struct TrainConfig {
  int format_version = 1;
  std::uint64_t seed = 7;
  int max_iterations = 3000;
  int eval_interval = 500;
  int checkpoint_interval = 1000;
  int crop_size = 96;
  int batch_size = 1;
  double ema_alpha = 0.999;
  double lambda_pix = 0.1;

  OptimConfig optim;
  PseudoConfig pseudo;
  MixConfig mix;
  MaskConfig mask;
  ContrastiveConfig contrastive;
  bool contrastive_enabled = true;
  ModelConfig model;
  DataConfig data;
  DebugConfig debug;

  void validate() const;  // throws ConfigError
};

// Strict parse: unknown keys anywhere are rejected with the list of valid keys.
TrainConfig parse_train_config(const std::string& json_text);
TrainConfig load_train_config(const std::string& path);

// Applies one `--set dotted.key=value` override onto the JSON text form.
std::string apply_override(const std::string& json_text, const std::string& assignment);

// Canonical serialized form (sorted keys). Equal configs hash equal.
std::string canonical_config_json(const TrainConfig& cfg);
std::string config_hash(const TrainConfig& cfg);  // FNV-1a 64, hex

}  // namespace udaseg
