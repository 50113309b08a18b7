#include "udaseg/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "udaseg/errors.hpp"

namespace udaseg {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& scope,
                const std::set<std::string>& allowed) {
  for (const auto& [key, value] : j.items()) {
    if (allowed.find(key) == allowed.end()) {
      std::string valid;
      for (const auto& k : allowed) valid += (valid.empty() ? "" : ", ") + k;
      throw ConfigError("config: unknown key '" + (scope.empty() ? key : scope + "." + key) +
                        "' (valid: " + valid + ")");
    }
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void TrainConfig::validate() const {
  if (format_version != 1) throw ConfigError("config: unsupported format_version");
  if (max_iterations < 0) throw ConfigError("config: max_iterations must be >= 0");
  if (eval_interval <= 0) throw ConfigError("config: eval_interval must be > 0");
  if (checkpoint_interval <= 0) throw ConfigError("config: checkpoint_interval must be > 0");
  if (crop_size <= 0) throw ConfigError("config: crop_size must be > 0");
  if (batch_size != 1) throw ConfigError("config: batch_size must be 1");
  if (ema_alpha < 0.0 || ema_alpha >= 1.0) throw ConfigError("config: ema_alpha must be in [0,1)");
  if (optim.lr < 0.0 || optim.min_lr < 0.0) throw ConfigError("config: learning rates must be >= 0");
  if (optim.warmup_iters < 0) throw ConfigError("config: warmup_iters must be >= 0");
  if (pseudo.threshold < 0.0 || pseudo.threshold > 1.0)
    throw ConfigError("config: pseudo.threshold must be in [0,1]");
  if (mix.fraction < 0.0 || mix.fraction > 1.0)
    throw ConfigError("config: mix.fraction must be in [0,1]");
  if (mask.patch_size <= 0) throw ConfigError("config: mask.patch_size must be > 0");
  if (mask.ratio < 0.0 || mask.ratio > 1.0) throw ConfigError("config: mask.ratio must be in [0,1]");
  if (!(contrastive.temperature > 0.0))
    throw ConfigError("config: contrastive.temperature must be > 0");
  if (contrastive.max_anchors_per_class < 1 || contrastive.max_pixels_total < 1)
    throw ConfigError("config: contrastive caps must be >= 1");
  if (lambda_pix < 0.0) throw ConfigError("config: lambda_pix must be >= 0");
}

TrainConfig parse_train_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: parse failure: ") + e.what());
  }

  check_keys(j, "",
             {"format_version", "seed", "max_iterations", "eval_interval", "checkpoint_interval",
              "crop_size", "batch_size", "ema_alpha", "lambda_pix", "optim", "pseudo", "mix",
              "mask", "contrastive", "model", "data", "debug"});

  TrainConfig cfg;
  try {
    get_if(j, "format_version", cfg.format_version);
    get_if(j, "seed", cfg.seed);
    get_if(j, "max_iterations", cfg.max_iterations);
    get_if(j, "eval_interval", cfg.eval_interval);
    get_if(j, "checkpoint_interval", cfg.checkpoint_interval);
    get_if(j, "crop_size", cfg.crop_size);
    get_if(j, "batch_size", cfg.batch_size);
    get_if(j, "ema_alpha", cfg.ema_alpha);
    get_if(j, "lambda_pix", cfg.lambda_pix);

    if (j.contains("optim")) {
      const auto& o = j.at("optim");
      check_keys(o, "optim",
                 {"lr", "warmup_iters", "poly_power", "min_lr", "beta1", "beta2", "eps",
                  "weight_decay", "per_stage_steps"});
      get_if(o, "lr", cfg.optim.lr);
      get_if(o, "warmup_iters", cfg.optim.warmup_iters);
      get_if(o, "poly_power", cfg.optim.poly_power);
      get_if(o, "min_lr", cfg.optim.min_lr);
      get_if(o, "beta1", cfg.optim.beta1);
      get_if(o, "beta2", cfg.optim.beta2);
      get_if(o, "eps", cfg.optim.eps);
      get_if(o, "weight_decay", cfg.optim.weight_decay);
      get_if(o, "per_stage_steps", cfg.optim.per_stage_steps);
    }
    if (j.contains("pseudo")) {
      const auto& p = j.at("pseudo");
      check_keys(p, "pseudo", {"threshold", "confidence_weighting"});
      get_if(p, "threshold", cfg.pseudo.threshold);
      get_if(p, "confidence_weighting", cfg.pseudo.confidence_weighting);
    }
    if (j.contains("mix")) {
      const auto& m = j.at("mix");
      check_keys(m, "mix", {"enabled", "fraction", "prior_guided", "active_groups"});
      get_if(m, "enabled", cfg.mix.enabled);
      get_if(m, "fraction", cfg.mix.fraction);
      get_if(m, "prior_guided", cfg.mix.prior_guided);
      get_if(m, "active_groups", cfg.mix.active_groups);
    }
    if (j.contains("mask")) {
      const auto& m = j.at("mask");
      check_keys(m, "mask", {"enabled", "patch_size", "ratio"});
      get_if(m, "enabled", cfg.mask.enabled);
      get_if(m, "patch_size", cfg.mask.patch_size);
      get_if(m, "ratio", cfg.mask.ratio);
    }
    if (j.contains("contrastive")) {
      const auto& c = j.at("contrastive");
      check_keys(c, "contrastive",
                 {"enabled", "temperature", "max_anchors_per_class", "max_pixels_total",
                  "stages"});
      get_if(c, "enabled", cfg.contrastive_enabled);
      get_if(c, "temperature", cfg.contrastive.temperature);
      get_if(c, "max_anchors_per_class", cfg.contrastive.max_anchors_per_class);
      get_if(c, "max_pixels_total", cfg.contrastive.max_pixels_total);
      if (c.contains("stages")) {
        cfg.contrastive.stages.clear();
        for (const auto& s : c.at("stages").get<std::vector<std::string>>())
          cfg.contrastive.stages.insert(stage_from_string(s));
      }
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      check_keys(m, "model",
                 {"architecture_id", "channels", "strides", "proj_hidden", "embedding_dim"});
      get_if(m, "architecture_id", cfg.model.architecture_id);
      get_if(m, "channels", cfg.model.channels);
      get_if(m, "strides", cfg.model.strides);
      get_if(m, "proj_hidden", cfg.model.proj_hidden);
      get_if(m, "embedding_dim", cfg.model.embedding_dim);
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      check_keys(d, "data", {"root", "taxonomy", "source_split", "target_split", "val_split"});
      get_if(d, "root", cfg.data.root);
      get_if(d, "taxonomy", cfg.data.taxonomy);
      get_if(d, "source_split", cfg.data.source_split);
      get_if(d, "target_split", cfg.data.target_split);
      get_if(d, "val_split", cfg.data.val_split);
    }
    if (j.contains("debug")) {
      const auto& d = j.at("debug");
      check_keys(d, "debug", {"dump_interval"});
      get_if(d, "dump_interval", cfg.debug.dump_interval);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: malformed value: ") + e.what());
  }

  cfg.validate();
  return cfg;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

std::string apply_override(const std::string& json_text, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("--set expects dotted.key=value, got '" + assignment + "'");
  const std::string dotted = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: parse failure: ") + e.what());
  }

  // Value literal: JSON if it parses (numbers, bools, arrays), else a string.
  json parsed_value;
  try {
    parsed_value = json::parse(value);
  } catch (const json::exception&) {
    parsed_value = value;
  }

  json* node = &j;
  std::istringstream path(dotted);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(path, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("--set: empty key");
  for (size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
  (*node)[parts.back()] = parsed_value;

  const std::string out = j.dump();
  parse_train_config(out);  // reject unknown keys / invalid values eagerly
  return out;
}

std::string canonical_config_json(const TrainConfig& cfg) {
  json j;
  j["format_version"] = cfg.format_version;
  j["seed"] = cfg.seed;
  j["max_iterations"] = cfg.max_iterations;
  j["eval_interval"] = cfg.eval_interval;
  j["checkpoint_interval"] = cfg.checkpoint_interval;
  j["crop_size"] = cfg.crop_size;
  j["batch_size"] = cfg.batch_size;
  j["ema_alpha"] = cfg.ema_alpha;
  j["lambda_pix"] = cfg.lambda_pix;
  j["optim"] = {{"lr", cfg.optim.lr},
                {"warmup_iters", cfg.optim.warmup_iters},
                {"poly_power", cfg.optim.poly_power},
                {"min_lr", cfg.optim.min_lr},
                {"beta1", cfg.optim.beta1},
                {"beta2", cfg.optim.beta2},
                {"eps", cfg.optim.eps},
                {"weight_decay", cfg.optim.weight_decay},
                {"per_stage_steps", cfg.optim.per_stage_steps}};
  j["pseudo"] = {{"threshold", cfg.pseudo.threshold},
                 {"confidence_weighting", cfg.pseudo.confidence_weighting}};
  j["mix"] = {{"enabled", cfg.mix.enabled},
              {"fraction", cfg.mix.fraction},
              {"prior_guided", cfg.mix.prior_guided},
              {"active_groups", cfg.mix.active_groups}};
  j["mask"] = {{"enabled", cfg.mask.enabled},
               {"patch_size", cfg.mask.patch_size},
               {"ratio", cfg.mask.ratio}};
  std::vector<std::string> stages;
  for (auto s : cfg.contrastive.stages) stages.push_back(stage_to_string(s));
  j["contrastive"] = {{"enabled", cfg.contrastive_enabled},
                      {"temperature", cfg.contrastive.temperature},
                      {"max_anchors_per_class", cfg.contrastive.max_anchors_per_class},
                      {"max_pixels_total", cfg.contrastive.max_pixels_total},
                      {"stages", stages}};
  j["model"] = {{"architecture_id", cfg.model.architecture_id},
                {"channels", cfg.model.channels},
                {"strides", cfg.model.strides},
                {"proj_hidden", cfg.model.proj_hidden},
                {"embedding_dim", cfg.model.embedding_dim}};
  j["data"] = {{"root", cfg.data.root},
               {"taxonomy", cfg.data.taxonomy},
               {"source_split", cfg.data.source_split},
               {"target_split", cfg.data.target_split},
               {"val_split", cfg.data.val_split}};
  j["debug"] = {{"dump_interval", cfg.debug.dump_interval}};
  return j.dump();  // nlohmann objects iterate in sorted key order
}

std::string config_hash(const TrainConfig& cfg) {
  const std::string s = canonical_config_json(cfg);
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace udaseg
