#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace udaseg {

struct GenToyArgs {
  std::filesystem::path out;
  std::uint64_t seed = 7;
  int n_source = 200;
  int n_target = 200;
  int n_val = 40;
  std::string shift = "default";  // none | default
  int canvas = 128;
  int shapes = 4;
  double hue_deg = 30.0;
  double noise_sigma = 0.08;
  double brightness = 0.9;
};

struct TrainArgs {
  std::filesystem::path config;
  std::vector<std::string> overrides;  // dotted.key=value
  std::optional<std::filesystem::path> out;
  std::optional<std::filesystem::path> resume;
};

struct EvalArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path data_root;  // domain root (contains <split>/ and dataset.meta)
  std::string split = "val";
  std::optional<std::filesystem::path> taxonomy;  // default: from dataset.meta
  std::filesystem::path out;
  bool allow_train_split = false;
};

struct AblateArgs {
  std::filesystem::path config;
  std::string grid = "components";  // components | coarse-groups | contrastive-stages
  std::vector<std::string> combos;  // coarse-groups rows; empty = grid default
  std::vector<std::string> overrides;
  std::filesystem::path out;
};

// Each returns the directory it produced. Errors surface as ConfigError /
// DataError / NumericError, mapped to exit codes by the binary.
std::filesystem::path cmd_gen_toy(const GenToyArgs& args);
std::filesystem::path cmd_train(const TrainArgs& args);
std::filesystem::path cmd_eval(const EvalArgs& args);
std::filesystem::path cmd_ablate(const AblateArgs& args);

}  // namespace udaseg
