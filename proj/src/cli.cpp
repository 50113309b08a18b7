#include "udaseg/cli.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "udaseg/config.hpp"
#include "udaseg/data.hpp"
#include "udaseg/errors.hpp"
#include "udaseg/evaluation.hpp"
#include "udaseg/trainer.hpp"

#ifndef UDASEG_REVISION
#define UDASEG_REVISION "unknown"
#endif

namespace udaseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string timestamp_utc() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return buf;
}

void write_toy_taxonomy(const fs::path& path) {
  json j;
  j["format_version"] = 1;
  j["num_classes"] = 6;
  j["ignore_id"] = 255;
  j["names"] = {"ground", "sky", "building", "wall", "tree", "bush"};
  j["coarse_groups"] = {{"flat", {"ground"}},
                        {"sky", {"sky"}},
                        {"construction", {"building", "wall"}},
                        {"nature", {"tree", "bush"}}};
  j["default_active_groups"] = {"construction", "nature"};
  std::ofstream(path) << j.dump(2) << '\n';
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TrainConfig resolve_config(const fs::path& config_path,
                           const std::vector<std::string>& overrides,
                           std::string* canonical_out) {
  std::string text = read_file(config_path);
  parse_train_config(text);  // validate the file before touching it
  for (const auto& assignment : overrides) text = apply_override(text, assignment);
  TrainConfig cfg = parse_train_config(text);
  if (canonical_out) *canonical_out = canonical_config_json(cfg);
  return cfg;
}

struct LoadedBenchmark {
  ClassTaxonomy taxonomy;
  Dataset source, target, val;
};

LoadedBenchmark load_benchmark(const TrainConfig& cfg, const fs::path& config_dir) {
  if (cfg.data.root.empty()) throw ConfigError("config: data.root is required for training");
  fs::path root(cfg.data.root);
  if (root.is_relative()) root = config_dir / root;
  fs::path tax_path(cfg.data.taxonomy.empty() ? (root / "taxonomy.json").string()
                                              : cfg.data.taxonomy);
  if (tax_path.is_relative() && !cfg.data.taxonomy.empty()) tax_path = config_dir / tax_path;
  ClassTaxonomy taxonomy = load_taxonomy(tax_path.string());
  if (!cfg.mix.active_groups.empty())
    taxonomy = taxonomy.with_active_groups(
        {cfg.mix.active_groups.begin(), cfg.mix.active_groups.end()});
  Dataset source = load_dataset(root / "source", cfg.data.source_split, taxonomy);
  Dataset target = load_dataset(root / "target", cfg.data.target_split, taxonomy);
  Dataset val = load_dataset(root / "target", cfg.data.val_split, taxonomy);
  return {std::move(taxonomy), std::move(source), std::move(target), std::move(val)};
}

void write_manifest(const fs::path& out_dir, const std::string& canonical_config,
                    std::uint64_t seed) {
  json j;
  j["format_version"] = 1;
  j["config"] = json::parse(canonical_config);
  j["source_revision"] = UDASEG_REVISION;
  j["seed"] = seed;
  j["start_timestamp"] = timestamp_utc();
  j["layout"] = {{"metrics", "metrics.log"},
                 {"checkpoints", "ckpt/"},
                 {"report", "report/"},
                 {"debug", "debug/"}};
  std::ofstream(out_dir / "manifest.json") << j.dump(2) << '\n';
}

void write_done(const fs::path& out_dir, double final_miou) {
  json j;
  j["end_timestamp"] = timestamp_utc();
  j["final_miou"] = final_miou;
  std::ofstream(out_dir / "done.json") << j.dump(2) << '\n';
}

}  // namespace

fs::path cmd_gen_toy(const GenToyArgs& args) {
  ToyDomainSpec spec;
  spec.canvas = args.canvas;
  spec.num_shapes = args.shapes;
  spec.seed = args.seed;
  if (args.shift == "none") {
    spec.hue_rotation_deg = 0.0;
    spec.noise_sigma = 0.0;
    spec.brightness_scale = 1.0;
  } else if (args.shift == "default") {
    spec.hue_rotation_deg = args.hue_deg;
    spec.noise_sigma = args.noise_sigma;
    spec.brightness_scale = args.brightness;
  } else {
    throw ConfigError("gen-toy: --shift must be none or default");
  }

  fs::create_directories(args.out);
  write_toy_taxonomy(args.out / "taxonomy.json");
  const ClassTaxonomy taxonomy = load_taxonomy((args.out / "taxonomy.json").string());

  const ToyDomains domains = generate_toy_domains(spec, taxonomy, args.n_source, args.n_target);
  const Dataset val = generate_toy_target_split(spec, taxonomy, args.n_val, /*stream_id=*/2);

  write_dataset(domains.source, args.out / "source", "train", "../taxonomy.json",
                /*write_labels=*/true);
  // Target train labels stay on disk for inspection only; training never reads them.
  write_dataset(domains.target, args.out / "target", "train", "../taxonomy.json",
                /*write_labels=*/true);
  write_dataset(val, args.out / "target", "val", "../taxonomy.json", /*write_labels=*/true);
  return args.out;
}

fs::path cmd_train(const TrainArgs& args) {
  std::string canonical;
  const TrainConfig cfg = resolve_config(args.config, args.overrides, &canonical);
  const LoadedBenchmark bench = load_benchmark(cfg, args.config.parent_path());

  fs::path out_dir;
  if (args.out) {
    out_dir = *args.out;
  } else {
    out_dir = fs::path("runs") / (timestamp_utc() + "-" + config_hash(cfg));
  }
  fs::create_directories(out_dir);
  write_manifest(out_dir, canonical, cfg.seed);

  const TrainResult result = train(cfg, bench.source, bench.target, bench.val, out_dir,
                                   args.resume);

  std::vector<NamedReport> reports;
  reports.push_back({"run", result.final_eval, bench.taxonomy.names()});
  render_report(reports, "run", out_dir / "report");
  write_done(out_dir, result.final_eval.miou);
  return out_dir;
}

fs::path cmd_eval(const EvalArgs& args) {
  if (args.split == "train" && !args.allow_train_split)
    throw ConfigError("eval: evaluating on the train split requires --allow-train-split");
  if (args.split == "train")
    std::cerr << "warning: evaluating on the train split; numbers are not held-out\n";

  fs::path tax_path;
  if (args.taxonomy) {
    tax_path = *args.taxonomy;
  } else {
    const fs::path meta_path = args.data_root / "dataset.meta";
    if (!fs::exists(meta_path))
      throw DataError("eval: no --taxonomy given and no dataset.meta under '" +
                      args.data_root.string() + "'");
    json meta;
    std::ifstream(meta_path) >> meta;
    tax_path = args.data_root / meta.at("taxonomy").get<std::string>();
  }
  const ClassTaxonomy taxonomy = load_taxonomy(tax_path.string());
  const Dataset ds = load_dataset(args.data_root, args.split, taxonomy);

  TrainState st = load_checkpoint(args.checkpoint);
  if (st.bundle.config.num_classes != taxonomy.num_classes())
    throw DataError("eval: checkpoint class count does not match the taxonomy");

  EvalReport report = evaluate(st, ds);
  report.num_images = ds.size();

  fs::create_directories(args.out);
  std::vector<NamedReport> reports;
  reports.push_back({"eval", report, taxonomy.names()});
  render_report(reports, "eval", args.out);
  return args.out;
}

namespace {

struct AblateRow {
  std::string label;
  std::vector<std::string> extra_overrides;
};

std::vector<AblateRow> component_rows() {
  return {
      {"PG ClassMix+Contrastive", {"mask.enabled=false"}},
      {"Masking+Contrastive", {"mix.prior_guided=false"}},
      {"Masking+PG ClassMix", {"contrastive.enabled=false"}},
      {"Masking+PG ClassMix+Contrastive", {}},
  };
}

std::vector<AblateRow> stage_rows() {
  return {
      {"Source domain", {R"(contrastive.stages=["source"])"}},
      {"Source domain+Masking", {R"(contrastive.stages=["source","masked"])"}},
      {"Source domain+Mixing", {R"(contrastive.stages=["source","mix"])"}},
      {"Source domain+Mixing+Masking", {R"(contrastive.stages=["source","mix","masked"])"}},
  };
}

std::vector<AblateRow> coarse_group_rows(const std::vector<std::string>& combos,
                                         const ClassTaxonomy& taxonomy) {
  std::vector<std::string> resolved = combos;
  if (resolved.empty()) {
    const auto& groups = taxonomy.coarse_groups();
    const bool cityscapes_style =
        groups.count("flat") && groups.count("nature") && groups.count("object") &&
        groups.count("human_vehicle") && groups.count("construction");
    if (cityscapes_style) {
      resolved = {"flat,nature", "object,human_vehicle", "construction,nature"};
    } else {
      // Fall back to each multi-class group alone plus the default combination.
      std::string default_combo;
      for (const auto& g : taxonomy.active_groups())
        default_combo += (default_combo.empty() ? "" : ",") + g;
      for (const auto& [name, members] : groups)
        if (members.size() >= 2) resolved.push_back(name);
      if (!default_combo.empty()) resolved.push_back(default_combo);
    }
  }
  std::vector<AblateRow> rows;
  for (const auto& combo : resolved) {
    json arr = json::array();
    std::istringstream ss(combo);
    std::string g;
    while (std::getline(ss, g, ',')) arr.push_back(g);
    rows.push_back({combo, {"mix.active_groups=" + arr.dump()}});
  }
  return rows;
}

}  // namespace

fs::path cmd_ablate(const AblateArgs& args) {
  std::string canonical;
  const TrainConfig base_cfg = resolve_config(args.config, args.overrides, &canonical);
  const LoadedBenchmark base_bench = load_benchmark(base_cfg, args.config.parent_path());

  std::vector<AblateRow> rows;
  std::string baseline_label;
  if (args.grid == "components") {
    rows = component_rows();
    baseline_label = "Masking+PG ClassMix+Contrastive";
  } else if (args.grid == "contrastive-stages") {
    rows = stage_rows();
    baseline_label = "Source domain+Mixing+Masking";
  } else if (args.grid == "coarse-groups") {
    rows = coarse_group_rows(args.combos, base_bench.taxonomy);
    baseline_label = rows.back().label;
  } else {
    throw ConfigError("ablate: unknown grid '" + args.grid +
                      "' (components|coarse-groups|contrastive-stages)");
  }

  fs::create_directories(args.out);
  std::vector<NamedReport> reports;
  int row_index = 0;
  for (const auto& row : rows) {
    std::vector<std::string> overrides = args.overrides;
    overrides.insert(overrides.end(), row.extra_overrides.begin(), row.extra_overrides.end());
    const TrainConfig cfg = resolve_config(args.config, overrides, nullptr);
    const LoadedBenchmark bench = load_benchmark(cfg, args.config.parent_path());

    const fs::path run_dir = args.out / ("row_" + std::to_string(row_index++));
    fs::create_directories(run_dir);
    const TrainResult res = train(cfg, bench.source, bench.target, bench.val, run_dir);
    reports.push_back({row.label, res.final_eval, bench.taxonomy.names()});
    std::cout << row.label << "\tmiou=" << res.final_eval.miou << '\n';
  }

  render_report(reports, baseline_label, args.out / "report");
  return args.out;
}

}  // namespace udaseg
