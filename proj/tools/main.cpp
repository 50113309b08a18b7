#include <exception>
#include <iostream>

#include <CLI11.hpp>

#include "udaseg/cli.hpp"
#include "udaseg/errors.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Domain-adaptive semantic segmentation trainer (teacher-student self-training "
               "with prior-guided class mixing, masked consistency, and pixel contrastive "
               "learning)"};
  app.require_subcommand(1);

  udaseg::GenToyArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-toy", "Generate the synthetic two-domain benchmark");
  gen_cmd->add_option("--out", gen.out, "Output benchmark directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed");
  gen_cmd->add_option("--n-source", gen.n_source, "Source train scenes");
  gen_cmd->add_option("--n-target", gen.n_target, "Target train scenes");
  gen_cmd->add_option("--n-val", gen.n_val, "Target validation scenes");
  gen_cmd->add_option("--shift", gen.shift, "Appearance shift: none|default");
  gen_cmd->add_option("--canvas", gen.canvas, "Scene size in pixels (>= 64)");
  gen_cmd->add_option("--shapes", gen.shapes, "Paired structures per scene");
  gen_cmd->add_option("--hue-deg", gen.hue_deg, "Target hue rotation, degrees");
  gen_cmd->add_option("--noise-sigma", gen.noise_sigma, "Target additive noise sigma");
  gen_cmd->add_option("--brightness", gen.brightness, "Target brightness scale");

  udaseg::TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Run the adaptation training loop");
  train_cmd->add_option("--config", train.config, "Train config JSON")->required();
  train_cmd->add_option("--set", train.overrides, "Override: dotted.key=value (repeatable)");
  std::string train_out, train_resume;
  train_cmd->add_option("--out", train_out, "Run directory (default runs/<ts>-<hash>)");
  train_cmd->add_option("--resume", train_resume, "Checkpoint to resume from");

  udaseg::EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval.data_root, "Domain root (contains <split>/)")->required();
  eval_cmd->add_option("--split", eval.split, "Split name (default val)");
  std::string eval_tax;
  eval_cmd->add_option("--taxonomy", eval_tax, "Taxonomy JSON (default: from dataset.meta)");
  eval_cmd->add_option("--out", eval.out, "Report output directory")->required();
  eval_cmd->add_flag("--allow-train-split", eval.allow_train_split,
                     "Permit evaluating on the train split (prints a warning)");

  udaseg::AblateArgs ablate;
  auto* ablate_cmd = app.add_subcommand("ablate", "Run an ablation grid and render a delta table");
  ablate_cmd->add_option("--config", ablate.config, "Train config JSON")->required();
  ablate_cmd->add_option("--grid", ablate.grid,
                         "components|coarse-groups|contrastive-stages");
  ablate_cmd->add_option("--combo", ablate.combos,
                         "coarse-groups row: comma-joined group names (repeatable)");
  ablate_cmd->add_option("--set", ablate.overrides, "Override applied to every row (repeatable)");
  ablate_cmd->add_option("--out", ablate.out, "Grid output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) {
      const auto dir = udaseg::cmd_gen_toy(gen);
      std::cout << "benchmark written to " << dir.string() << '\n';
    } else if (*train_cmd) {
      if (!train_out.empty()) train.out = train_out;
      if (!train_resume.empty()) train.resume = train_resume;
      const auto dir = udaseg::cmd_train(train);
      std::cout << "run directory: " << dir.string() << '\n';
    } else if (*eval_cmd) {
      if (!eval_tax.empty()) eval.taxonomy = eval_tax;
      const auto dir = udaseg::cmd_eval(eval);
      std::cout << "report written to " << dir.string() << '\n';
    } else if (*ablate_cmd) {
      const auto dir = udaseg::cmd_ablate(ablate);
      std::cout << "ablation grid written to " << dir.string() << '\n';
    }
  } catch (const udaseg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const udaseg::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const udaseg::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
