#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "udaseg/config.hpp"
#include "udaseg/data.hpp"
#include "udaseg/evaluation.hpp"
#include "udaseg/losses.hpp"
#include "udaseg/model.hpp"
#include "udaseg/rng.hpp"

namespace udaseg {

// Adam with linear warmup then polynomial decay.
struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  long step = 0;
};

double scheduled_lr(const OptimConfig& optim, int iteration, int max_iterations);

void adam_step(ParamSet& params, AdamState& state, const OptimConfig& optim, double lr);

// teacher' = alpha * teacher + (1 - alpha) * student, for every shared name.
void ema_update(ParamSet& teacher, const ParamSet& student, double alpha);

struct TrainState {
  ModelBundle bundle;
  long iteration = 0;
  AdamState optimizer;
  RngStream data_rng, mix_rng, mask_rng, contrastive_rng;
  double ema_alpha = 0.999;
  std::string config_hash;

  // Instrumentation for the invariants the spec pins down.
  std::vector<std::string> last_stage_trace;  // stage order of the last iteration
  long teacher_grad_updates_seen = 0;
};

TrainState make_train_state(const TrainConfig& cfg, const ClassTaxonomy& taxonomy);

struct IterationResult {
  LossReport report;
  double confidence = 0.0;  // pseudo-label quality of this iteration
  double lr = 0.0;
};

// One four-stage iteration: EMA sync, source supervision, pseudo-labeling
// (teacher, no gradient bookkeeping), mixed training, masked training, plus
// the configured contrastive terms; one combined optimizer step (or per-stage
// when configured). The target sample's label must be all-ignore: the trainer
// refuses ground-truth-bearing target crops.
IterationResult train_iteration(TrainState& state, const TrainConfig& cfg,
                                const ClassTaxonomy& taxonomy, const SegSample& src,
                                const SegSample& tgt,
                                const std::filesystem::path* debug_dir = nullptr);

struct TrainResult {
  std::filesystem::path checkpoint;  // final checkpoint
  long target_label_reads = 0;       // UDA guard counter at completion
  long teacher_grad_updates = 0;     // must be 0
  EvalReport final_eval;
};

// Full run: writes metrics.log (one JSON line per iteration), periodic
// checkpoints under out_dir/ckpt, and a final EvalReport under
// out_dir/report. `resume_from` restores a checkpoint and continues.
TrainResult train(const TrainConfig& cfg, const Dataset& source, const Dataset& target,
                  const Dataset& val, const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume_from = std::nullopt);

// Evaluates the student on every sample of `val` at full resolution.
EvalReport evaluate(const TrainState& state, const Dataset& val);
LabelMap predict(const ModelBundle& bundle, const ParamSet& params, const Image& image);

// Versioned binary checkpoint: parameters, optimizer state, RNG streams,
// iteration counter, config hash. Round-trips bit-exactly.
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace udaseg
