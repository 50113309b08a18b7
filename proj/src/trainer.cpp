#include "udaseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "udaseg/errors.hpp"
#include "udaseg/masking.hpp"
#include "udaseg/mixing.hpp"

namespace udaseg {

namespace fs = std::filesystem;
using nlohmann::json;

double scheduled_lr(const OptimConfig& optim, int iteration, int max_iterations) {
  if (optim.warmup_iters > 0 && iteration < optim.warmup_iters)
    return optim.lr * static_cast<double>(iteration + 1) / optim.warmup_iters;
  const int decay_span = std::max(1, max_iterations - optim.warmup_iters);
  const double progress =
      std::clamp(static_cast<double>(iteration - optim.warmup_iters) / decay_span, 0.0, 1.0);
  const double factor = std::pow(1.0 - progress, optim.poly_power);
  return optim.min_lr + (optim.lr - optim.min_lr) * factor;
}

void adam_step(ParamSet& params, AdamState& state, const OptimConfig& optim, double lr) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(optim.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(optim.beta2, static_cast<double>(state.step));
  for (auto& [name, value] : params.values) {
    const Tensor& g = params.grad(name);
    auto mit = state.m.find(name);
    if (mit == state.m.end()) {
      state.m.emplace(name, Tensor(value.shape()));
      state.v.emplace(name, Tensor(value.shape()));
      mit = state.m.find(name);
    }
    Tensor& m = mit->second;
    Tensor& v = state.v.at(name);
    for (size_t i = 0; i < value.numel(); ++i) {
      double grad = g[i];
      if (optim.weight_decay > 0.0) grad += optim.weight_decay * value[i];
      m[i] = optim.beta1 * m[i] + (1.0 - optim.beta1) * grad;
      v[i] = optim.beta2 * v[i] + (1.0 - optim.beta2) * grad * grad;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      value[i] -= lr * mhat / (std::sqrt(vhat) + optim.eps);
    }
  }
  ++params.grad_updates;
}

void ema_update(ParamSet& teacher, const ParamSet& student, double alpha) {
  if (alpha < 0.0 || alpha >= 1.0) throw ConfigError("ema_update: alpha must be in [0,1)");
  for (auto& [name, t] : teacher.values) {
    auto it = student.values.find(name);
    if (it == student.values.end())
      throw ConfigError("ema_update: student lacks parameter '" + name + "'");
    const Tensor& s = it->second;
    if (!t.same_shape(s)) throw ConfigError("ema_update: shape mismatch for '" + name + "'");
    for (size_t i = 0; i < t.numel(); ++i) t[i] = alpha * t[i] + (1.0 - alpha) * s[i];
  }
}

TrainState make_train_state(const TrainConfig& cfg, const ClassTaxonomy& taxonomy) {
  TrainState st;
  ModelConfig mc = cfg.model;
  mc.num_classes = taxonomy.num_classes();
  RngStream model_rng(cfg.seed, 100);
  st.bundle = make_model(mc, model_rng);
  st.data_rng = RngStream(cfg.seed, 1);
  st.mix_rng = RngStream(cfg.seed, 2);
  st.mask_rng = RngStream(cfg.seed, 3);
  st.contrastive_rng = RngStream(cfg.seed, 4);
  st.ema_alpha = cfg.ema_alpha;
  st.config_hash = config_hash(cfg);
  return st;
}

namespace {

// Loss-bearing student pass: segmentation CE plus (optionally) the projection
// head's contrastive term, backpropagated through the shared features.
struct StageLosses {
  double ce = 0.0;
  double pix = 0.0;
  bool pix_active = false;
};

StageLosses student_supervised_pass(TrainState& st, const TrainConfig& cfg,
                                    const ClassTaxonomy& taxonomy, const Image& image,
                                    const LabelMap& label, const Tensor* pixel_weight,
                                    ContrastiveStage stage, const char* component) {
  ModelBundle& bundle = st.bundle;
  std::shared_ptr<EncoderCache> enc_cache;
  const FeatureMap f = forward_features(bundle, bundle.student, image, &enc_cache);

  std::shared_ptr<SegCache> seg_cache;
  const Logits logits =
      segment(bundle.config, bundle.student, f, image.dim(0), image.dim(1), &seg_cache);

  Tensor dlogits;
  const ScalarLoss ce =
      cross_entropy(logits.scores, label, taxonomy.ignore_id(), pixel_weight, &dlogits);
  if (!std::isfinite(ce.value))
    throw NumericError(std::string("train_iteration: non-finite ") + component +
                       " at iteration " + std::to_string(st.iteration));

  Tensor dfeat = ce.degenerate
                     ? Tensor(f.features.shape())
                     : segment_backward(bundle.config, bundle.student, bundle.student,
                                        *seg_cache, dlogits);

  StageLosses out;
  out.ce = ce.value;

  const bool want_pix = cfg.contrastive_enabled &&
                        cfg.contrastive.stages.find(stage) != cfg.contrastive.stages.end();
  if (want_pix) {
    std::shared_ptr<ProjCache> proj_cache;
    const EmbeddingMap em = project(bundle.config, bundle.student, f, &proj_cache);
    const LabelMap grid = downsample_labels_nearest(label, em.embeddings.dim(0),
                                                    em.embeddings.dim(1));
    Tensor demb;
    const ScalarLoss pix = contrastive_loss(em.embeddings, grid, taxonomy.ignore_id(),
                                            cfg.contrastive, st.contrastive_rng, &demb);
    if (!std::isfinite(pix.value))
      throw NumericError(std::string("train_iteration: non-finite l_pix(") + component +
                         ") at iteration " + std::to_string(st.iteration));
    out.pix = pix.value;
    out.pix_active = true;
    if (!pix.degenerate && cfg.lambda_pix != 0.0) {
      // d(total)/d(emb) carries the lambda weight; fold into the shared dfeat.
      for (size_t i = 0; i < demb.numel(); ++i) demb[i] *= cfg.lambda_pix;
      const Tensor dfeat_pix =
          project_backward(bundle.config, bundle.student, bundle.student, *proj_cache, demb);
      dfeat.add_scaled(dfeat_pix, 1.0);
    }
  }

  encoder_backward(bundle, bundle.student, bundle.student, *enc_cache, dfeat);
  return out;
}

void maybe_step(TrainState& st, const TrainConfig& cfg, double lr) {
  if (cfg.optim.per_stage_steps) {
    adam_step(st.bundle.student, st.optimizer, cfg.optim, lr);
    st.bundle.student.zero_grads();
  }
}

}  // namespace

IterationResult train_iteration(TrainState& st, const TrainConfig& cfg,
                                const ClassTaxonomy& taxonomy, const SegSample& src,
                                const SegSample& tgt, const fs::path* debug_dir) {
  const int ignore = taxonomy.ignore_id();
  // UDA contract: the target crop must carry no ground truth.
  for (auto v : tgt.label.ids)
    if (static_cast<int>(v) != ignore)
      throw DataError("train_iteration: target sample carries ground-truth labels");

  st.last_stage_trace.clear();
  const double lr = scheduled_lr(cfg.optim, static_cast<int>(st.iteration), cfg.max_iterations);
  ModelBundle& bundle = st.bundle;
  bundle.student.zero_grads();

  // Stage 0: EMA sync at the beginning of each iteration.
  st.last_stage_trace.push_back("ema");
  ema_update(bundle.teacher, bundle.student, st.ema_alpha);

  // Stage 1: source supervision.
  st.last_stage_trace.push_back("source");
  const StageLosses src_losses = student_supervised_pass(
      st, cfg, taxonomy, src.image, src.label, nullptr, ContrastiveStage::kSource, "l_src");
  maybe_step(st, cfg, lr);

  // Stage 2: teacher pseudo-labels, no gradient bookkeeping (cache-free pass).
  st.last_stage_trace.push_back("pseudo_label");
  const FeatureMap teacher_feat = forward_features(bundle, bundle.teacher, tgt.image, nullptr);
  const Logits teacher_logits = segment(bundle.config, bundle.teacher, teacher_feat,
                                        tgt.image.dim(0), tgt.image.dim(1), nullptr);
  const PseudoLabel pl = pseudo_label(teacher_logits.scores, cfg.pseudo.threshold);
  const double pseudo_weight = cfg.pseudo.confidence_weighting ? pl.confidence : 1.0;

  // Stage 3: cross-domain mix, then train on the blended pair. Pixels copied
  // from the source carry ground truth and keep weight 1; pixels supervised by
  // the pseudo-label are scaled by the teacher's confidence.
  double l_mix = 0.0, pix_mix = 0.0;
  if (cfg.mix.enabled) {
    st.last_stage_trace.push_back("mix");
    const std::vector<int> selected =
        cfg.mix.prior_guided
            ? prior_guided_select(src.label, taxonomy, cfg.mix.fraction, st.mix_rng)
            : select_classes(src.label, ignore, cfg.mix.fraction, st.mix_rng);
    const MixMask mm = build_mix_mask(src.label, selected, ignore);
    const Mixed mixed = apply_mix(src.image, src.label, tgt.image, pl.label, mm);
    if (debug_dir && cfg.debug.dump_interval > 0 &&
        st.iteration % cfg.debug.dump_interval == 0) {
      fs::create_directories(*debug_dir);
      dump_mix_strip(src.image, tgt.image, mixed.image, mm,
                     (*debug_dir / ("mix_" + std::to_string(st.iteration) + ".png")).string());
    }
    Tensor mix_weight({mixed.label.h, mixed.label.w});
    for (int y = 0; y < mixed.label.h; ++y)
      for (int x = 0; x < mixed.label.w; ++x)
        mix_weight.at(y, x) = mm.mask.at(y, x) ? 1.0 : pseudo_weight;
    const StageLosses mix_losses =
        student_supervised_pass(st, cfg, taxonomy, mixed.image, mixed.label, &mix_weight,
                                ContrastiveStage::kMix, "l_mix");
    l_mix = mix_losses.ce;
    pix_mix = mix_losses.pix;
    maybe_step(st, cfg, lr);
  }

  // Stage 4: mask random target patches, train against the pseudo-label.
  double l_masked = 0.0, pix_masked = 0.0;
  if (cfg.mask.enabled) {
    st.last_stage_trace.push_back("mask");
    const PatchMask pm = generate_patch_mask(tgt.image.dim(0), tgt.image.dim(1),
                                             cfg.mask.patch_size, cfg.mask.ratio, st.mask_rng);
    const Image masked = apply_mask(tgt.image, pm);
    if (debug_dir && cfg.debug.dump_interval > 0 &&
        st.iteration % cfg.debug.dump_interval == 0) {
      fs::create_directories(*debug_dir);
      dump_masked_image(masked,
                        (*debug_dir / ("masked_" + std::to_string(st.iteration) + ".png")).string());
    }
    const Tensor mask_weight =
        Tensor::full({tgt.image.dim(0), tgt.image.dim(1)}, pseudo_weight);
    const StageLosses mask_losses = student_supervised_pass(
        st, cfg, taxonomy, masked, pl.label, &mask_weight, ContrastiveStage::kMasked, "l_masked");
    l_masked = mask_losses.ce;
    pix_masked = mask_losses.pix;
    maybe_step(st, cfg, lr);
  }

  const double l_pix = src_losses.pix + pix_mix + pix_masked;
  const LossReport report = combine(src_losses.ce, l_mix, l_masked, l_pix, cfg.lambda_pix);

  if (!cfg.optim.per_stage_steps) {
    adam_step(bundle.student, st.optimizer, cfg.optim, lr);
    bundle.student.zero_grads();
  }
  st.teacher_grad_updates_seen = bundle.teacher.grad_updates;
  ++st.iteration;

  IterationResult out;
  out.report = report;
  out.confidence = pl.confidence;
  out.lr = lr;
  return out;
}

LabelMap predict(const ModelBundle& bundle, const ParamSet& params, const Image& image) {
  const FeatureMap f = bundle.extractor->forward(params, image, nullptr);
  const Logits logits = segment(bundle.config, params, f, image.dim(0), image.dim(1), nullptr);
  const int h = image.dim(0), w = image.dim(1), C = logits.scores.dim(2);
  LabelMap pred(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int best = 0;
      double vmax = logits.scores.at(y, x, 0);
      for (int c = 1; c < C; ++c)
        if (logits.scores.at(y, x, c) > vmax) {
          vmax = logits.scores.at(y, x, c);
          best = c;
        }
      pred.at(y, x) = static_cast<std::uint8_t>(best);
    }
  return pred;
}

EvalReport evaluate(const TrainState& state, const Dataset& val) {
  ConfusionMatrix cm(val.taxonomy().num_classes());
  for (int i = 0; i < val.size(); ++i) {
    const SegSample s = val.sample(i);
    const LabelMap pred = predict(state.bundle, state.bundle.student, s.image);
    accumulate(cm, pred, s.label, val.taxonomy().ignore_id());
  }
  EvalReport r = iou(cm);
  r.num_images = val.size();
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoint container: little-endian tagged binary, format_version 1.

namespace {

constexpr std::uint32_t kCkptMagic = 0x55444153;  // "UDAS"
constexpr std::uint32_t kCkptVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void put_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

void put_string(std::ostream& os, const std::string& s) {
  put_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void put_tensor(std::ostream& os, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) put_u32(os, static_cast<std::uint32_t>(t.dim(i)));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

void put_param_map(std::ostream& os, const std::map<std::string, Tensor>& m) {
  put_u64(os, m.size());
  for (const auto& [name, t] : m) {
    put_string(os, name);
    put_tensor(os, t);
  }
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
double get_f64(std::istream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

std::string get_string(std::istream& is) {
  const auto n = get_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}

Tensor get_tensor(std::istream& is) {
  const auto rank = get_u32(is);
  std::vector<int> shape(rank);
  for (auto& d : shape) d = static_cast<int>(get_u32(is));
  Tensor t(shape);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(double)));
  return t;
}

std::map<std::string, Tensor> get_param_map(std::istream& is) {
  std::map<std::string, Tensor> m;
  const auto n = get_u64(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = get_string(is);
    m.emplace(std::move(name), get_tensor(is));
  }
  return m;
}

}  // namespace

void save_checkpoint(const TrainState& state, const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot write '" + path.string() + "'");
  put_u32(os, kCkptMagic);
  put_u32(os, kCkptVersion);
  put_string(os, state.bundle.config.architecture_id);
  // Model dims travel with the checkpoint so load is self-contained.
  json mc;
  mc["num_classes"] = state.bundle.config.num_classes;
  mc["channels"] = state.bundle.config.channels;
  mc["strides"] = state.bundle.config.strides;
  mc["proj_hidden"] = state.bundle.config.proj_hidden;
  mc["embedding_dim"] = state.bundle.config.embedding_dim;
  put_string(os, mc.dump());
  put_u64(os, static_cast<std::uint64_t>(state.iteration));
  put_string(os, state.config_hash);
  put_f64(os, state.ema_alpha);
  put_param_map(os, state.bundle.student.values);
  put_param_map(os, state.bundle.teacher.values);
  put_param_map(os, state.optimizer.m);
  put_param_map(os, state.optimizer.v);
  put_u64(os, static_cast<std::uint64_t>(state.optimizer.step));
  put_u64(os, static_cast<std::uint64_t>(state.bundle.student.grad_updates));
  put_u64(os, static_cast<std::uint64_t>(state.bundle.teacher.grad_updates));
  put_string(os, state.data_rng.serialize());
  put_string(os, state.mix_rng.serialize());
  put_string(os, state.mask_rng.serialize());
  put_string(os, state.contrastive_rng.serialize());
  if (!os) throw DataError("checkpoint: write failure on '" + path.string() + "'");
}

TrainState load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open '" + path.string() + "'");
  if (get_u32(is) != kCkptMagic) throw DataError("checkpoint: bad magic in '" + path.string() + "'");
  const auto version = get_u32(is);
  if (version != kCkptVersion)
    throw DataError("checkpoint: unsupported format_version " + std::to_string(version));

  TrainState st;
  ModelConfig mc;
  mc.architecture_id = get_string(is);
  {
    json j = json::parse(get_string(is));
    mc.num_classes = j.at("num_classes").get<int>();
    mc.channels = j.at("channels").get<std::vector<int>>();
    mc.strides = j.at("strides").get<std::vector<int>>();
    mc.proj_hidden = j.at("proj_hidden").get<int>();
    mc.embedding_dim = j.at("embedding_dim").get<int>();
  }
  st.iteration = static_cast<long>(get_u64(is));
  st.config_hash = get_string(is);
  st.ema_alpha = get_f64(is);

  st.bundle.config = mc;
  st.bundle.extractor = make_extractor(mc);
  st.bundle.student.values = get_param_map(is);
  st.bundle.teacher.values = get_param_map(is);
  st.optimizer.m = get_param_map(is);
  st.optimizer.v = get_param_map(is);
  st.optimizer.step = static_cast<long>(get_u64(is));
  st.bundle.student.grad_updates = static_cast<long>(get_u64(is));
  st.bundle.teacher.grad_updates = static_cast<long>(get_u64(is));
  st.data_rng.deserialize(get_string(is));
  st.mix_rng.deserialize(get_string(is));
  st.mask_rng.deserialize(get_string(is));
  st.contrastive_rng.deserialize(get_string(is));
  if (!is) throw DataError("checkpoint: truncated file '" + path.string() + "'");
  return st;
}

// ---------------------------------------------------------------------------

namespace {

std::string metrics_line(long iteration, const IterationResult& res) {
  json j;
  j["iteration"] = iteration;
  j["l_src"] = res.report.l_src;
  j["l_mix"] = res.report.l_mix;
  j["l_masked"] = res.report.l_masked;
  j["l_pix"] = res.report.l_pix;
  j["total"] = res.report.total;
  j["confidence"] = res.confidence;
  j["lr"] = res.lr;
  return j.dump();
}

std::string eval_line(long iteration, const EvalReport& r) {
  json j;
  j["type"] = "eval";
  j["iteration"] = iteration;
  j["miou"] = r.miou;
  return j.dump();
}

std::string ckpt_name(long iteration) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "iter_%06ld.ckpt", iteration);
  return buf;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& source, const Dataset& target,
                  const Dataset& val, const fs::path& out_dir,
                  const std::optional<fs::path>& resume_from) {
  cfg.validate();
  const ClassTaxonomy& taxonomy = source.taxonomy();
  if (target.taxonomy().num_classes() != taxonomy.num_classes())
    throw DataError("train: source/target taxonomy mismatch");

  fs::create_directories(out_dir / "ckpt");
  const fs::path debug_dir = out_dir / "debug";

  TrainState st = resume_from ? load_checkpoint(*resume_from) : make_train_state(cfg, taxonomy);
  if (resume_from && st.config_hash != config_hash(cfg))
    throw ConfigError("train: resume checkpoint was produced by a different config");

  const long baseline_target_reads = target.label_reads();

  std::ofstream metrics(out_dir / "metrics.log",
                        resume_from ? std::ios::app : std::ios::trunc);
  if (!metrics) throw DataError("train: cannot open metrics.log under '" + out_dir.string() + "'");

  EvalReport last_eval;
  for (long it = st.iteration; it < cfg.max_iterations; ++it) {
    auto [src, tgt] = sample_training_pair(source, target, cfg.crop_size, st.data_rng);
    const IterationResult res = train_iteration(st, cfg, taxonomy, src, tgt, &debug_dir);
    metrics << metrics_line(it, res) << '\n';

    if ((it + 1) % cfg.eval_interval == 0 || it + 1 == cfg.max_iterations) {
      last_eval = evaluate(st, val);
      metrics << eval_line(it + 1, last_eval) << '\n';
    }
    if ((it + 1) % cfg.checkpoint_interval == 0)
      save_checkpoint(st, out_dir / "ckpt" / ckpt_name(it + 1));
  }
  if (cfg.max_iterations == 0) last_eval = evaluate(st, val);
  metrics.close();

  const fs::path final_ckpt = out_dir / "ckpt" / "final.ckpt";
  save_checkpoint(st, final_ckpt);

  TrainResult result;
  result.checkpoint = final_ckpt;
  result.target_label_reads = target.label_reads() - baseline_target_reads;
  result.teacher_grad_updates = st.bundle.teacher.grad_updates;
  result.final_eval = last_eval;
  if (result.target_label_reads != 0)
    throw DataError("train: UDA contract violated — target ground-truth labels were read " +
                    std::to_string(result.target_label_reads) + " times");
  if (result.teacher_grad_updates != 0)
    throw NumericError("train: teacher parameters received gradient updates");
  return result;
}

}  // namespace udaseg
