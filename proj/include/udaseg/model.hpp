#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "udaseg/rng.hpp"
#include "udaseg/tensor.hpp"

namespace udaseg {

struct ModelConfig {
  std::string architecture_id = "tiny4";
  int num_classes = 0;
  std::vector<int> channels = {16, 24, 32, 32};  // per encoder stage
  std::vector<int> strides = {2, 2, 1, 1};       // per stage; product = feature stride
  int proj_hidden = 64;
  int embedding_dim = 32;

  int feature_stride() const {
    int s = 1;
    for (int v : strides) s *= v;
    return s;
  }
  int feature_dim() const { return channels.back(); }
};

// Named parameter tensors with accumulated gradients. `grad_updates` counts
// optimizer applications so the trainer can assert the teacher is never
// touched by gradient steps.
struct ParamSet {
  std::map<std::string, Tensor> values;
  std::map<std::string, Tensor> grads;
  long grad_updates = 0;

  void ensure_grads();
  void zero_grads();
  Tensor& grad(const std::string& name);
};

struct FeatureMap {
  Tensor features;  // H'×W'×D
  int stride = 1;
};

struct Logits {
  Tensor scores;  // H×W×C at the requested output resolution
};

struct EmbeddingMap {
  Tensor embeddings;  // H'×W'×E, unit-normalized along E
};

// Opaque per-pass activation caches (one per forward; backward consumes them).
struct EncoderCache;
struct SegCache;
struct ProjCache;

// Adapter seam: an extractor maps images to feature maps and can be swapped
// for an external pretrained encoder without touching the heads or trainer.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual int stride() const = 0;
  virtual int feature_dim() const = 0;
  virtual void init_params(ParamSet& params, RngStream& rng) const = 0;
  // cache == nullptr runs inference-only: no activation bookkeeping at all.
  virtual FeatureMap forward(const ParamSet& params, const Image& x,
                             std::shared_ptr<EncoderCache>* cache) const = 0;
  virtual void backward(const ParamSet& params, ParamSet& grad_sink, const EncoderCache& cache,
                        const Tensor& dfeatures) const = 0;
};

std::shared_ptr<const FeatureExtractor> make_extractor(const ModelConfig& config);

// Student (extractor + segmentation head + projection head) and teacher
// (extractor + segmentation head). Teacher parameters start as a copy of the
// student's and are only ever moved by EMA.
struct ModelBundle {
  ModelConfig config;
  std::shared_ptr<const FeatureExtractor> extractor;
  ParamSet student;
  ParamSet teacher;
};

ModelBundle make_model(const ModelConfig& config, RngStream& rng);

FeatureMap forward_features(const ModelBundle& m, const ParamSet& params, const Image& x,
                            std::shared_ptr<EncoderCache>* cache = nullptr);

// 1×1 head then bilinear upsample to (out_h, out_w).
Logits segment(const ModelConfig& config, const ParamSet& params, const FeatureMap& f, int out_h,
               int out_w, std::shared_ptr<SegCache>* cache = nullptr);
// Returns dL/dfeatures and accumulates head parameter grads into grad_sink.
Tensor segment_backward(const ModelConfig& config, const ParamSet& params, ParamSet& grad_sink,
                        const SegCache& cache, const Tensor& dlogits);

EmbeddingMap project(const ModelConfig& config, const ParamSet& params, const FeatureMap& f,
                     std::shared_ptr<ProjCache>* cache = nullptr);
Tensor project_backward(const ModelConfig& config, const ParamSet& params, ParamSet& grad_sink,
                        const ProjCache& cache, const Tensor& dembeddings);

void encoder_backward(const ModelBundle& m, const ParamSet& params, ParamSet& grad_sink,
                      const EncoderCache& cache, const Tensor& dfeatures);

// Reference bilinear resize with half-pixel centers (shared by segment() and
// the evaluation path); short-circuits to a copy when sizes already match.
Tensor bilinear_resize(const Tensor& src, int out_h, int out_w);

}  // namespace udaseg
