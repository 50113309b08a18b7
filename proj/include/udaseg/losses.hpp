#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "udaseg/rng.hpp"
#include "udaseg/tensor.hpp"

namespace udaseg {

// Teacher prediction turned into surrogate supervision: per-pixel argmax plus
// a scalar quality weight (fraction of pixels whose max softmax probability
// reaches the threshold).
struct PseudoLabel {
  LabelMap label;
  double confidence = 0.0;
  Tensor per_pixel_max_prob;  // H×W
};

enum class ContrastiveStage { kSource, kMix, kMasked };

struct ContrastiveConfig {
  double temperature = 0.1;        // τ > 0
  int max_anchors_per_class = 128;
  int max_pixels_total = 1024;
  std::set<ContrastiveStage> stages = {ContrastiveStage::kSource, ContrastiveStage::kMix,
                                       ContrastiveStage::kMasked};
};

// Per-iteration loss breakdown; total = l_src + l_mix + l_masked + lambda_pix * l_pix.
struct LossReport {
  double l_src = 0.0;
  double l_mix = 0.0;
  double l_masked = 0.0;
  double l_pix = 0.0;
  double total = 0.0;
};

struct ScalarLoss {
  double value = 0.0;
  bool degenerate = false;  // all pixels ignored / no positive pair
};

// Mean over non-ignored pixels of -log softmax(logits)[label], each pixel
// scaled by pixel_weight (default 1). Log-sum-exp stabilized. When grad_logits
// is non-null it receives dL/dlogits (accumulated onto whatever shape-matched
// tensor is passed in after zeroing — the function zeroes it first).
ScalarLoss cross_entropy(const Tensor& logits, const LabelMap& label, int ignore_id,
                         const Tensor* pixel_weight = nullptr, Tensor* grad_logits = nullptr);

// Argmax of teacher logits (ties -> lowest class ID); confidence = fraction of
// pixels with max softmax probability >= threshold.
PseudoLabel pseudo_label(const Tensor& teacher_logits, double threshold);

// Nearest-neighbor downsample of a full-resolution label map to the embedding
// grid (half-pixel centers).
LabelMap downsample_labels_nearest(const LabelMap& label, int out_h, int out_w);

// Sampled-pair estimate of the pixel contrastive objective: for every ordered
// same-class pair (i, j) over the sampled pixel set,
//   -log( exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ) ),
// averaged over positive pairs; s is cosine similarity. Sampling: per class,
// up to max_anchors_per_class pixels uniformly without replacement, then a
// uniform cut to max_pixels_total. grad_embeddings (optional) receives
// dL/d(embeddings) including the internal cosine normalization.
ScalarLoss contrastive_loss(const Tensor& embeddings, const LabelMap& label_grid, int ignore_id,
                            const ContrastiveConfig& cfg, RngStream& rng,
                            Tensor* grad_embeddings = nullptr);

// Assembles the report; throws NumericError naming the first non-finite
// component.
LossReport combine(double l_src, double l_mix, double l_masked, double l_pix, double lambda_pix);

ContrastiveStage stage_from_string(const std::string& s);
std::string stage_to_string(ContrastiveStage s);

}  // namespace udaseg
