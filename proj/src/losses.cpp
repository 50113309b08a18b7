#include "udaseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "udaseg/errors.hpp"

namespace udaseg {

namespace {

// log(sum exp(v)) with the max factored out.
double log_sum_exp(const double* v, int n, double vmax) {
  double s = 0.0;
  for (int c = 0; c < n; ++c) s += std::exp(v[c] - vmax);
  return vmax + std::log(s);
}

constexpr double kNormEps2 = 1e-24;  // squared epsilon guard for normalization

}  // namespace

ScalarLoss cross_entropy(const Tensor& logits, const LabelMap& label, int ignore_id,
                         const Tensor* pixel_weight, Tensor* grad_logits) {
  const int h = logits.dim(0), w = logits.dim(1), C = logits.dim(2);
  if (label.h != h || label.w != w) throw DataError("cross_entropy: label size mismatch");
  if (pixel_weight && (pixel_weight->dim(0) != h || pixel_weight->dim(1) != w))
    throw DataError("cross_entropy: pixel_weight size mismatch");
  if (grad_logits) {
    if (!grad_logits->same_shape(logits)) *grad_logits = Tensor({h, w, C});
    grad_logits->fill(0.0);
  }

  double sum = 0.0;
  long valid = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int target = label.at(y, x);
      if (target == ignore_id) continue;
      if (target < 0 || target >= C)
        throw DataError("cross_entropy: label value " + std::to_string(target) +
                        " out of range for " + std::to_string(C) + " classes");
      ++valid;
    }
  }
  if (valid == 0) return {0.0, true};

  const double inv_n = 1.0 / static_cast<double>(valid);
  std::vector<double> row(static_cast<size_t>(C));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int target = label.at(y, x);
      if (target == ignore_id) continue;
      double vmax = logits.at(y, x, 0);
      for (int c = 0; c < C; ++c) {
        row[static_cast<size_t>(c)] = logits.at(y, x, c);
        vmax = std::max(vmax, row[static_cast<size_t>(c)]);
      }
      const double lse = log_sum_exp(row.data(), C, vmax);
      const double weight = pixel_weight ? pixel_weight->at(y, x) : 1.0;
      sum += weight * (lse - row[static_cast<size_t>(target)]);
      if (grad_logits) {
        const double scale = weight * inv_n;
        for (int c = 0; c < C; ++c) {
          const double p = std::exp(row[static_cast<size_t>(c)] - lse);
          grad_logits->at(y, x, c) = scale * (p - (c == target ? 1.0 : 0.0));
        }
      }
    }
  }
  return {sum * inv_n, false};
}

PseudoLabel pseudo_label(const Tensor& teacher_logits, double threshold) {
  const int h = teacher_logits.dim(0), w = teacher_logits.dim(1), C = teacher_logits.dim(2);
  if (!teacher_logits.all_finite()) throw NumericError("pseudo_label: non-finite teacher logits");

  PseudoLabel out;
  out.label = LabelMap(h, w);
  out.per_pixel_max_prob = Tensor({h, w});
  long confident = 0;
  std::vector<double> row(static_cast<size_t>(C));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int best = 0;
      double vmax = teacher_logits.at(y, x, 0);
      for (int c = 0; c < C; ++c) {
        row[static_cast<size_t>(c)] = teacher_logits.at(y, x, c);
        if (row[static_cast<size_t>(c)] > vmax) {  // strict: ties keep the lowest ID
          vmax = row[static_cast<size_t>(c)];
          best = c;
        }
      }
      const double lse = log_sum_exp(row.data(), C, vmax);
      const double pmax = std::exp(vmax - lse);
      out.label.at(y, x) = static_cast<std::uint8_t>(best);
      out.per_pixel_max_prob.at(y, x) = pmax;
      if (pmax >= threshold) ++confident;
    }
  }
  out.confidence = static_cast<double>(confident) / static_cast<double>(h * w);
  return out;
}

LabelMap downsample_labels_nearest(const LabelMap& label, int out_h, int out_w) {
  LabelMap out(out_h, out_w);
  const double sy = static_cast<double>(label.h) / out_h;
  const double sx = static_cast<double>(label.w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    int src_y = static_cast<int>((y + 0.5) * sy);
    src_y = std::clamp(src_y, 0, label.h - 1);
    for (int x = 0; x < out_w; ++x) {
      int src_x = static_cast<int>((x + 0.5) * sx);
      src_x = std::clamp(src_x, 0, label.w - 1);
      out.at(y, x) = label.at(src_y, src_x);
    }
  }
  return out;
}

ScalarLoss contrastive_loss(const Tensor& embeddings, const LabelMap& label_grid, int ignore_id,
                            const ContrastiveConfig& cfg, RngStream& rng,
                            Tensor* grad_embeddings) {
  const int h = embeddings.dim(0), w = embeddings.dim(1), E = embeddings.dim(2);
  if (label_grid.h != h || label_grid.w != w)
    throw DataError("contrastive_loss: label grid size mismatch");
  if (!(cfg.temperature > 0.0)) throw ConfigError("contrastive_loss: temperature must be > 0");
  if (cfg.max_anchors_per_class < 1 || cfg.max_pixels_total < 1)
    throw ConfigError("contrastive_loss: sampling caps must be >= 1");
  if (grad_embeddings) {
    if (!grad_embeddings->same_shape(embeddings)) *grad_embeddings = Tensor({h, w, E});
    grad_embeddings->fill(0.0);
  }

  // Per-class pixel pools, classes ascending, pixels in row-major order.
  std::map<int, std::vector<int>> pools;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int c = label_grid.at(y, x);
      if (c != ignore_id) pools[c].push_back(y * w + x);
    }

  std::vector<int> pixels;   // flat grid indices of the sampled set
  std::vector<int> classes;  // class per sampled pixel
  for (const auto& [c, pool] : pools) {
    const auto picks = rng.sample_without_replacement(
        static_cast<int>(pool.size()),
        std::min<int>(static_cast<int>(pool.size()), cfg.max_anchors_per_class));
    for (int i : picks) {
      pixels.push_back(pool[static_cast<size_t>(i)]);
      classes.push_back(c);
    }
  }
  if (static_cast<int>(pixels.size()) > cfg.max_pixels_total) {
    const auto keep = rng.sample_without_replacement(static_cast<int>(pixels.size()),
                                                     cfg.max_pixels_total);
    std::vector<int> px, cl;
    px.reserve(keep.size());
    cl.reserve(keep.size());
    for (int i : keep) {
      px.push_back(pixels[static_cast<size_t>(i)]);
      cl.push_back(classes[static_cast<size_t>(i)]);
    }
    pixels.swap(px);
    classes.swap(cl);
  }

  const int N = static_cast<int>(pixels.size());
  long positive_pairs = 0;
  {
    std::map<int, int> counts;
    for (int c : classes) ++counts[c];
    for (const auto& [c, n] : counts) positive_pairs += static_cast<long>(n) * (n - 1);
  }
  if (positive_pairs == 0) return {0.0, true};

  // Unit-normalize the sampled embeddings (epsilon-guarded), keeping the raw
  // vectors and inverse norms for the backward pass.
  std::vector<double> unit(static_cast<size_t>(N) * static_cast<size_t>(E));
  std::vector<double> inv_norm(static_cast<size_t>(N));
  for (int i = 0; i < N; ++i) {
    const int y = pixels[static_cast<size_t>(i)] / w, x = pixels[static_cast<size_t>(i)] % w;
    double s2 = 0.0;
    for (int e = 0; e < E; ++e) {
      const double v = embeddings.at(y, x, e);
      s2 += v * v;
    }
    const double r = 1.0 / std::sqrt(s2 + kNormEps2);
    inv_norm[static_cast<size_t>(i)] = r;
    for (int e = 0; e < E; ++e)
      unit[static_cast<size_t>(i) * static_cast<size_t>(E) + static_cast<size_t>(e)] =
          embeddings.at(y, x, e) * r;
  }
  auto u = [&](int i, int e) {
    return unit[static_cast<size_t>(i) * static_cast<size_t>(E) + static_cast<size_t>(e)];
  };

  const double inv_tau = 1.0 / cfg.temperature;
  std::vector<double> sim(static_cast<size_t>(N) * static_cast<size_t>(N), 0.0);
  for (int i = 0; i < N; ++i)
    for (int j = i + 1; j < N; ++j) {
      double s = 0.0;
      for (int e = 0; e < E; ++e) s += u(i, e) * u(j, e);
      sim[static_cast<size_t>(i) * static_cast<size_t>(N) + static_cast<size_t>(j)] = s;
      sim[static_cast<size_t>(j) * static_cast<size_t>(N) + static_cast<size_t>(i)] = s;
    }

  // Per anchor: stable log-sum-exp over k != i, positive count, loss terms.
  double loss = 0.0;
  std::vector<double> anchor_lse(static_cast<size_t>(N));
  std::vector<int> anchor_pos(static_cast<size_t>(N), 0);
  for (int i = 0; i < N; ++i) {
    double m = -1e300;
    for (int k = 0; k < N; ++k)
      if (k != i)
        m = std::max(m, sim[static_cast<size_t>(i) * static_cast<size_t>(N) +
                            static_cast<size_t>(k)] * inv_tau);
    double acc = 0.0;
    for (int k = 0; k < N; ++k)
      if (k != i)
        acc += std::exp(sim[static_cast<size_t>(i) * static_cast<size_t>(N) +
                            static_cast<size_t>(k)] * inv_tau - m);
    anchor_lse[static_cast<size_t>(i)] = m + std::log(acc);
    for (int j = 0; j < N; ++j)
      if (j != i && classes[static_cast<size_t>(j)] == classes[static_cast<size_t>(i)])
        ++anchor_pos[static_cast<size_t>(i)];
  }
  for (int i = 0; i < N; ++i) {
    if (anchor_pos[static_cast<size_t>(i)] == 0) continue;
    for (int j = 0; j < N; ++j) {
      if (j == i || classes[static_cast<size_t>(j)] != classes[static_cast<size_t>(i)]) continue;
      loss += -sim[static_cast<size_t>(i) * static_cast<size_t>(N) + static_cast<size_t>(j)] *
                  inv_tau +
              anchor_lse[static_cast<size_t>(i)];
    }
  }
  const double inv_p = 1.0 / static_cast<double>(positive_pairs);
  loss *= inv_p;

  if (grad_embeddings) {
    // g[i][j] = dL/ds_ij as seen from anchor i (i fixed, j != i).
    std::vector<double> dsim(static_cast<size_t>(N) * static_cast<size_t>(N), 0.0);
    for (int i = 0; i < N; ++i) {
      const int npos = anchor_pos[static_cast<size_t>(i)];
      if (npos == 0) continue;
      for (int j = 0; j < N; ++j) {
        if (j == i) continue;
        const double sij = sim[static_cast<size_t>(i) * static_cast<size_t>(N) +
                               static_cast<size_t>(j)];
        const double softmax_ij = std::exp(sij * inv_tau - anchor_lse[static_cast<size_t>(i)]);
        double g = static_cast<double>(npos) * softmax_ij;
        if (classes[static_cast<size_t>(j)] == classes[static_cast<size_t>(i)]) g -= 1.0;
        dsim[static_cast<size_t>(i) * static_cast<size_t>(N) + static_cast<size_t>(j)] =
            g * inv_tau * inv_p;
      }
    }
    // dL/du_i = sum_j dsim[i][j] * u_j + sum_j dsim[j][i] * u_j
    std::vector<double> du(static_cast<size_t>(N) * static_cast<size_t>(E), 0.0);
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j) {
        if (i == j) continue;
        const double g = dsim[static_cast<size_t>(i) * static_cast<size_t>(N) +
                              static_cast<size_t>(j)];
        if (g == 0.0) continue;
        for (int e = 0; e < E; ++e) {
          du[static_cast<size_t>(i) * static_cast<size_t>(E) + static_cast<size_t>(e)] +=
              g * u(j, e);
          du[static_cast<size_t>(j) * static_cast<size_t>(E) + static_cast<size_t>(e)] +=
              g * u(i, e);
        }
      }
    // Through the normalization: dv = r * (du - u (u · du)).
    for (int i = 0; i < N; ++i) {
      const int y = pixels[static_cast<size_t>(i)] / w, x = pixels[static_cast<size_t>(i)] % w;
      double dot = 0.0;
      for (int e = 0; e < E; ++e)
        dot += u(i, e) * du[static_cast<size_t>(i) * static_cast<size_t>(E) +
                            static_cast<size_t>(e)];
      const double r = inv_norm[static_cast<size_t>(i)];
      for (int e = 0; e < E; ++e)
        grad_embeddings->at(y, x, e) =
            r * (du[static_cast<size_t>(i) * static_cast<size_t>(E) + static_cast<size_t>(e)] -
                 u(i, e) * dot);
    }
  }
  return {loss, false};
}

LossReport combine(double l_src, double l_mix, double l_masked, double l_pix, double lambda_pix) {
  const struct {
    const char* name;
    double v;
  } parts[] = {{"l_src", l_src}, {"l_mix", l_mix}, {"l_masked", l_masked}, {"l_pix", l_pix},
               {"lambda_pix", lambda_pix}};
  for (const auto& p : parts)
    if (!std::isfinite(p.v))
      throw NumericError(std::string("combine: non-finite component ") + p.name);
  LossReport r;
  r.l_src = l_src;
  r.l_mix = l_mix;
  r.l_masked = l_masked;
  r.l_pix = l_pix;
  r.total = l_src + l_mix + l_masked + lambda_pix * l_pix;
  return r;
}

ContrastiveStage stage_from_string(const std::string& s) {
  if (s == "source") return ContrastiveStage::kSource;
  if (s == "mix") return ContrastiveStage::kMix;
  if (s == "masked") return ContrastiveStage::kMasked;
  throw ConfigError("unknown contrastive stage '" + s + "' (expected source|mix|masked)");
}

std::string stage_to_string(ContrastiveStage s) {
  switch (s) {
    case ContrastiveStage::kSource: return "source";
    case ContrastiveStage::kMix: return "mix";
    case ContrastiveStage::kMasked: return "masked";
  }
  return "?";
}

}  // namespace udaseg
