#include "udaseg/model.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "udaseg/errors.hpp"

namespace udaseg {
namespace nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

constexpr double kNormEps2 = 1e-24;

struct ConvSpec {
  int in_c, out_c, k, stride, pad;
};

inline int conv_out(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Column matrix of receptive fields: K = k*k*in_c rows, N = oh*ow cols.
// Row order matches W's (out_c, k, k, in_c) layout.
void im2col(const Tensor& x, const ConvSpec& cs, int oh, int ow, std::vector<double>& cols) {
  const int h = x.dim(0), w = x.dim(1);
  const int K = cs.k * cs.k * cs.in_c;
  cols.assign(static_cast<size_t>(K) * static_cast<size_t>(oh) * static_cast<size_t>(ow), 0.0);
  for (int ky = 0; ky < cs.k; ++ky) {
    for (int kx = 0; kx < cs.k; ++kx) {
      for (int ic = 0; ic < cs.in_c; ++ic) {
        const size_t row = static_cast<size_t>((ky * cs.k + kx) * cs.in_c + ic);
        double* dst = cols.data() + row * static_cast<size_t>(oh) * static_cast<size_t>(ow);
        for (int oy = 0; oy < oh; ++oy) {
          const int sy = oy * cs.stride - cs.pad + ky;
          if (sy < 0 || sy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int sx = ox * cs.stride - cs.pad + kx;
            if (sx < 0 || sx >= w) continue;
            dst[static_cast<size_t>(oy) * static_cast<size_t>(ow) + static_cast<size_t>(ox)] =
                x.at(sy, sx, ic);
          }
        }
      }
    }
  }
}

void col2im(const std::vector<double>& dcols, const ConvSpec& cs, int h, int w, int oh, int ow,
            Tensor& dx) {
  dx = Tensor({h, w, cs.in_c});
  for (int ky = 0; ky < cs.k; ++ky) {
    for (int kx = 0; kx < cs.k; ++kx) {
      for (int ic = 0; ic < cs.in_c; ++ic) {
        const size_t row = static_cast<size_t>((ky * cs.k + kx) * cs.in_c + ic);
        const double* src = dcols.data() + row * static_cast<size_t>(oh) * static_cast<size_t>(ow);
        for (int oy = 0; oy < oh; ++oy) {
          const int sy = oy * cs.stride - cs.pad + ky;
          if (sy < 0 || sy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int sx = ox * cs.stride - cs.pad + kx;
            if (sx < 0 || sx >= w) continue;
            dx.at(sy, sx, ic) +=
                src[static_cast<size_t>(oy) * static_cast<size_t>(ow) + static_cast<size_t>(ox)];
          }
        }
      }
    }
  }
}

struct ConvCache {
  std::vector<double> cols;  // K×N
  int in_h = 0, in_w = 0, oh = 0, ow = 0;
  Tensor post;  // post-activation output (for ReLU backward), empty if no ReLU
};

Tensor conv_forward(const Tensor& x, const Tensor& W, const Tensor& b, const ConvSpec& cs,
                    bool relu, ConvCache* cache) {
  const int h = x.dim(0), w = x.dim(1);
  const int oh = conv_out(h, cs.k, cs.stride, cs.pad), ow = conv_out(w, cs.k, cs.stride, cs.pad);
  const int K = cs.k * cs.k * cs.in_c, N = oh * ow;

  std::vector<double> local_cols;
  std::vector<double>& cols = cache ? cache->cols : local_cols;
  im2col(x, cs, oh, ow, cols);

  Tensor out({oh, ow, cs.out_c});
  {
    ConstMapMat Wm(W.data(), cs.out_c, K);
    ConstMapMat Cm(cols.data(), K, N);
    RowMat O = Wm * Cm;  // out_c × N
    for (int oc = 0; oc < cs.out_c; ++oc) {
      const double bias = b[static_cast<size_t>(oc)];
      for (int n = 0; n < N; ++n) {
        double v = O(oc, n) + bias;
        if (relu && v < 0.0) v = 0.0;
        out.at(n / ow, n % ow, oc) = v;
      }
    }
  }
  if (cache) {
    cache->in_h = h;
    cache->in_w = w;
    cache->oh = oh;
    cache->ow = ow;
    if (relu) cache->post = out;
  }
  return out;
}

// dpost -> accumulated (dW, db), returns dx.
Tensor conv_backward(const Tensor& W, const ConvSpec& cs, const ConvCache& cache, bool relu,
                     const Tensor& dpost, Tensor& dW_acc, Tensor& db_acc) {
  const int oh = cache.oh, ow = cache.ow, N = oh * ow;
  const int K = cs.k * cs.k * cs.in_c;

  std::vector<double> dpre(static_cast<size_t>(cs.out_c) * static_cast<size_t>(N));
  for (int oc = 0; oc < cs.out_c; ++oc)
    for (int n = 0; n < N; ++n) {
      double g = dpost.at(n / ow, n % ow, oc);
      if (relu && cache.post.at(n / ow, n % ow, oc) <= 0.0) g = 0.0;
      dpre[static_cast<size_t>(oc) * static_cast<size_t>(N) + static_cast<size_t>(n)] = g;
    }

  ConstMapMat dY(dpre.data(), cs.out_c, N);
  ConstMapMat Cm(cache.cols.data(), K, N);
  ConstMapMat Wm(W.data(), cs.out_c, K);

  MapMat dWm(dW_acc.data(), cs.out_c, K);
  dWm.noalias() += dY * Cm.transpose();
  for (int oc = 0; oc < cs.out_c; ++oc) db_acc[static_cast<size_t>(oc)] += dY.row(oc).sum();

  std::vector<double> dcols(static_cast<size_t>(K) * static_cast<size_t>(N));
  MapMat dCm(dcols.data(), K, N);
  dCm.noalias() = Wm.transpose() * dY;

  Tensor dx;
  col2im(dcols, cs, cache.in_h, cache.in_w, oh, ow, dx);
  return dx;
}

ConvSpec stage_spec(const ModelConfig& cfg, int stage) {
  const int in_c = stage == 0 ? 3 : cfg.channels[static_cast<size_t>(stage - 1)];
  return {in_c, cfg.channels[static_cast<size_t>(stage)], 3,
          cfg.strides[static_cast<size_t>(stage)], 1};
}

// Reflect-pads an image so both dimensions are multiples of `multiple`.
Image pad_to_multiple(const Image& x, int multiple) {
  const int h = x.dim(0), w = x.dim(1);
  const int ph = (multiple - h % multiple) % multiple;
  const int pw = (multiple - w % multiple) % multiple;
  if (ph == 0 && pw == 0) return x;
  Image out = make_image(h + ph, w + pw);
  for (int y = 0; y < h + ph; ++y) {
    int sy = y < h ? y : 2 * h - 2 - y;
    sy = std::clamp(sy, 0, h - 1);
    for (int xx = 0; xx < w + pw; ++xx) {
      int sx = xx < w ? xx : 2 * w - 2 - xx;
      sx = std::clamp(sx, 0, w - 1);
      for (int c = 0; c < 3; ++c) out.at(y, xx, c) = x.at(sy, sx, c);
    }
  }
  return out;
}

}  // namespace nn

struct EncoderCache {
  std::vector<nn::ConvCache> stages;
};

struct SegCache {
  nn::ConvCache head;
  int lr_h = 0, lr_w = 0;
};

struct ProjCache {
  nn::ConvCache fc1;
  nn::ConvCache fc2;
  Tensor raw;       // pre-normalization embeddings
  Tensor inv_norm;  // per-pixel 1/sqrt(|v|^2 + eps)
};

void ParamSet::ensure_grads() {
  for (const auto& [name, v] : values) {
    auto it = grads.find(name);
    if (it == grads.end()) grads.emplace(name, Tensor(v.shape()));
  }
}

void ParamSet::zero_grads() {
  ensure_grads();
  for (auto& [name, g] : grads) g.fill(0.0);
}

Tensor& ParamSet::grad(const std::string& name) {
  auto it = grads.find(name);
  if (it == grads.end()) it = grads.emplace(name, Tensor(values.at(name).shape())).first;
  return it->second;
}

namespace {

class TinyConvEncoder : public FeatureExtractor {
 public:
  explicit TinyConvEncoder(ModelConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.channels.size() != cfg_.strides.size() || cfg_.channels.empty())
      throw ConfigError("model: channels/strides must be non-empty and equal length");
  }

  int stride() const override { return cfg_.feature_stride(); }
  int feature_dim() const override { return cfg_.feature_dim(); }

  void init_params(ParamSet& params, RngStream& rng) const override {
    for (size_t s = 0; s < cfg_.channels.size(); ++s) {
      const nn::ConvSpec cs = nn::stage_spec(cfg_, static_cast<int>(s));
      Tensor W({cs.out_c, cs.k, cs.k, cs.in_c});
      const double std = std::sqrt(2.0 / (cs.k * cs.k * cs.in_c));
      for (size_t i = 0; i < W.numel(); ++i) W[i] = rng.normal(0.0, std);
      params.values["enc.c" + std::to_string(s + 1) + ".w"] = std::move(W);
      params.values["enc.c" + std::to_string(s + 1) + ".b"] = Tensor({cs.out_c});
    }
  }

  FeatureMap forward(const ParamSet& params, const Image& x,
                     std::shared_ptr<EncoderCache>* cache) const override {
    if (!x.all_finite()) throw NumericError("forward_features: non-finite input");
    std::shared_ptr<EncoderCache> ec;
    if (cache) {
      ec = std::make_shared<EncoderCache>();
      ec->stages.resize(cfg_.channels.size());
    }
    Image cur = nn::pad_to_multiple(x, stride());
    for (size_t s = 0; s < cfg_.channels.size(); ++s) {
      const nn::ConvSpec cs = nn::stage_spec(cfg_, static_cast<int>(s));
      const std::string base = "enc.c" + std::to_string(s + 1);
      cur = nn::conv_forward(cur, params.values.at(base + ".w"), params.values.at(base + ".b"),
                             cs, /*relu=*/true, ec ? &ec->stages[s] : nullptr);
    }
    if (cache) *cache = ec;
    return {std::move(cur), stride()};
  }

  void backward(const ParamSet& params, ParamSet& grad_sink, const EncoderCache& cache,
                const Tensor& dfeatures) const override {
    Tensor dcur = dfeatures;
    for (int s = static_cast<int>(cfg_.channels.size()) - 1; s >= 0; --s) {
      const nn::ConvSpec cs = nn::stage_spec(cfg_, s);
      const std::string base = "enc.c" + std::to_string(s + 1);
      dcur = nn::conv_backward(params.values.at(base + ".w"), cs,
                               cache.stages[static_cast<size_t>(s)], /*relu=*/true, dcur,
                               grad_sink.grad(base + ".w"), grad_sink.grad(base + ".b"));
    }
    // Gradient w.r.t. the input image is discarded (images are data, not params).
  }

 private:
  ModelConfig cfg_;
};

}  // namespace

std::shared_ptr<const FeatureExtractor> make_extractor(const ModelConfig& config) {
  if (config.architecture_id == "tiny4") return std::make_shared<TinyConvEncoder>(config);
  throw ConfigError("model: unknown architecture_id '" + config.architecture_id + "'");
}

ModelBundle make_model(const ModelConfig& config, RngStream& rng) {
  if (config.num_classes <= 0) throw ConfigError("model: num_classes must be positive");
  ModelBundle m;
  m.config = config;
  m.extractor = make_extractor(config);
  m.extractor->init_params(m.student, rng);

  const int D = config.feature_dim();
  {  // 1×1 segmentation head
    Tensor W({config.num_classes, 1, 1, D});
    const double std = std::sqrt(1.0 / D);
    for (size_t i = 0; i < W.numel(); ++i) W[i] = rng.normal(0.0, std);
    m.student.values["seg.w"] = std::move(W);
    m.student.values["seg.b"] = Tensor({config.num_classes});
  }
  {  // 2-layer projection head
    Tensor W1({config.proj_hidden, 1, 1, D});
    const double std1 = std::sqrt(2.0 / D);
    for (size_t i = 0; i < W1.numel(); ++i) W1[i] = rng.normal(0.0, std1);
    m.student.values["proj.fc1.w"] = std::move(W1);
    // Small positive bias keeps raw embeddings away from the exact-zero
    // vector at dead-feature pixels (the normalization guard would return 0).
    m.student.values["proj.fc1.b"] = Tensor::full({config.proj_hidden}, 0.01);
    Tensor W2({config.embedding_dim, 1, 1, config.proj_hidden});
    const double std2 = std::sqrt(1.0 / config.proj_hidden);
    for (size_t i = 0; i < W2.numel(); ++i) W2[i] = rng.normal(0.0, std2);
    m.student.values["proj.fc2.w"] = std::move(W2);
    m.student.values["proj.fc2.b"] = Tensor({config.embedding_dim});
  }

  // Teacher: extractor + segmentation head only, copied from the student.
  for (const auto& [name, v] : m.student.values)
    if (name.rfind("proj.", 0) != 0) m.teacher.values[name] = v;
  return m;
}

FeatureMap forward_features(const ModelBundle& m, const ParamSet& params, const Image& x,
                            std::shared_ptr<EncoderCache>* cache) {
  return m.extractor->forward(params, x, cache);
}

void encoder_backward(const ModelBundle& m, const ParamSet& params, ParamSet& grad_sink,
                      const EncoderCache& cache, const Tensor& dfeatures) {
  m.extractor->backward(params, grad_sink, cache, dfeatures);
}

Tensor bilinear_resize(const Tensor& src, int out_h, int out_w) {
  const int h = src.dim(0), w = src.dim(1), C = src.dim(2);
  if (h == out_h && w == out_w) return src;
  Tensor out({out_h, out_w, C});
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      for (int c = 0; c < C; ++c) {
        out.at(y, x, c) = (1 - wy) * ((1 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c)) +
                          wy * ((1 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c));
      }
    }
  }
  return out;
}

namespace {

Tensor bilinear_resize_backward(const Tensor& dout, int in_h, int in_w) {
  const int oh = dout.dim(0), ow = dout.dim(1), C = dout.dim(2);
  if (oh == in_h && ow == in_w) return dout;
  Tensor din({in_h, in_w, C});
  const double sy = static_cast<double>(in_h) / oh, sx = static_cast<double>(in_w) / ow;
  for (int y = 0; y < oh; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(in_h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, in_h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < ow; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(in_w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, in_w - 1);
      const double wx = fx - x0;
      for (int c = 0; c < C; ++c) {
        const double g = dout.at(y, x, c);
        din.at(y0, x0, c) += (1 - wy) * (1 - wx) * g;
        din.at(y0, x1, c) += (1 - wy) * wx * g;
        din.at(y1, x0, c) += wy * (1 - wx) * g;
        din.at(y1, x1, c) += wy * wx * g;
      }
    }
  }
  return din;
}

}  // namespace

Logits segment(const ModelConfig& config, const ParamSet& params, const FeatureMap& f, int out_h,
               int out_w, std::shared_ptr<SegCache>* cache) {
  if (!f.features.all_finite()) throw NumericError("segment: non-finite features");
  const nn::ConvSpec cs{config.feature_dim(), config.num_classes, 1, 1, 0};
  std::shared_ptr<SegCache> sc;
  if (cache) sc = std::make_shared<SegCache>();
  Tensor lr = nn::conv_forward(f.features, params.values.at("seg.w"), params.values.at("seg.b"),
                               cs, /*relu=*/false, sc ? &sc->head : nullptr);
  if (sc) {
    sc->lr_h = lr.dim(0);
    sc->lr_w = lr.dim(1);
    *cache = sc;
  }
  return {bilinear_resize(lr, out_h, out_w)};
}

Tensor segment_backward(const ModelConfig& config, const ParamSet& params, ParamSet& grad_sink,
                        const SegCache& cache, const Tensor& dlogits) {
  const Tensor dlr = bilinear_resize_backward(dlogits, cache.lr_h, cache.lr_w);
  const nn::ConvSpec cs{config.feature_dim(), config.num_classes, 1, 1, 0};
  return nn::conv_backward(params.values.at("seg.w"), cs, cache.head, /*relu=*/false, dlr,
                           grad_sink.grad("seg.w"), grad_sink.grad("seg.b"));
}

EmbeddingMap project(const ModelConfig& config, const ParamSet& params, const FeatureMap& f,
                     std::shared_ptr<ProjCache>* cache) {
  if (!f.features.all_finite()) throw NumericError("project: non-finite features");
  std::shared_ptr<ProjCache> pc;
  if (cache) pc = std::make_shared<ProjCache>();

  const nn::ConvSpec cs1{config.feature_dim(), config.proj_hidden, 1, 1, 0};
  Tensor hidden = nn::conv_forward(f.features, params.values.at("proj.fc1.w"),
                                   params.values.at("proj.fc1.b"), cs1, /*relu=*/true,
                                   pc ? &pc->fc1 : nullptr);
  const nn::ConvSpec cs2{config.proj_hidden, config.embedding_dim, 1, 1, 0};
  Tensor raw = nn::conv_forward(hidden, params.values.at("proj.fc2.w"),
                                params.values.at("proj.fc2.b"), cs2, /*relu=*/false,
                                pc ? &pc->fc2 : nullptr);

  const int h = raw.dim(0), w = raw.dim(1), E = raw.dim(2);
  Tensor unit({h, w, E});
  Tensor inv_norm({h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s2 = 0.0;
      for (int e = 0; e < E; ++e) s2 += raw.at(y, x, e) * raw.at(y, x, e);
      const double r = 1.0 / std::sqrt(s2 + nn::kNormEps2);
      inv_norm.at(y, x) = r;
      for (int e = 0; e < E; ++e) unit.at(y, x, e) = raw.at(y, x, e) * r;
    }
  }
  if (pc) {
    pc->raw = std::move(raw);
    pc->inv_norm = std::move(inv_norm);
    *cache = pc;
  }
  return {std::move(unit)};
}

Tensor project_backward(const ModelConfig& config, const ParamSet& params, ParamSet& grad_sink,
                        const ProjCache& cache, const Tensor& dembeddings) {
  const int h = cache.raw.dim(0), w = cache.raw.dim(1), E = cache.raw.dim(2);
  // Through the normalization: dv = r * (du - u (u · du)).
  Tensor draw({h, w, E});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double r = cache.inv_norm.at(y, x);
      double dot = 0.0;
      for (int e = 0; e < E; ++e) dot += cache.raw.at(y, x, e) * r * dembeddings.at(y, x, e);
      for (int e = 0; e < E; ++e)
        draw.at(y, x, e) = r * (dembeddings.at(y, x, e) - cache.raw.at(y, x, e) * r * dot);
    }
  }
  const nn::ConvSpec cs2{config.proj_hidden, config.embedding_dim, 1, 1, 0};
  Tensor dhidden = nn::conv_backward(params.values.at("proj.fc2.w"), cs2, cache.fc2,
                                     /*relu=*/false, draw, grad_sink.grad("proj.fc2.w"),
                                     grad_sink.grad("proj.fc2.b"));
  const nn::ConvSpec cs1{config.feature_dim(), config.proj_hidden, 1, 1, 0};
  return nn::conv_backward(params.values.at("proj.fc1.w"), cs1, cache.fc1, /*relu=*/true,
                           dhidden, grad_sink.grad("proj.fc1.w"),
                           grad_sink.grad("proj.fc1.b"));
}

}  // namespace udaseg
