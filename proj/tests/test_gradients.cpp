#include <doctest.h>

#include <cmath>
#include <functional>

#include "udaseg/losses.hpp"
#include "udaseg/model.hpp"

using namespace udaseg;

namespace {

constexpr int kIgnore = 255;

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1e-6, std::abs(a), std::abs(b)});
}

// Central finite difference of f along component i of t.
double central_diff(Tensor& t, size_t i, const std::function<double()>& f, double h) {
  const double saved = t[i];
  t[i] = saved + h;
  const double up = f();
  t[i] = saved - h;
  const double down = f();
  t[i] = saved;
  return (up - down) / (2.0 * h);
}

LabelMap random_label(int h, int w, int C, RngStream& rng, double ignore_prob = 0.0) {
  LabelMap m(h, w);
  for (auto& v : m.ids)
    v = rng.bernoulli(ignore_prob)
            ? static_cast<std::uint8_t>(kIgnore)
            : static_cast<std::uint8_t>(rng.uniform_below(static_cast<std::uint64_t>(C)));
  return m;
}

}  // namespace

TEST_CASE("cross_entropy gradient matches central differences on 20+ instances") {
  RngStream rng(101, 0);
  for (int trial = 0; trial < 24; ++trial) {
    const int C = 3 + static_cast<int>(rng.uniform_below(3));
    Tensor logits({4, 4, C});
    for (size_t i = 0; i < logits.numel(); ++i) logits[i] = rng.normal(0.0, 2.0);
    const LabelMap y = random_label(4, 4, C, rng, trial % 3 == 0 ? 0.25 : 0.0);
    Tensor weight({4, 4});
    for (size_t i = 0; i < weight.numel(); ++i) weight[i] = rng.uniform(0.1, 1.0);
    const Tensor* wptr = trial % 2 == 0 ? &weight : nullptr;

    Tensor grad;
    cross_entropy(logits, y, kIgnore, wptr, &grad);
    const auto eval = [&] { return cross_entropy(logits, y, kIgnore, wptr).value; };
    for (size_t i = 0; i < logits.numel(); ++i) {
      const double fd = central_diff(logits, i, eval, 1e-6);
      CHECK(rel_err(grad[i], fd) <= 1e-4);
    }
  }
}

TEST_CASE("contrastive gradient matches central differences on 20+ instances") {
  RngStream rng(103, 0);
  for (int trial = 0; trial < 22; ++trial) {
    const int h = 3, w = 3, E = 4;
    Tensor emb({h, w, E});
    for (size_t i = 0; i < emb.numel(); ++i) emb[i] = rng.normal(0.0, 1.0);
    LabelMap grid = random_label(h, w, 3, rng, trial % 4 == 0 ? 0.2 : 0.0);

    ContrastiveConfig cfg;
    cfg.temperature = trial % 2 == 0 ? 0.5 : 0.1;
    // Caps above the pixel count make the sampled set the full set, so the
    // loss is a pure function of the embeddings.
    cfg.max_anchors_per_class = 64;
    cfg.max_pixels_total = 64;

    RngStream probe(1, 0);
    if (contrastive_loss(emb, grid, kIgnore, cfg, probe).degenerate) continue;

    Tensor grad;
    RngStream gr(1, 0);
    contrastive_loss(emb, grid, kIgnore, cfg, gr, &grad);
    const auto eval = [&] {
      RngStream r(1, 0);
      return contrastive_loss(emb, grid, kIgnore, cfg, r).value;
    };
    for (size_t i = 0; i < emb.numel(); ++i) {
      const double fd = central_diff(emb, i, eval, 1e-6);
      CHECK(rel_err(grad[i], fd) <= 1e-4);
    }
  }
}

TEST_CASE("end-to-end parameter gradients match central differences (3-class 16x16)") {
  ModelConfig mc;
  mc.num_classes = 3;
  mc.channels = {4, 4, 6, 6};
  mc.strides = {2, 2, 1, 1};
  mc.proj_hidden = 8;
  mc.embedding_dim = 4;

  RngStream init_rng(7, 0);
  ModelBundle bundle = make_model(mc, init_rng);

  RngStream data_rng(9, 0);
  Image x = make_image(16, 16);
  for (size_t i = 0; i < x.numel(); ++i) x[i] = data_rng.uniform();
  const LabelMap y = random_label(16, 16, 3, data_rng, 0.1);

  ContrastiveConfig ccfg;
  ccfg.temperature = 0.5;
  ccfg.max_anchors_per_class = 64;
  ccfg.max_pixels_total = 64;  // 4x4 grid: the full set is always sampled
  const double lambda_pix = 0.3;

  // Scalar objective: CE on the upsampled logits + lambda * contrastive on the
  // projected embeddings, both through the shared extractor features.
  const auto total_loss = [&]() {
    const FeatureMap f = forward_features(bundle, bundle.student, x, nullptr);
    const Logits logits = segment(mc, bundle.student, f, 16, 16, nullptr);
    const double ce = cross_entropy(logits.scores, y, kIgnore).value;
    const EmbeddingMap em = project(mc, bundle.student, f, nullptr);
    const LabelMap grid = downsample_labels_nearest(y, em.embeddings.dim(0), em.embeddings.dim(1));
    RngStream r(1, 0);
    const double pix = contrastive_loss(em.embeddings, grid, kIgnore, ccfg, r).value;
    return ce + lambda_pix * pix;
  };

  // Analytic gradients through the full backward path.
  bundle.student.zero_grads();
  {
    std::shared_ptr<EncoderCache> ec;
    const FeatureMap f = forward_features(bundle, bundle.student, x, &ec);
    std::shared_ptr<SegCache> sc;
    const Logits logits = segment(mc, bundle.student, f, 16, 16, &sc);
    Tensor dlogits;
    cross_entropy(logits.scores, y, kIgnore, nullptr, &dlogits);
    Tensor dfeat = segment_backward(mc, bundle.student, bundle.student, *sc, dlogits);

    std::shared_ptr<ProjCache> pc;
    const EmbeddingMap em = project(mc, bundle.student, f, &pc);
    const LabelMap grid = downsample_labels_nearest(y, em.embeddings.dim(0), em.embeddings.dim(1));
    Tensor demb;
    RngStream r(1, 0);
    contrastive_loss(em.embeddings, grid, kIgnore, ccfg, r, &demb);
    for (size_t i = 0; i < demb.numel(); ++i) demb[i] *= lambda_pix;
    const Tensor dfeat_pix = project_backward(mc, bundle.student, bundle.student, *pc, demb);
    dfeat.add_scaled(dfeat_pix, 1.0);
    encoder_backward(bundle, bundle.student, bundle.student, *ec, dfeat);
  }

  long checked = 0, failures = 0;
  for (auto& [name, value] : bundle.student.values) {
    const Tensor& grad = bundle.student.grad(name);
    // Every 3rd component keeps the run fast while covering every layer.
    for (size_t i = 0; i < value.numel(); i += 3) {
      const double fd = central_diff(value, i, total_loss, 1e-5);
      if (rel_err(grad[i], fd) > 1e-4) ++failures;
      ++checked;
    }
  }
  CHECK(checked > 300);
  CHECK(failures == 0);
}
