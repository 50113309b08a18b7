#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "udaseg/errors.hpp"
#include "udaseg/mixing.hpp"

using namespace udaseg;

namespace {

constexpr int kIgnore = 255;

ClassTaxonomy toy_taxonomy(bool active_groups = true) {
  std::set<std::string> active;
  if (active_groups) active = {"construction", "nature"};
  return ClassTaxonomy(6, kIgnore, {"ground", "sky", "building", "wall", "tree", "bush"},
                       {{"construction", {2, 3}}, {"nature", {4, 5}}}, active);
}

LabelMap label_from(const std::vector<std::vector<int>>& rows) {
  LabelMap m(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) m.at(y, x) = static_cast<std::uint8_t>(rows[static_cast<size_t>(y)][static_cast<size_t>(x)]);
  return m;
}

Image random_image(int h, int w, RngStream& rng) {
  Image img = make_image(h, w);
  for (size_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform();
  return img;
}

LabelMap random_label(int h, int w, int num_classes, RngStream& rng, double ignore_prob = 0.1) {
  LabelMap m(h, w);
  for (auto& v : m.ids)
    v = rng.bernoulli(ignore_prob)
            ? static_cast<std::uint8_t>(kIgnore)
            : static_cast<std::uint8_t>(rng.uniform_below(static_cast<std::uint64_t>(num_classes)));
  return m;
}

}  // namespace

TEST_CASE("select_classes picks ceil(fraction * present) distinct present classes") {
  RngStream rng(1, 0);
  const LabelMap y = label_from({{0, 1}, {2, 3}});
  const auto picked = select_classes(y, kIgnore, 0.5, rng);
  CHECK(picked.size() == 2);
  for (int c : picked) CHECK(std::set<int>{0, 1, 2, 3}.count(c) == 1);

  const auto all = select_classes(y, kIgnore, 1.0, rng);
  CHECK(all == std::vector<int>{0, 1, 2, 3});

  // 3-class image at 0.5 rounds up to 2 classes.
  const LabelMap y3 = label_from({{0, 1, 2}});
  CHECK(select_classes(y3, kIgnore, 0.5, rng).size() == 2);
}

TEST_CASE("select_classes on an all-ignore label is empty") {
  RngStream rng(1, 0);
  const LabelMap y = label_from({{kIgnore, kIgnore}});
  CHECK(select_classes(y, kIgnore, 0.5, rng).empty());
}

TEST_CASE("select_classes samples 2-subsets of 4 classes uniformly") {
  RngStream rng(17, 0);
  const LabelMap y = label_from({{0, 1}, {2, 3}});
  std::map<std::pair<int, int>, int> hist;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto picked = select_classes(y, kIgnore, 0.5, rng);
    REQUIRE(picked.size() == 2);
    ++hist[{picked[0], picked[1]}];
  }
  CHECK(hist.size() == 6);
  for (const auto& [pair, count] : hist)
    CHECK(std::abs(count / static_cast<double>(n) - 1.0 / 6) < 0.02);
}

TEST_CASE("prior_guided_select appends related classes present in the image") {
  const ClassTaxonomy tax = toy_taxonomy();
  // wall(3) and building(2) both present: selecting wall must pull in building.
  const LabelMap y = label_from({{3, 3}, {2, 0}});
  for (int trial = 0; trial < 50; ++trial) {
    RngStream rng(static_cast<std::uint64_t>(trial), 0);
    const auto picked = prior_guided_select(y, tax, 0.34, rng);  // base pick: 1 class
    const std::set<int> s(picked.begin(), picked.end());
    if (s.count(3)) CHECK(s.count(2) == 1);
    if (s.count(2)) CHECK(s.count(3) == 1);
    // One-line set oracle: expansion intersected with present classes.
    RngStream replay(static_cast<std::uint64_t>(trial), 0);
    const auto base = select_classes(y, kIgnore, 0.34, replay);
    std::set<int> expect;
    for (int c : expand_with_related({base.begin(), base.end()}, tax))
      if (c == 0 || c == 2 || c == 3) expect.insert(c);
    CHECK(s == expect);
  }
}

TEST_CASE("prior_guided_select does not invent absent classes") {
  const ClassTaxonomy tax = toy_taxonomy();
  // Only wall(3) present from the construction group: building must stay absent.
  const LabelMap y = label_from({{3, 0}, {0, 1}});
  RngStream rng(5, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const auto picked = prior_guided_select(y, tax, 1.0, rng);
    for (int c : picked) CHECK(c != 2);
  }
}

TEST_CASE("prior_guided_select with no active groups equals select_classes") {
  const ClassTaxonomy tax = toy_taxonomy(/*active_groups=*/false);
  const LabelMap y = label_from({{0, 1}, {2, 3}});
  for (int trial = 0; trial < 50; ++trial) {
    RngStream a(static_cast<std::uint64_t>(trial), 1), b(static_cast<std::uint64_t>(trial), 1);
    CHECK(prior_guided_select(y, tax, 0.5, a) == select_classes(y, kIgnore, 0.5, b));
  }
}

TEST_CASE("build_mix_mask is exactly the membership test") {
  const LabelMap y = label_from({{0, 1, 2}, {3, kIgnore, 0}});
  SUBCASE("empty class list -> all-zero mask") {
    const MixMask mm = build_mix_mask(y, {}, kIgnore);
    for (auto v : mm.mask.ids) CHECK(v == 0);
  }
  SUBCASE("all present classes -> 1 exactly off-ignore") {
    const MixMask mm = build_mix_mask(y, {0, 1, 2, 3}, kIgnore);
    for (int yy = 0; yy < y.h; ++yy)
      for (int xx = 0; xx < y.w; ++xx)
        CHECK(mm.mask.at(yy, xx) == (y.at(yy, xx) != kIgnore ? 1 : 0));
  }
  SUBCASE("random labels/classes match a per-pixel membership oracle") {
    RngStream rng(23, 0);
    for (int trial = 0; trial < 200; ++trial) {
      const LabelMap yl = random_label(8, 8, 6, rng);
      std::vector<int> classes;
      for (int c = 0; c < 6; ++c)
        if (rng.bernoulli(0.5)) classes.push_back(c);
      const MixMask mm = build_mix_mask(yl, classes, kIgnore);
      for (int yy = 0; yy < 8; ++yy)
        for (int xx = 0; xx < 8; ++xx) {
          const bool member =
              std::find(classes.begin(), classes.end(), static_cast<int>(yl.at(yy, xx))) !=
              classes.end();
          CHECK(mm.mask.at(yy, xx) == (member ? 1 : 0));
        }
    }
  }
}

TEST_CASE("apply_mix endpoint masks return the inputs exactly") {
  RngStream rng(3, 0);
  const Image xs = random_image(6, 5, rng), xt = random_image(6, 5, rng);
  const LabelMap ys = random_label(6, 5, 6, rng), yt = random_label(6, 5, 6, rng);

  MixMask zeros;
  zeros.mask = LabelMap(6, 5, 0);
  const Mixed m0 = apply_mix(xs, ys, xt, yt, zeros);
  for (size_t i = 0; i < xt.numel(); ++i) CHECK(m0.image[i] == xt[i]);
  CHECK(m0.label == yt);

  MixMask ones;
  ones.mask = LabelMap(6, 5, 1);
  const Mixed m1 = apply_mix(xs, ys, xt, yt, ones);
  for (size_t i = 0; i < xs.numel(); ++i) CHECK(m1.image[i] == xs[i]);
  CHECK(m1.label == ys);
}

TEST_CASE("apply_mix equals the per-pixel arithmetic oracle on random inputs") {
  RngStream rng(29, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const Image xs = random_image(7, 9, rng), xt = random_image(7, 9, rng);
    const LabelMap ys = random_label(7, 9, 6, rng), yt = random_label(7, 9, 6, rng);
    MixMask mm;
    mm.mask = LabelMap(7, 9);
    for (auto& v : mm.mask.ids) v = rng.bernoulli(0.5) ? 1 : 0;
    const Mixed mixed = apply_mix(xs, ys, xt, yt, mm);
    for (int y = 0; y < 7; ++y)
      for (int x = 0; x < 9; ++x) {
        const double M = mm.mask.at(y, x);
        for (int c = 0; c < 3; ++c)
          CHECK(mixed.image.at(y, x, c) == M * xs.at(y, x, c) + (1 - M) * xt.at(y, x, c));
        CHECK(static_cast<double>(mixed.label.at(y, x)) ==
              M * ys.at(y, x) + (1 - M) * yt.at(y, x));
      }
  }
}

TEST_CASE("self-mix identity and pixel provenance") {
  RngStream rng(31, 0);
  const Image x = random_image(8, 8, rng);
  const LabelMap y = random_label(8, 8, 6, rng);
  MixMask mm;
  mm.mask = LabelMap(8, 8);
  for (auto& v : mm.mask.ids) v = rng.bernoulli(0.3) ? 1 : 0;
  const Mixed mixed = apply_mix(x, y, x, y, mm);
  for (size_t i = 0; i < x.numel(); ++i) CHECK(mixed.image[i] == x[i]);
  CHECK(mixed.label == y);
}

TEST_CASE("class conservation: y_mix classes come from c or the target") {
  RngStream rng(37, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const LabelMap ys = random_label(10, 10, 6, rng), yt = random_label(10, 10, 6, rng);
    const Image xs = random_image(10, 10, rng), xt = random_image(10, 10, rng);
    const auto classes = select_classes(ys, kIgnore, 0.5, rng);
    const MixMask mm = build_mix_mask(ys, classes, kIgnore);
    const Mixed mixed = apply_mix(xs, ys, xt, yt, mm);
    std::set<int> allowed(classes.begin(), classes.end());
    for (auto v : yt.ids) allowed.insert(static_cast<int>(v));
    for (auto v : mixed.label.ids) CHECK(allowed.count(static_cast<int>(v)) == 1);
  }
}

TEST_CASE("apply_mix rejects size mismatches") {
  RngStream rng(2, 0);
  const Image xs = random_image(4, 4, rng), xt = random_image(5, 4, rng);
  const LabelMap ys = random_label(4, 4, 6, rng), yt = random_label(5, 4, 6, rng);
  MixMask mm;
  mm.mask = LabelMap(4, 4, 1);
  CHECK_THROWS_AS(apply_mix(xs, ys, xt, yt, mm), DataError);
}
