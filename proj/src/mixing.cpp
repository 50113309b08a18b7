#include "udaseg/mixing.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "udaseg/errors.hpp"
#include "udaseg/image_io.hpp"

namespace udaseg {

namespace {

std::vector<int> present_classes(const LabelMap& y, int ignore_id) {
  std::set<int> present;
  for (auto id : y.ids)
    if (static_cast<int>(id) != ignore_id) present.insert(static_cast<int>(id));
  return {present.begin(), present.end()};
}

}  // namespace

std::vector<int> select_classes(const LabelMap& y_source, int ignore_id, double fraction,
                                RngStream& rng) {
  if (fraction < 0.0 || fraction > 1.0)
    throw ConfigError("select_classes: fraction must be in [0,1]");
  const auto present = present_classes(y_source, ignore_id);
  if (present.empty()) return {};
  const int k = static_cast<int>(
      std::ceil(fraction * static_cast<double>(present.size())));
  const auto picks = rng.sample_without_replacement(static_cast<int>(present.size()), k);
  std::vector<int> out;
  out.reserve(picks.size());
  for (int i : picks) out.push_back(present[static_cast<size_t>(i)]);
  return out;
}

std::vector<int> prior_guided_select(const LabelMap& y_source, const ClassTaxonomy& taxonomy,
                                     double fraction, RngStream& rng) {
  const auto base = select_classes(y_source, taxonomy.ignore_id(), fraction, rng);
  const std::set<int> expanded =
      expand_with_related(std::set<int>(base.begin(), base.end()), taxonomy);
  const auto present = present_classes(y_source, taxonomy.ignore_id());
  std::vector<int> out;
  for (int c : expanded)
    if (std::binary_search(present.begin(), present.end(), c)) out.push_back(c);
  return out;
}

MixMask build_mix_mask(const LabelMap& y_source, const std::vector<int>& classes, int ignore_id) {
  std::vector<bool> member(256, false);
  for (int c : classes) {
    if (c < 0 || c > 255) throw ConfigError("build_mix_mask: class ID out of range");
    if (c != ignore_id) member[static_cast<size_t>(c)] = true;
  }
  MixMask mm;
  mm.selected_classes = classes;
  mm.mask = LabelMap(y_source.h, y_source.w, 0);
  for (size_t i = 0; i < y_source.ids.size(); ++i)
    mm.mask.ids[i] = member[y_source.ids[i]] ? 1 : 0;
  return mm;
}

Mixed apply_mix(const Image& x_source, const LabelMap& y_source, const Image& x_target,
                const LabelMap& y_target, const MixMask& m) {
  const int h = m.mask.h, w = m.mask.w;
  if (x_source.dim(0) != h || x_source.dim(1) != w || x_target.dim(0) != h ||
      x_target.dim(1) != w || y_source.h != h || y_source.w != w || y_target.h != h ||
      y_target.w != w)
    throw DataError("apply_mix: spatial size mismatch");

  Mixed out;
  out.image = make_image(h, w);
  out.label = LabelMap(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const bool take_source = m.mask.at(y, x) != 0;
      for (int c = 0; c < 3; ++c)
        out.image.at(y, x, c) = take_source ? x_source.at(y, x, c) : x_target.at(y, x, c);
      out.label.at(y, x) = take_source ? y_source.at(y, x) : y_target.at(y, x);
    }
  }
  return out;
}

void dump_mix_strip(const Image& x_source, const Image& x_target, const Image& x_mix,
                    const MixMask& m, const std::string& path) {
  const int h = m.mask.h, w = m.mask.w;
  Image strip = make_image(h, 4 * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        strip.at(y, x, c) = x_source.at(y, x, c);
        strip.at(y, w + x, c) = x_target.at(y, x, c);
        strip.at(y, 2 * w + x, c) = x_mix.at(y, x, c);
        strip.at(y, 3 * w + x, c) = m.mask.at(y, x) ? 1.0 : 0.0;
      }
    }
  }
  write_image_png(path, strip);
}

}  // namespace udaseg
