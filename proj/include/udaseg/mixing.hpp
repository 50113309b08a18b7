#pragma once

#include <vector>

#include "udaseg/rng.hpp"
#include "udaseg/taxonomy.hpp"
#include "udaseg/tensor.hpp"

namespace udaseg {

// Binary cross-domain mix mask: 1 = take the source pixel, 0 = take the
// target pixel. mask[i,j] == 1 exactly where the source label is in
// selected_classes (ignore_id is never selected, so ignored source pixels
// are never copied).
struct MixMask {
  LabelMap mask;  // values strictly in {0,1}
  std::vector<int> selected_classes;
};

// Uniformly samples ceil(fraction * |present|) distinct classes from the
// classes present in y_source (ignore_id excluded). Returned sorted.
std::vector<int> select_classes(const LabelMap& y_source, int ignore_id, double fraction,
                                RngStream& rng);

// select_classes, then expanded with each class's related set and intersected
// with the classes present in the image.
std::vector<int> prior_guided_select(const LabelMap& y_source, const ClassTaxonomy& taxonomy,
                                     double fraction, RngStream& rng);

MixMask build_mix_mask(const LabelMap& y_source, const std::vector<int>& classes, int ignore_id);

// x_mix = M*x_S + (1-M)*x_T, y_mix = M*y_S + (1-M)*y_T, per pixel.
struct Mixed {
  Image image;
  LabelMap label;
};
Mixed apply_mix(const Image& x_source, const LabelMap& y_source, const Image& x_target,
                const LabelMap& y_target, const MixMask& m);

// Writes a horizontal (source | target | mixed | mask) strip for inspection.
void dump_mix_strip(const Image& x_source, const Image& x_target, const Image& x_mix,
                    const MixMask& m, const std::string& path);

}  // namespace udaseg
