#pragma once

#include <string>
#include <vector>

#include "udaseg/rng.hpp"
#include "udaseg/tensor.hpp"

namespace udaseg {

// Patch occlusion mask: 1 = pixel kept, 0 = pixel masked out. Constant within
// every patch_size×patch_size cell; a patch is kept iff its uniform draw
// exceeds ratio, so the masked fraction is ratio in expectation.
struct PatchMask {
  LabelMap mask;
  int patch_size = 0;
  double ratio = 0.0;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<double> grid;  // the raw uniform draws, row-major grid_h×grid_w

  double masked_fraction() const;
};

// Edge patches are truncated when patch_size does not divide h or w; the
// per-patch draw still covers the partial cell.
PatchMask generate_patch_mask(int h, int w, int patch_size, double ratio, RngStream& rng);

// x_masked = mask ⊗ x; masked pixels are exactly zero, kept pixels bit-equal.
Image apply_mask(const Image& x, const PatchMask& pm);

void dump_masked_image(const Image& x_masked, const std::string& path);

}  // namespace udaseg
