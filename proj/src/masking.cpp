#include "udaseg/masking.hpp"

#include <algorithm>

#include "udaseg/errors.hpp"
#include "udaseg/image_io.hpp"

namespace udaseg {

double PatchMask::masked_fraction() const {
  if (mask.numel() == 0) return 0.0;
  size_t masked = 0;
  for (auto v : mask.ids)
    if (v == 0) ++masked;
  return static_cast<double>(masked) / static_cast<double>(mask.numel());
}

PatchMask generate_patch_mask(int h, int w, int patch_size, double ratio, RngStream& rng) {
  if (patch_size <= 0) throw ConfigError("generate_patch_mask: patch_size must be positive");
  if (ratio < 0.0 || ratio > 1.0)
    throw ConfigError("generate_patch_mask: ratio must be in [0,1]");
  if (h <= 0 || w <= 0) throw ConfigError("generate_patch_mask: degenerate size");

  PatchMask pm;
  pm.patch_size = patch_size;
  pm.ratio = ratio;
  pm.grid_h = (h + patch_size - 1) / patch_size;
  pm.grid_w = (w + patch_size - 1) / patch_size;
  pm.grid.resize(static_cast<size_t>(pm.grid_h) * static_cast<size_t>(pm.grid_w));
  pm.mask = LabelMap(h, w, 0);

  for (int p = 0; p < pm.grid_h; ++p) {
    for (int q = 0; q < pm.grid_w; ++q) {
      const double u = rng.uniform();  // open (0,1): ratio 0 keeps everything
      pm.grid[static_cast<size_t>(p) * static_cast<size_t>(pm.grid_w) + static_cast<size_t>(q)] = u;
      const std::uint8_t kept = u > ratio ? 1 : 0;
      const int y0 = p * patch_size, y1 = std::min(h, y0 + patch_size);
      const int x0 = q * patch_size, x1 = std::min(w, x0 + patch_size);
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) pm.mask.at(y, x) = kept;
    }
  }
  return pm;
}

Image apply_mask(const Image& x, const PatchMask& pm) {
  if (x.dim(0) != pm.mask.h || x.dim(1) != pm.mask.w)
    throw DataError("apply_mask: spatial size mismatch");
  Image out = x;
  for (int y = 0; y < pm.mask.h; ++y)
    for (int xx = 0; xx < pm.mask.w; ++xx)
      if (pm.mask.at(y, xx) == 0)
        for (int c = 0; c < 3; ++c) out.at(y, xx, c) = 0.0;
  return out;
}

void dump_masked_image(const Image& x_masked, const std::string& path) {
  write_image_png(path, x_masked);
}

}  // namespace udaseg
