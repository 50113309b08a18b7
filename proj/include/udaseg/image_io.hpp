#pragma once

#include <string>

#include "udaseg/tensor.hpp"

namespace udaseg {

// 8-bit PNG in, [0,1] RGB tensor out. Throws DataError on decode failure.
Image read_image_png(const std::string& path);

// Clamps to [0,1] and quantizes to 8-bit. PNG bytes are deterministic for
// identical pixel content.
void write_image_png(const std::string& path, const Image& img);

// Single-channel 8-bit class-ID map; values round-trip exactly.
LabelMap read_label_png(const std::string& path);
void write_label_png(const std::string& path, const LabelMap& label);

}  // namespace udaseg
