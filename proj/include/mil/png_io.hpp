#pragma once

#include <filesystem>

#include "mil/image.hpp"

namespace mil {

/// Reads an 8- or 16-bit PNG (gray or RGB, alpha dropped) into [0,1] floats;
/// 8-bit samples are divided by 255 exactly.
RasterImage<float> read_png(const std::filesystem::path& path);

/// Writes an 8-bit RGB PNG, clamping channels to [0,1].
void write_png(const RasterImage<float>& img, const std::filesystem::path& path);

}  // namespace mil
