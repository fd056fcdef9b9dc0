#pragma once

#include "muse/types.hpp"

#include <filesystem>

namespace muse {

// Images are (H*W) x 3 matrices in [0, 1]; values are clamped and rounded to
// 8 bits on write. Output bytes depend only on the pixel values.
void write_png(const std::filesystem::path& path, const MatF& rgb, int height, int width);
MatF read_png(const std::filesystem::path& path, int* height = nullptr, int* width = nullptr);

}  // namespace muse
