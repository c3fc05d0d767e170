#pragma once

#include <filesystem>

#include "deblurkit/tensor.hpp"

namespace dbk::img {

// Images travel as C x H x W tensors in [0,1]. PNG is the on-disk format:
// 16-bit is written, 8- or 16-bit gray/RGB/RGBA is accepted on read (alpha is
// dropped, gray is expanded to RGB).
Tensor read_png(const std::filesystem::path& path);

// channels must be 1 (gray) or 3 (RGB); values are clamped to [0,1] and
// quantized to 16 bits.
void write_png16(const std::filesystem::path& path, const Tensor& image);

// Header-only probe: width/height without decoding pixel data.
std::pair<int, int> png_size(const std::filesystem::path& path);

// Grayscale helpers for debug dumps: min/max-normalizes a 2-d grid.
void write_grid_png(const std::filesystem::path& path, const Tensor& grid);

}  // namespace dbk::img
