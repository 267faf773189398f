#pragma once

#include "camrank/grid.hpp"

#include <filesystem>

namespace camrank::io {

// 8-bit single channel, values kept literal (0..255).
GridT<std::uint8_t> read_gray8(const std::filesystem::path& path);
void write_gray8(const std::filesystem::path& path, const GridT<std::uint8_t>& grid);

// Grayscale map normalized to [0, 1] (value / 255).
Grid read_unit_map(const std::filesystem::path& path);
void write_unit_map(const std::filesystem::path& path, const Grid& map);

// RGB image as a 3-channel tensor in [0, 1]. Accepts anything OpenCV decodes (png, jpg).
Tensor read_rgb(const std::filesystem::path& path);
void write_rgb(const std::filesystem::path& path, const Tensor& image);

}  // namespace camrank::io
