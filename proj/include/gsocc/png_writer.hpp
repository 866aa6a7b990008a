#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Core>

namespace gsocc::io {

// 8-bit PNG; channels is 1 (gray) or 3 (RGB), rows top to bottom.
void write_png(const std::filesystem::path& path, int width, int height, int channels,
               const std::vector<std::uint8_t>& pixels);

// Maps values in [lo, hi] onto a black-to-red ramp. Non-finite values are
// drawn dark blue.
std::vector<std::uint8_t> heatmap_rgb(const Eigen::ArrayXd& values, double lo, double hi);

}  // namespace gsocc::io
