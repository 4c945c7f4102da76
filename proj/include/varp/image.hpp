#pragma once

#include <cstddef>
#include <vector>

namespace varp {

// H x W x 3 RGB image, values nominally in [0, 1], row-major HWC.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w * 3, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

  bool operator==(const Image&) const = default;
};

double pixel_mse(const Image& a, const Image& b);

}  // namespace varp
