#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

namespace mast {

/// Planar RGB image, values in [0,1], layout [channel][row][col].
struct Image {
  static constexpr std::size_t kChannels = 3;

  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f)
      : height(h), width(w), pixels(kChannels * h * w, fill) {}

  std::size_t plane() const { return height * width; }
  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels[(c * height + y) * width + x];
  }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  float* channel(std::size_t c) { return pixels.data() + c * plane(); }
  const float* channel(std::size_t c) const { return pixels.data() + c * plane(); }

  void clamp01() {
    for (float& v : pixels) v = std::clamp(v, 0.0f, 1.0f);
  }

  bool operator==(const Image&) const = default;
};

}  // namespace mast
