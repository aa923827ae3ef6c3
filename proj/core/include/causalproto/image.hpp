#pragma once

#include <filesystem>
#include <vector>

namespace causalproto {

/// RGB image, height x width x 3 interleaved, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, double fill = 0.0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

  double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool empty() const { return data.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Rounds every channel to the nearest multiple of 1/255 after clipping to [0, 1].
void quantize_8bit(Image& img);

/// Bilinear resampling to size x size (identity when already that size).
Image resize_bilinear(const Image& img, int height, int width);

/// Lossless 8-bit RGB PNG. Throws IoError naming the path.
void write_png(const std::filesystem::path& path, const Image& img);
/// Reads gray/RGB/RGBA PNGs (8 or 16 bit) as RGB in [0, 1]. Throws IoError.
Image read_png(const std::filesystem::path& path);

}  // namespace causalproto
