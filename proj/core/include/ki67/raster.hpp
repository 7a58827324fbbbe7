#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ki67 {

using Rgb = std::array<std::uint8_t, 3>;

/// Row-major 8-bit RGB image.
class RasterImage {
public:
  RasterImage() = default;
  RasterImage(int width, int height, Rgb fill = {0, 0, 0});

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  bool empty() const noexcept { return width_ == 0 || height_ == 0; }

  Rgb& at(int x, int y) { return pixels_[index(x, y)]; }
  const Rgb& at(int x, int y) const { return pixels_[index(x, y)]; }

  const std::vector<Rgb>& pixels() const noexcept { return pixels_; }

  friend bool operator==(const RasterImage&, const RasterImage&) = default;

private:
  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<Rgb> pixels_;
};

RasterImage read_png(const std::filesystem::path& path);
RasterImage decode_png(const std::string& bytes);
void write_png(const std::filesystem::path& path, const RasterImage& img);
std::string encode_png(const RasterImage& img);

struct ImageSize {
  int width = 0;
  int height = 0;
};

/// Reads only the IHDR chunk.
ImageSize read_png_size(const std::filesystem::path& path);

}  // namespace ki67
