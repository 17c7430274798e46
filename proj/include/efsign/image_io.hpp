#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace efsign {

// Decoded 8-bit RGB image, rows top to bottom, channels interleaved.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0) {}

  std::uint8_t* pixel(std::size_t x, std::size_t y) { return rgb.data() + (y * width + x) * 3; }
  const std::uint8_t* pixel(std::size_t x, std::size_t y) const { return rgb.data() + (y * width + x) * 3; }

  friend bool operator==(const Image&, const Image&) = default;
};

bool has_image_extension(const std::filesystem::path& path);

// PNG or baseline JPEG, chosen by file signature. Throws FormatError when
// the file cannot be decoded and IoError when it cannot be read.
Image decode_image(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const Image& image);

}  // namespace efsign
