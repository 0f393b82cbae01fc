#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "cosod/tensor.hpp"

namespace cosod {

// 8-bit raster, interleaved channels, row-major.
struct ByteImage {
  int h = 0;
  int w = 0;
  int channels = 1;
  std::vector<std::uint8_t> data;

  static ByteImage blank(int h, int w, int channels) {
    return {h, w, channels, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w * channels, 0)};
  }
  std::uint8_t& at(int y, int x, int c = 0) { return data[(static_cast<std::size_t>(y) * w + x) * channels + c]; }
  std::uint8_t at(int y, int x, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * w + x) * channels + c];
  }
  bool operator==(const ByteImage&) const = default;
};

// round(255 v) with halves rounded up, clamped to [0, 255].
std::uint8_t quantize_byte(double v);

// Binary P6 (3 channels) or P5 (1 channel), maxval 255.
std::string encode_pnm(const ByteImage& img);
// Accepts P5/P6 with comments in the header; errors carry the byte offset.
ByteImage decode_pnm(std::string_view bytes);

void write_pnm(const std::filesystem::path& path, const ByteImage& img);
ByteImage read_pnm(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

// RGB bytes -> [3, H, W] in [0, 1].
template <typename Scalar>
Tensor<Scalar> image_tensor(const ByteImage& rgb);

// Gray bytes -> [H, W] with v / 255.
template <typename Scalar>
Tensor<Scalar> gray_tensor(const ByteImage& gray);

// Gray bytes -> binary [H, W] (byte >= 128 is foreground).
template <typename Scalar>
Tensor<Scalar> mask_from_gray(const ByteImage& gray);

// [H, W] map in [0, 1] -> quantized gray bytes.
template <typename Scalar>
ByteImage quantize_map(const Tensor<Scalar>& map);

}  // namespace cosod
