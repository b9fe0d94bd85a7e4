#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace mpjudge::image {

// Interleaved rows, values in [0,1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;  // 1 or 3
  std::vector<float> pixels;

  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
};

// PNG (any bit depth or color type, alpha dropped) or binary PPM/PGM
// (P6/P5, maxval up to 65535), chosen by magic bytes. Always returns RGB.
Image load_image(const std::filesystem::path& path);
Image decode_image(std::span<const std::uint8_t> bytes);

// 8-bit PNG, gray or RGB by `channels`.
std::vector<std::uint8_t> encode_png(const Image& img);
void save_png(const std::filesystem::path& path, const Image& img);

// Half-pixel-centred bilinear sampling with edge clamping.
Image resize_bilinear(const Image& img, int width, int height);

// Resize to size x size and map [0,1] to [-1,1] (mean 0.5, std 0.5 per
// channel). Output is planar [3][size][size].
std::vector<float> to_model_input(const Image& img, int size);

}  // namespace mpjudge::image
