#include "mpjudge/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "binary_io.hpp"
#include "mpjudge/errors.hpp"

namespace mpjudge::image {

namespace {

Image decode_png(std::span<const std::uint8_t> bytes) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw FormatError(std::string("png: ") + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> raw(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, raw.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw FormatError("png: " + msg);
  }
  Image out{static_cast<int>(img.width), static_cast<int>(img.height), 3, {}};
  out.pixels.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out.pixels[i] = raw[i] / 255.0f;
  return out;
}

// Skips whitespace and '#' comments, then reads a decimal integer.
int pnm_int(std::span<const std::uint8_t> b, std::size_t& pos) {
  for (;;) {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  if (pos >= b.size() || !std::isdigit(b[pos])) throw FormatError("pnm: malformed header");
  long v = 0;
  while (pos < b.size() && std::isdigit(b[pos])) {
    v = v * 10 + (b[pos++] - '0');
    if (v > 1 << 24) throw FormatError("pnm: header value too large");
  }
  return static_cast<int>(v);
}

Image decode_pnm(std::span<const std::uint8_t> b) {
  const int src_channels = b[1] == '6' ? 3 : 1;
  std::size_t pos = 2;
  const int w = pnm_int(b, pos), h = pnm_int(b, pos), maxval = pnm_int(b, pos);
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw FormatError("pnm: bad dimensions or maxval");
  ++pos;  // single whitespace before the raster
  const std::size_t bps = maxval > 255 ? 2 : 1;
  const std::size_t count = static_cast<std::size_t>(w) * h * src_channels;
  if (pos > b.size() || b.size() - pos < count * bps) throw FormatError("pnm: truncated raster");
  Image out{w, h, 3, std::vector<float>(static_cast<std::size_t>(w) * h * 3)};
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t* p = b.data() + pos + i * bps;
    const int v = bps == 2 ? (p[0] << 8 | p[1]) : p[0];
    const float f = std::min(1.0f, static_cast<float>(v) / maxval);
    if (src_channels == 3)
      out.pixels[i] = f;
    else
      std::fill_n(out.pixels.begin() + 3 * i, 3, f);
  }
  return out;
}

}  // namespace

Image decode_image(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kPngMagic[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(kPngMagic, kPngMagic + 8, bytes.begin())) return decode_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) return decode_pnm(bytes);
  throw FormatError("unrecognised image format (expected PNG or binary PPM/PGM)");
}

Image load_image(const std::filesystem::path& path) {
  const auto bytes = detail::read_file<FormatError>(path);
  try {
    return decode_image(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_png(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ContractError("encode_png: channels must be 1 or 3");
  if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
    throw ContractError("encode_png: pixel count does not match the extents");
  std::vector<std::uint8_t> raw(img.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    raw[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
  png_image pi;
  std::memset(&pi, 0, sizeof pi);
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&pi, nullptr, &size, 0, raw.data(), 0, nullptr))
    throw FormatError(std::string("png: ") + pi.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&pi, out.data(), &size, 0, raw.data(), 0, nullptr))
    throw FormatError(std::string("png: ") + pi.message);
  out.resize(size);
  return out;
}

void save_png(const std::filesystem::path& path, const Image& img) { detail::write_file_atomic(path, encode_png(img)); }

Image resize_bilinear(const Image& img, int width, int height) {
  if (width <= 0 || height <= 0 || img.width <= 0 || img.height <= 0)
    throw ContractError("resize_bilinear: extents must be positive");
  if (width == img.width && height == img.height) return img;
  Image out{width, height, img.channels, std::vector<float>(static_cast<std::size_t>(width) * height * img.channels)};
  const double sx = static_cast<double>(img.width) / width, sy = static_cast<double>(img.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const double top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
        const double bot = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
        out.at(y, x, c) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

std::vector<float> to_model_input(const Image& img, int size) {
  const Image r = resize_bilinear(img, size, size);
  const auto plane = static_cast<std::size_t>(size) * size;
  std::vector<float> out(3 * plane);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        out[c * plane + static_cast<std::size_t>(y) * size + x] = (r.at(y, x, r.channels == 3 ? c : 0) - 0.5f) / 0.5f;
  return out;
}

}  // namespace mpjudge::image
