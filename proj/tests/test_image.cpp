#include <cmath>
#include <filesystem>
#include <string>

#include "doctest.h"
#include "mpjudge/errors.hpp"
#include "mpjudge/image.hpp"

using namespace mpjudge;
using namespace mpjudge::image;

namespace {

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("png round trip preserves 8-bit values") {
  Image img{5, 3, 3, {}};
  for (int i = 0; i < 45; ++i) img.pixels.push_back(static_cast<float>((i * 17) % 256) / 255.0f);
  auto back = decode_image(encode_png(img));
  CHECK(back.width == 5);
  CHECK(back.height == 3);
  CHECK(back.channels == 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(back.pixels[i] == img.pixels[i]);

  Image gray{2, 2, 1, {0.0f, 1.0f, 0.5f, 0.25f}};
  auto g = decode_image(encode_png(gray));
  CHECK(g.channels == 3);
  CHECK(g.at(0, 1, 0) == 1.0f);
  CHECK(g.at(0, 1, 2) == 1.0f);
  CHECK(std::abs(g.at(1, 0, 1) - 0.5f) <= 0.5f / 255 + 1e-6f);  // half a quantization step

  auto path = std::filesystem::temp_directory_path() / "mpjudge_img.png";
  save_png(path, img);
  CHECK(load_image(path).pixels == back.pixels);
}

TEST_CASE("ppm and pgm decoding") {
  auto rgb = decode_image(bytes_of(std::string("P6\n# comment\n2 1\n255\n") + std::string("\xff\x00\x00\x00\x80\xff", 6)));
  CHECK(rgb.width == 2);
  CHECK(rgb.at(0, 0, 0) == 1.0f);
  CHECK(rgb.at(0, 0, 1) == 0.0f);
  CHECK(rgb.at(0, 1, 1) == doctest::Approx(128.0 / 255));
  auto gray = decode_image(bytes_of(std::string("P5 1 1 65535\n") + std::string("\x80\x00", 2)));
  CHECK(gray.at(0, 0, 2) == doctest::Approx(32768.0 / 65535));
  CHECK_THROWS_AS(decode_image(bytes_of("P6 2 2 255\n\x01")), FormatError);
  CHECK_THROWS_AS(decode_image(bytes_of("GIF89a")), FormatError);
  CHECK_THROWS_AS(decode_image(bytes_of("\x89PNG\r\n\x1a\ngarbage")), FormatError);
  try {
    load_image("/nonexistent/painting.png");
    FAIL("expected an error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("painting.png") != std::string::npos);
  }
}

TEST_CASE("bilinear resize") {
  Image ramp{4, 1, 1, {0.0f, 1.0f / 3, 2.0f / 3, 1.0f}};
  auto up = resize_bilinear(ramp, 8, 1);
  // centres at x = (i + 0.5) / 2 - 0.5 in source pixels, clamped
  for (int i = 0; i < 8; ++i) {
    const double fx = std::clamp((i + 0.5) / 2 - 0.5, 0.0, 3.0);
    CHECK(up.at(0, i, 0) == doctest::Approx(fx / 3).epsilon(1e-6));
  }
  Image flat{7, 5, 3, std::vector<float>(105, 0.3f)};
  auto down = resize_bilinear(flat, 3, 2);
  for (float v : down.pixels) CHECK(v == doctest::Approx(0.3f));
  CHECK(resize_bilinear(flat, 7, 5).pixels == flat.pixels);
  CHECK_THROWS_AS(resize_bilinear(flat, 0, 2), ContractError);
}

TEST_CASE("model input is planar and standardized") {
  Image img{2, 2, 3, {0, 0.5f, 1, 0, 0.5f, 1, 0, 0.5f, 1, 0, 0.5f, 1}};
  auto in = to_model_input(img, 2);
  REQUIRE(in.size() == 12);
  for (int i = 0; i < 4; ++i) {
    CHECK(in[i] == -1.0f);
    CHECK(in[4 + i] == 0.0f);
    CHECK(in[8 + i] == 1.0f);
  }
  Image gray{1, 1, 1, {0.75f}};
  auto g = to_model_input(gray, 3);
  REQUIRE(g.size() == 27);
  for (float v : g) CHECK(v == 0.5f);
}
