#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "mpjudge/errors.hpp"
#include "mpjudge/grad_check.hpp"
#include "mpjudge/model.hpp"

using namespace mpjudge;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

template <typename T>
Tensor<T> param(const MPJudgeModel<T>& m, const std::string& name) {
  for (auto& p : m.parameters())
    if (p.name == name) return p.tensor;
  FAIL("no parameter " << name);
  return {};
}

// Gives every MAN projection small random weights so music reaches the tokens.
template <typename T>
void randomize_man(MPJudgeModel<T>& m, std::uint64_t seed, double scale = 0.05) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& p : m.parameters()) {
    if (p.name.find(".man.") == std::string::npos) continue;
    auto t = p.tensor;
    for (auto& v : t.data()) v += static_cast<T>(u(rng));
  }
}

ModelConfig toy_config() {
  ModelConfig c;
  c.painting.depth = 1;
  c.painting.dim = 8;
  c.painting.heads = 2;
  c.painting.patch_size = 4;
  c.painting.image_size = 8;
  c.painting.mlp_ratio = 4;
  c.music.channels = {2, 2, 2, 2};
  c.music.embed_dim = 8;
  c.n_frames = 32;
  c.n_mels = 32;
  return c;
}

template <typename T>
std::size_t numel_sum(const MPJudgeModel<T>& m, const std::string& prefix) {
  std::size_t n = 0;
  for (auto& p : m.parameters())
    if (p.name.rfind(prefix, 0) == 0) n += p.tensor.numel();
  return n;
}

}  // namespace

TEST_CASE("full configuration parameter and FLOP accounting") {
  const auto cost = count_params_flops(ModelConfig::full());
  CHECK(std::abs(static_cast<double>(cost.painting_params) / 44.65e6 - 1.0) < 0.02);
  CHECK(std::abs(static_cast<double>(cost.painting_flops) / 21.16e9 - 1.0) < 0.05);
  // patch embed + positions + 12 blocks, enumerated by hand
  CHECK(cost.painting_params == 393728u + 131072u + 12u * 3677696u);
  CHECK(cost.head_params == 513u);
}

TEST_CASE("toy configuration matches hand enumeration") {
  const auto cost = count_params_flops(toy_config());
  // patch embed 48*8+8, positions 4*8
  // block: ln1 16, qkv 8*24+24, proj 8*8+8, man 2*(8*8+8), ln2 16, fc1 8*32+32, fc2 32*8+8
  const std::size_t block = 16 + 216 + 72 + 144 + 16 + 288 + 264;
  CHECK(block == 1016u);
  CHECK(cost.painting_params == 392u + 32u + block);
  // conv widths 2: 1*2*9+4, 2*2*9+4 (x3), projection 2*8+8
  CHECK(cost.music_params == 22u + 3u * 40u + 24u);
  CHECK(cost.head_params == 9u);

  // the model's own tensors are a second route to the same counts
  for (const auto& cfg : {toy_config(), ModelConfig::tiny()}) {
    MPJudgeModel<float> m(cfg, 1);
    const auto c = count_params_flops(cfg);
    CHECK(numel_sum(m, "painting.") == c.painting_params);
    CHECK(numel_sum(m, "music.") == c.music_params);
    CHECK(numel_sum(m, "head.") == c.head_params);
  }
}

TEST_CASE("music encoder token grid and embedding") {
  const auto grid = music_token_grid(ModelConfig::full());
  // floor((n + 2 - 3) / 2) + 1 per stage
  std::size_t h = 469, w = 128;
  for (int i = 0; i < 4; ++i) {
    h = (h - 1) / 2 + 1;
    w = (w - 1) / 2 + 1;
  }
  CHECK(grid.first == 30);
  CHECK(grid.second == 8);
  CHECK(grid == std::pair<std::size_t, std::size_t>{h, w});

  MPJudgeModel<float> full(ModelConfig::full(), 3);
  std::mt19937_64 rng(2);
  auto y = full.encode_music(random_tensor<float>({1, 469, 128}, rng), ops::Mode::kEval);
  CHECK(y.shape() == Shape{1, 512});

  MPJudgeModel<float> tiny(ModelConfig::tiny(), 3);
  auto z1 = tiny.encode_music(TensorF(Shape{1, 63, 128}, 0.0f), ops::Mode::kEval);
  auto z2 = tiny.encode_music(TensorF(Shape{1, 63, 128}, 0.0f), ops::Mode::kEval);
  CHECK(std::equal(z1.data().begin(), z1.data().end(), z2.data().begin()));
  CHECK_THROWS_AS(tiny.encode_music(TensorF(Shape{1, 62, 128}), ops::Mode::kEval), DimensionError);

  ModelConfig small = ModelConfig::tiny();
  small.n_frames = 10;
  CHECK_THROWS_AS(MPJudgeModel<float>(small, 1), DimensionError);
}

TEST_CASE("man_modulate examples") {
  const std::size_t d = 2;
  ManParams<double> p;
  p.gamma_weight = TensorD(Shape{d, d}, 0.0);
  p.beta_weight = TensorD(Shape{d, d}, 0.0);
  p.gamma_bias = TensorD(Shape{d}, {2.0, 1.0});
  p.beta_bias = TensorD(Shape{d}, {0.5, 0.0});
  // channel 0 over L=2 is [1, 3], channel 1 is constant 4
  TensorD x(Shape{1, 2, d}, {1.0, 4.0, 3.0, 4.0});
  auto out = ops::reshape(man_modulate(x, TensorD(Shape{1, d}, 0.0), p), Shape{2, d});
  CHECK(std::abs(out[0] - (-1.5)) < 1e-4);
  CHECK(std::abs(out[2] - 2.5) < 1e-4);
  CHECK(std::abs(out[1]) < 1e-9);
  CHECK(std::abs(out[3]) < 1e-9);

  CHECK_THROWS_AS(man_modulate(x, TensorD(Shape{1, 3}), p), ContractError);
  CHECK_THROWS_AS(man_modulate(x, TensorD(Shape{2, d}), p), ContractError);
  ManParams<double> bad = p;
  bad.gamma_weight = TensorD(Shape{3, 3});
  CHECK_THROWS_AS(man_modulate(x, TensorD(Shape{1, d}), bad), ContractError);
}

TEST_CASE("identity modulation standardizes the stream") {
  std::mt19937_64 rng(4);
  const std::size_t d = 6, L = 10;
  ManParams<double> p{TensorD(Shape{d, d}, 0.0), TensorD(Shape{d}, 1.0), TensorD(Shape{d, d}, 0.0),
                      TensorD(Shape{d}, 0.0)};
  auto x = random_tensor<double>({2, L, d}, rng, -3, 3);
  auto out = man_modulate(x, random_tensor<double>({2, d}, rng), p);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < d; ++c) {
      double mean = 0, var = 0;
      for (std::size_t i = 0; i < L; ++i) mean += out[(b * L + i) * d + c] / L;
      for (std::size_t i = 0; i < L; ++i) var += std::pow(out[(b * L + i) * d + c] - mean, 2) / L;
      CHECK(std::abs(mean) < 1e-9);
      CHECK(std::abs(var - 1.0) < 1e-3);
    }
}

TEST_CASE("MAN output statistics follow gamma and beta") {
  std::mt19937_64 rng(5);
  const std::size_t d = 8, L = 12, B = 3;
  for (int trial = 0; trial < 5; ++trial) {
    ManParams<double> p{random_tensor<double>({d, d}, rng), random_tensor<double>({d}, rng),
                        random_tensor<double>({d, d}, rng), random_tensor<double>({d}, rng)};
    auto x = random_tensor<double>({B, L, d}, rng, -2, 2);
    auto y = random_tensor<double>({B, d}, rng);
    auto out = man_modulate(x, y, p);
    auto gamma = ops::linear(y, p.gamma_weight, p.gamma_bias);
    auto beta = ops::linear(y, p.beta_weight, p.beta_bias);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < d; ++c) {
        double mean = 0, var = 0;
        for (std::size_t i = 0; i < L; ++i) mean += out[(b * L + i) * d + c] / L;
        for (std::size_t i = 0; i < L; ++i) var += std::pow(out[(b * L + i) * d + c] - mean, 2) / L;
        CHECK(std::abs(mean - beta[b * d + c]) < 1e-3);
        CHECK(std::abs(std::sqrt(var) - std::abs(gamma[b * d + c])) < 1e-3);
      }
  }
}

TEST_CASE("modulation intensity map examples") {
  MimTrace<double> trace;
  // two tokens, d=2: differences [1,-1] and [2,0]
  trace.before.push_back(TensorD(Shape{1, 2, 2}, {0.0, 0.0, 1.0, 1.0}));
  trace.after.push_back(TensorD(Shape{1, 2, 2}, {1.0, -1.0, 3.0, 1.0}));
  auto pair = modulation_intensity_map(trace, 0);
  CHECK(pair.per_layer[0] == std::vector<double>{2, 2});
  CHECK(pair.per_layer_scalar[0] == 2.0);
  CHECK_THROWS_AS(modulation_intensity_map(trace, 1), ContractError);  // 2 tokens are not a 1x1 grid

  MimTrace<double> square;
  square.before.push_back(TensorD(Shape{1, 4, 2}, {0, 0, 1, 1, 0, 0, 0, 0}));
  square.after.push_back(TensorD(Shape{1, 4, 2}, {1, -1, 3, 1, 0, 0, 0, 0}));
  auto map = modulation_intensity_map(square, 2);
  CHECK(map.per_layer.size() == 1);
  CHECK(map.per_layer[0] == std::vector<double>{2, 2, 0, 0});
  CHECK(map.per_layer_scalar[0] == 1.0);

  MimTrace<double> same;
  same.before.push_back(square.before[0]);
  same.after.push_back(square.before[0]);
  auto zero = modulation_intensity_map(same, 2);
  for (double v : zero.per_layer[0]) CHECK(v == 0.0);

  CHECK_THROWS_AS(modulation_intensity_map(MimTrace<double>{}, 2), ContractError);
}

TEST_CASE("modulation intensity is L1-homogeneous") {
  std::mt19937_64 rng(6);
  MimTrace<double> t1, t3;
  for (int l = 0; l < 3; ++l) {
    auto a = random_tensor<double>({2, 16, 5}, rng);
    auto diff = random_tensor<double>({2, 16, 5}, rng);
    // dyadic values keep the scaled sums exact
    for (auto& v : diff.data()) v = std::round(v * 64) / 64;
    for (auto& v : a.data()) v = std::round(v * 64) / 64;
    t1.before.push_back(a);
    t3.before.push_back(a);
    t1.after.push_back(ops::add(a, diff));
    t3.after.push_back(ops::add(a, ops::scale(diff, 3.0)));
  }
  for (std::size_t b = 0; b < 2; ++b) {
    auto m1 = modulation_intensity_map(t1, 4, b), m3 = modulation_intensity_map(t3, 4, b);
    for (std::size_t l = 0; l < 3; ++l) {
      CHECK(m3.per_layer_scalar[l] == 3 * m1.per_layer_scalar[l]);
      double mean = 0;
      for (std::size_t i = 0; i < 16; ++i) {
        CHECK(m3.per_layer[l][i] == 3 * m1.per_layer[l][i]);
        CHECK(m1.per_layer[l][i] >= 0);
        mean += m1.per_layer[l][i] / 16;
      }
      CHECK(m1.per_layer_scalar[l] == doctest::Approx(mean).epsilon(1e-12));
    }
  }
}

TEST_CASE("identity MAN layers on a standardized stream give zero intensity") {
  // Drive the painting encoder with a standardized stream by feeding a
  // trace-producing model whose MAN is identity and whose pre-MAN stream is
  // standardized: the MAN output then equals its input up to the epsilon.
  std::mt19937_64 rng(7);
  const std::size_t d = 16, L = 16;
  auto raw = random_tensor<double>({1, L, d}, rng, -2, 2);
  auto x = ops::sequence_normalized(raw, 0.0);
  ManParams<double> p{TensorD(Shape{d, d}, 0.0), TensorD(Shape{d}, 1.0), TensorD(Shape{d, d}, 0.0),
                      TensorD(Shape{d}, 0.0)};
  MimTrace<double> trace;
  trace.before.push_back(x);
  trace.after.push_back(man_modulate(x, TensorD(Shape{1, d}, 0.3), p));
  auto map = modulation_intensity_map(trace, 4);
  for (double v : map.per_layer[0]) CHECK(v < 1e-3);
}

TEST_CASE("painting encoder token count and trace") {
  MPJudgeModel<float> full(ModelConfig::full(), 8);
  std::mt19937_64 rng(8);
  MimTrace<float> trace;
  auto tokens = full.encode_painting(random_tensor<float>({1, 3, 256, 256}, rng), TensorF(Shape{1, 512}, 0.1f),
                                     &trace);
  CHECK(tokens.shape() == Shape{1, 256, 512});
  CHECK(trace.before.size() == 12);
  for (auto& t : trace.after) CHECK(t.shape() == Shape{1, 256, 512});
  auto map = modulation_intensity_map(trace, 16);
  CHECK(map.per_layer.size() == 12);
  for (auto& grid : map.per_layer) CHECK(grid.size() == 256u);

  CHECK_THROWS_AS(full.encode_painting(TensorF(Shape{1, 3, 128, 128}), TensorF(Shape{1, 512})), DimensionError);
}

TEST_CASE("music embedding changes tokens once MAN weights are nonzero") {
  MPJudgeModel<float> m(ModelConfig::tiny(), 9);
  std::mt19937_64 rng(9);
  auto image = random_tensor<float>({1, 3, 64, 64}, rng);
  auto y1 = random_tensor<float>({1, 128}, rng);
  auto y2 = y1.clone();
  y2[0] += 0.5f;
  auto same1 = m.encode_painting(image, y1), same2 = m.encode_painting(image, y2);
  // zero-initialized projections ignore the music vector
  CHECK(std::equal(same1.data().begin(), same1.data().end(), same2.data().begin()));
  randomize_man(m, 10);
  auto t1 = m.encode_painting(image, y1), t2 = m.encode_painting(image, y2);
  double diff = 0;
  for (std::size_t i = 0; i < t1.numel(); ++i) diff += std::abs(t1[i] - t2[i]);
  CHECK(diff > 1e-3);
}

TEST_CASE("MAN initialization is identity modulation") {
  MPJudgeModel<float> m(ModelConfig::tiny(), 11);
  for (std::size_t l = 0; l < 4; ++l) {
    const auto& p = m.man(l);
    for (float v : p.gamma_weight.data()) CHECK(v == 0.0f);
    for (float v : p.beta_weight.data()) CHECK(v == 0.0f);
    for (float v : p.gamma_bias.data()) CHECK(v == 1.0f);
    for (float v : p.beta_bias.data()) CHECK(v == 0.0f);
  }
}

TEST_CASE("predict_score range and determinism") {
  MPJudgeModel<float> m(ModelConfig::tiny(), 12);
  randomize_man(m, 12, 0.5);
  std::mt19937_64 rng(12);
  for (int i = 0; i < 5; ++i) {
    auto image = random_tensor<float>({1, 3, 64, 64}, rng);
    auto mels = random_tensor<float>({1, 63, 128}, rng, -14, 5);
    const double s1 = m.predict_score(image, mels);
    const double s2 = m.predict_score(image, mels);
    CHECK(s1 > 0.0);
    CHECK(s1 < 1.0);
    CHECK(s1 == s2);
  }
  // a saturated head still reports an open-interval score
  auto bias = param(m, "head.bias");
  bias[0] = 200.0f;
  const double hi = m.predict_score(random_tensor<float>({1, 3, 64, 64}, rng),
                                    random_tensor<float>({1, 63, 128}, rng));
  CHECK(hi < 1.0);
  bias[0] = -200.0f;
  const double lo = m.predict_score(random_tensor<float>({1, 3, 64, 64}, rng),
                                    random_tensor<float>({1, 63, 128}, rng));
  CHECK(lo > 0.0);
}

TEST_CASE("permuting patches with their position embeddings leaves the score unchanged") {
  MPJudgeModel<double> m(ModelConfig::tiny(), 13);
  randomize_man(m, 13, 0.2);
  std::mt19937_64 rng(13);
  auto image = random_tensor<double>({1, 3, 64, 64}, rng);
  auto mels = random_tensor<double>({1, 63, 128}, rng, -10, 3);
  const double base = m.predict_score(image, mels);

  const std::size_t g = 4, p = 16, d = 128;
  std::vector<std::size_t> perm(g * g);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  // new tile j holds old tile perm[j]
  TensorD moved(image.shape());
  for (std::size_t j = 0; j < g * g; ++j) {
    const std::size_t src = perm[j];
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x) {
          const std::size_t dst_i = (c * 64 + (j / g) * p + y) * 64 + (j % g) * p + x;
          const std::size_t src_i = (c * 64 + (src / g) * p + y) * 64 + (src % g) * p + x;
          moved[dst_i] = image[src_i];
        }
  }
  auto pm = m.clone();
  auto pos = param(pm, "painting.pos");
  const auto old = param(m, "painting.pos");
  for (std::size_t j = 0; j < g * g; ++j)
    for (std::size_t c = 0; c < d; ++c) pos[j * d + c] = old[perm[j] * d + c];
  CHECK(std::abs(pm.predict_score(moved, mels) - base) < 1e-4);
  // without moving the position embeddings the score generally changes
  CHECK(std::abs(m.predict_score(moved, mels) - base) > 1e-9);
}

TEST_CASE("gradient reaches the music encoder") {
  MPJudgeModel<float> m(ModelConfig::tiny(), 14);
  randomize_man(m, 14);
  std::mt19937_64 rng(14);
  auto image = random_tensor<float>({2, 3, 64, 64}, rng);
  auto mels = random_tensor<float>({2, 63, 128}, rng, -10, 3);
  Tape<float> tape;
  TensorF loss;
  {
    TapeScope<float> scope(tape);
    auto s = m.forward(image, mels, ops::Mode::kTrain);
    loss = ops::mean(ops::square(ops::sub(s, TensorF(Shape{2}, {0.9f, 0.1f}))));
  }
  backward(loss, tape);
  for (auto& p : m.parameters()) {
    if (p.name.rfind("music.", 0) != 0) continue;
    double norm = 0;
    for (float g : p.tensor.grad()) norm += std::abs(g);
    INFO(p.name);
    CHECK(norm > 0);
  }
}

TEST_CASE("full tiny-config forward and regression loss pass a gradient check") {
  MPJudgeModel<double> m(ModelConfig::tiny(), 15);
  randomize_man(m, 15, 0.1);
  std::mt19937_64 rng(15);
  auto image = random_tensor<double>({2, 3, 64, 64}, rng);
  auto mels = random_tensor<double>({2, 63, 128}, rng, -10, 3);
  TensorD target(Shape{2}, {0.8, 0.3});
  std::vector<TensorD> inputs;
  for (auto& p : m.parameters()) inputs.push_back(p.tensor);
  GradCheckOptions opt;
  opt.max_elements_per_input = 3;
  auto report = grad_check(
      [&] {
        auto s = m.forward(image, mels, ops::Mode::kTrain);
        return ops::mean(ops::square(ops::sub(s, target)));
      },
      inputs, opt);
  INFO("max relative error " << report.max_relative_error << " at " << report.worst);
  CHECK(report.passed);
  CHECK(report.checked > 200);
}

TEST_CASE("clone is independent and copy_weights restores values") {
  MPJudgeModel<float> a(ModelConfig::tiny(), 16);
  auto b = a.clone();
  auto w = param(b, "head.weight");
  w[0] += 1.0f;
  CHECK(param(a, "head.weight")[0] != w[0]);
  copy_weights(a, b);
  CHECK(param(a, "head.weight")[0] == param(b, "head.weight")[0]);

  MPJudgeModel<float> c(ModelConfig::tiny(), 16);
  auto pa = a.parameters(), pc = c.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    CHECK(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pc[i].tensor.data().begin()));
}
