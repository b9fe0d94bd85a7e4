// Parallel kernels against their serial references, plus one model step at
// the desk-scale configuration. Run with OMP_NUM_THREADS to compare scaling.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "mpjudge/kernels.hpp"
#include "mpjudge/model.hpp"

using namespace mpjudge;
using namespace mpjudge::kernels;

namespace {

std::vector<float> random_vector(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d;
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <bool kReference>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vector(n * n, 1), b = random_vector(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (kReference)
      reference::gemm<float>(Transpose::kNo, Transpose::kNo, n, n, n, a, b, c, false);
    else
      gemm<float>(Transpose::kNo, Transpose::kNo, n, n, n, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate,
                                                 benchmark::Counter::kIs1000);
}

// First music-encoder stage at the paper's 469 x 128 spectrogram.
template <bool kReference>
void BM_Conv2d(benchmark::State& state) {
  ConvGeometry g;
  g.batch = static_cast<std::size_t>(state.range(0));
  g.in_channels = 1;
  g.height = 469;
  g.width = 128;
  g.out_channels = 32;
  g.kernel = 3;
  g.stride = 2;
  g.padding = 1;
  const auto x = random_vector(g.batch * g.height * g.width, 3);
  const auto w = random_vector(g.out_channels * g.kernel * g.kernel, 4);
  std::vector<float> y(g.batch * g.out_channels * g.out_height() * g.out_width());
  for (auto _ : state) {
    if constexpr (kReference)
      reference::conv2d_forward<float>(g, x, w, y);
    else
      conv2d_forward<float>(g, x, w, y);
    benchmark::DoNotOptimize(y.data());
  }
}

// 256 tokens, 8 heads of 64: one painting-encoder attention at full size.
template <bool kReference>
void BM_Attention(benchmark::State& state) {
  AttentionGeometry g;
  g.batch = static_cast<std::size_t>(state.range(0));
  g.tokens = 256;
  g.heads = 8;
  g.head_dim = 64;
  const auto qkv = random_vector(g.batch * g.tokens * 3 * g.dim(), 5);
  std::vector<float> out(g.batch * g.tokens * g.dim()), probs(g.batch * g.heads * g.tokens * g.tokens);
  for (auto _ : state) {
    if constexpr (kReference)
      reference::attention_forward<float>(g, qkv, out, probs);
    else
      attention_forward<float>(g, qkv, out, probs);
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_TinyForward(benchmark::State& state) {
  const auto cfg = ModelConfig::tiny();
  MPJudgeModel<float> model(cfg, 1);
  const std::size_t b = static_cast<std::size_t>(state.range(0)), s = cfg.painting.image_size;
  const TensorF img(Shape{b, 3, s, s}, random_vector(b * 3 * s * s, 6));
  const TensorF mel(Shape{b, cfg.n_frames, cfg.n_mels}, random_vector(b * cfg.n_frames * cfg.n_mels, 7));
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(img, mel, ops::Mode::kEval));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(b));
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/parallel")->Arg(128)->Arg(512)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Gemm<true>)->Name("gemm/reference")->Arg(128)->Arg(512)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv2d<false>)->Name("conv2d/parallel")->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv2d<true>)->Name("conv2d/reference")->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Attention<false>)->Name("attention/parallel")->Arg(2)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Attention<true>)->Name("attention/reference")->Arg(2)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_TinyForward)->Name("model/tiny_forward")->Arg(16)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
