#pragma once

// Raw numeric kernels behind the differentiable operations.
//
// Every kernel in namespace `kernels` is OpenMP-parallel over output
// rows (or batch/head slices), so each output element is produced by a
// single thread with a fixed accumulation order and results do not
// depend on the thread count. `kernels::reference` holds straightforward
// serial implementations used by the tests and the benchmark.

#include <cstddef>
#include <span>

namespace mpjudge::kernels {

enum class Transpose { kNo, kYes };

// C[m x n] = op(A) * op(B), or C += op(A) * op(B) when `accumulate`.
// op(A) is m x k and op(B) is k x n; all matrices are dense row-major.
template <typename T>
void gemm(Transpose ta, Transpose tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const T> a, std::span<const T> b, std::span<T> c, bool accumulate);

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
};

// Cross-correlation, no bias. x: B x Cin x H x W, w: Cout x Cin x k x k.
template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                    std::span<T> y);

// Accumulates into dx and dw; either may be empty to skip it.
template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dw);

struct AttentionGeometry {
  std::size_t batch = 1;
  std::size_t tokens = 1;
  std::size_t heads = 1;
  std::size_t head_dim = 1;

  std::size_t dim() const { return heads * head_dim; }
};

// qkv: B x L x 3d laid out as [q | k | v], heads contiguous inside each.
// out: B x L x d. probs: B x H x L x L softmax weights (kept for backward).
template <typename T>
void attention_forward(const AttentionGeometry& g, std::span<const T> qkv, std::span<T> out,
                       std::span<T> probs);

// Accumulates into dqkv.
template <typename T>
void attention_backward(const AttentionGeometry& g, std::span<const T> qkv,
                        std::span<const T> probs, std::span<const T> dout, std::span<T> dqkv);

namespace reference {

template <typename T>
void gemm(Transpose ta, Transpose tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const T> a, std::span<const T> b, std::span<T> c, bool accumulate);

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                    std::span<T> y);

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dw);

template <typename T>
void attention_forward(const AttentionGeometry& g, std::span<const T> qkv, std::span<T> out,
                       std::span<T> probs);

template <typename T>
void attention_backward(const AttentionGeometry& g, std::span<const T> qkv,
                        std::span<const T> probs, std::span<const T> dout, std::span<T> dqkv);

}  // namespace reference

}  // namespace mpjudge::kernels
