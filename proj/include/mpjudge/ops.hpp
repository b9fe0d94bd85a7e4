#pragma once

// Differentiable operations. Each op computes its forward result eagerly
// and, when a tape is active on the calling thread and any input requires
// grad, records a backward closure on that tape.

#include <cstddef>

#include "mpjudge/tensor.hpp"

namespace mpjudge::ops {

enum class Mode { kTrain, kEval };

// Elementwise, identical shapes.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> square(const Tensor<T>& a);

// x + y where y's shape equals the trailing extents of x (e.g. position
// embeddings [N x d] added to tokens [B x N x d]).
template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& y);

// [m x k] * [k x n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// x[..., in] * weight[in x out] + bias[out]. `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// input [B x Cin x H x W], kernel [Cout x Cin x k x k]; cross-correlation.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t padding);

template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormStats(std::size_t channels = 1)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

// Per-channel normalization of [B x C x H x W]. Train mode uses batch
// statistics and updates `stats`; eval mode uses the running statistics.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BatchNormStats<T>& stats, Mode mode);

enum class Activation { kSilu, kSigmoid, kLogSigmoid, kSoftmaxLastDim, kGelu };

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);

template <typename T>
Tensor<T> silu(const Tensor<T>& x) { return activation(x, Activation::kSilu); }
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) { return activation(x, Activation::kSigmoid); }
template <typename T>
Tensor<T> log_sigmoid(const Tensor<T>& x) { return activation(x, Activation::kLogSigmoid); }
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) { return activation(x, Activation::kSoftmaxLastDim); }
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) { return activation(x, Activation::kGelu); }

// Normalizes each row of the last dimension; gamma/beta are [last].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

// Statistics over the sequence axis of [B x L x d], per (batch, channel).
template <typename T>
Tensor<T> sequence_mean(const Tensor<T>& x);
// Population standard deviation.
template <typename T>
Tensor<T> sequence_stddev(const Tensor<T>& x);
// (x - mean) / (stddev + eps).
template <typename T>
Tensor<T> sequence_normalized(const Tensor<T>& x, T eps = T(1e-5));

template <typename T>
struct Standardized {
  Tensor<T> normalized;  // [B x L x d]
  Tensor<T> mean;        // [B x d]
  Tensor<T> stddev;      // [B x d]
};

template <typename T>
Standardized<T> sequence_standardize(const Tensor<T>& x, T eps = T(1e-5));

// z[B x L x d] * scale[B x d] + shift[B x d], broadcast over L.
template <typename T>
Tensor<T> modulate(const Tensor<T>& z, const Tensor<T>& scale, const Tensor<T>& shift);

// Multi-head scaled dot-product self-attention on packed projections.
// qkv [B x L x 3d] -> [B x L x d].
template <typename T>
Tensor<T> attention(const Tensor<T>& qkv, std::size_t heads);

// [B x C x H x W] -> [B x (H/p)(W/p) x C*p*p], patches in row-major grid
// order, each flattened channel-major.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch);

// [B x C x H x W] -> [B x H*W x C].
template <typename T>
Tensor<T> channels_to_tokens(const Tensor<T>& x);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// Rows [begin, end) along axis 0.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

}  // namespace mpjudge::ops
