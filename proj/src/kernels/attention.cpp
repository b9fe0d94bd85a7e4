#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "mpjudge/errors.hpp"
#include "mpjudge/kernels.hpp"

namespace mpjudge::kernels {

namespace {

void check_attention(const AttentionGeometry& g, std::size_t qkv, std::size_t out,
                     std::size_t probs) {
  const std::size_t d = g.dim();
  if (qkv != g.batch * g.tokens * 3 * d || out != g.batch * g.tokens * d ||
      probs != g.batch * g.heads * g.tokens * g.tokens) {
    throw DimensionError("attention buffer sizes do not match geometry");
  }
}

// Copies one head's slice (which = 0 q, 1 k, 2 v) into a dense L x dh block.
template <typename T>
void gather_head(const AttentionGeometry& g, const T* qkv, std::size_t b, std::size_t h,
                 std::size_t which, T* dst) {
  const std::size_t d = g.dim();
  for (std::size_t i = 0; i < g.tokens; ++i) {
    const T* src = qkv + (b * g.tokens + i) * 3 * d + which * d + h * g.head_dim;
    std::copy(src, src + g.head_dim, dst + i * g.head_dim);
  }
}

template <typename T>
void scatter_add_head(const AttentionGeometry& g, const T* src, std::size_t b, std::size_t h,
                      std::size_t which, std::size_t row_stride, std::size_t col_offset, T* dst) {
  for (std::size_t i = 0; i < g.tokens; ++i) {
    T* out = dst + (b * g.tokens + i) * row_stride + which * g.dim() + col_offset + h * g.head_dim;
    for (std::size_t j = 0; j < g.head_dim; ++j) out[j] += src[i * g.head_dim + j];
  }
}

template <typename T>
void softmax_rows(T* s, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    T* row = s + i * cols;
    const T mx = *std::max_element(row, row + cols);
    T sum = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::size_t j = 0; j < cols; ++j) row[j] /= sum;
  }
}

}  // namespace

template <typename T>
void attention_forward(const AttentionGeometry& g, std::span<const T> qkv, std::span<T> out,
                       std::span<T> probs) {
  check_attention(g, qkv.size(), out.size(), probs.size());
  const std::size_t L = g.tokens, dh = g.head_dim, d = g.dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::fill(out.begin(), out.end(), T(0));

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t bh = 0; bh < static_cast<std::ptrdiff_t>(g.batch * g.heads); ++bh) {
    const std::size_t b = static_cast<std::size_t>(bh) / g.heads;
    const std::size_t h = static_cast<std::size_t>(bh) % g.heads;
    std::vector<T> q(L * dh), k(L * dh), v(L * dh), o(L * dh);
    gather_head(g, qkv.data(), b, h, 0, q.data());
    gather_head(g, qkv.data(), b, h, 1, k.data());
    gather_head(g, qkv.data(), b, h, 2, v.data());
    auto p = probs.subspan((b * g.heads + h) * L * L, L * L);
    gemm<T>(Transpose::kNo, Transpose::kYes, L, L, dh, q, k, p, false);
    for (auto& s : p) s *= scale;
    softmax_rows(p.data(), L, L);
    gemm<T>(Transpose::kNo, Transpose::kNo, L, dh, L, std::span<const T>(p), v, o, false);
    for (std::size_t i = 0; i < L; ++i) {
      T* dst = out.data() + (b * L + i) * d + h * dh;
      std::copy(o.data() + i * dh, o.data() + (i + 1) * dh, dst);
    }
  }
}

template <typename T>
void attention_backward(const AttentionGeometry& g, std::span<const T> qkv,
                        std::span<const T> probs, std::span<const T> dout, std::span<T> dqkv) {
  check_attention(g, qkv.size(), dout.size(), probs.size());
  if (dqkv.size() != qkv.size()) throw DimensionError("attention gradient buffer size mismatch");
  const std::size_t L = g.tokens, dh = g.head_dim, d = g.dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t bh = 0; bh < static_cast<std::ptrdiff_t>(g.batch * g.heads); ++bh) {
    const std::size_t b = static_cast<std::size_t>(bh) / g.heads;
    const std::size_t h = static_cast<std::size_t>(bh) % g.heads;
    std::vector<T> q(L * dh), k(L * dh), v(L * dh), dO(L * dh);
    std::vector<T> dq(L * dh), dk(L * dh), dv(L * dh), dP(L * L);
    gather_head(g, qkv.data(), b, h, 0, q.data());
    gather_head(g, qkv.data(), b, h, 1, k.data());
    gather_head(g, qkv.data(), b, h, 2, v.data());
    for (std::size_t i = 0; i < L; ++i) {
      const T* src = dout.data() + (b * L + i) * d + h * dh;
      std::copy(src, src + dh, dO.data() + i * dh);
    }
    const auto p = probs.subspan((b * g.heads + h) * L * L, L * L);

    gemm<T>(Transpose::kYes, Transpose::kNo, L, dh, L, p, dO, dv, false);
    gemm<T>(Transpose::kNo, Transpose::kYes, L, L, dh, dO, v, dP, false);
    for (std::size_t i = 0; i < L; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < L; ++j) dot += p[i * L + j] * dP[i * L + j];
      for (std::size_t j = 0; j < L; ++j) dP[i * L + j] = p[i * L + j] * (dP[i * L + j] - dot) * scale;
    }
    gemm<T>(Transpose::kNo, Transpose::kNo, L, dh, L, dP, k, dq, false);
    gemm<T>(Transpose::kYes, Transpose::kNo, L, dh, L, dP, q, dk, false);

    scatter_add_head(g, dq.data(), b, h, 0, 3 * d, 0, dqkv.data());
    scatter_add_head(g, dk.data(), b, h, 1, 3 * d, 0, dqkv.data());
    scatter_add_head(g, dv.data(), b, h, 2, 3 * d, 0, dqkv.data());
  }
}

namespace reference {

template <typename T>
void attention_forward(const AttentionGeometry& g, std::span<const T> qkv, std::span<T> out,
                       std::span<T> probs) {
  check_attention(g, qkv.size(), out.size(), probs.size());
  const std::size_t L = g.tokens, dh = g.head_dim, d = g.dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  auto at = [&](std::size_t b, std::size_t i, std::size_t which, std::size_t h, std::size_t c) {
    return qkv[(b * L + i) * 3 * d + which * d + h * dh + c];
  };
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t h = 0; h < g.heads; ++h) {
      T* p = probs.data() + (b * g.heads + h) * L * L;
      for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < L; ++j) {
          T s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += at(b, i, 0, h, c) * at(b, j, 1, h, c);
          p[i * L + j] = s * scale;
        }
      }
      softmax_rows(p, L, L);
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t c = 0; c < dh; ++c) {
          T s = 0;
          for (std::size_t j = 0; j < L; ++j) s += p[i * L + j] * at(b, j, 2, h, c);
          out[(b * L + i) * d + h * dh + c] = s;
        }
    }
}

template <typename T>
void attention_backward(const AttentionGeometry& g, std::span<const T> qkv,
                        std::span<const T> probs, std::span<const T> dout, std::span<T> dqkv) {
  check_attention(g, qkv.size(), dout.size(), probs.size());
  const std::size_t L = g.tokens, dh = g.head_dim, d = g.dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  auto idx = [&](std::size_t b, std::size_t i, std::size_t which, std::size_t h, std::size_t c) {
    return (b * L + i) * 3 * d + which * d + h * dh + c;
  };
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t h = 0; h < g.heads; ++h) {
      const T* p = probs.data() + (b * g.heads + h) * L * L;
      std::vector<T> ds(L * L);
      for (std::size_t i = 0; i < L; ++i) {
        std::vector<T> dp(L);
        T dot = 0;
        for (std::size_t j = 0; j < L; ++j) {
          T s = 0;
          for (std::size_t c = 0; c < dh; ++c)
            s += dout[(b * L + i) * d + h * dh + c] * qkv[idx(b, j, 2, h, c)];
          dp[j] = s;
          dot += p[i * L + j] * s;
        }
        for (std::size_t j = 0; j < L; ++j) ds[i * L + j] = p[i * L + j] * (dp[j] - dot) * scale;
      }
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t c = 0; c < dh; ++c) {
          T dq = 0, dk = 0, dv = 0;
          for (std::size_t j = 0; j < L; ++j) {
            dq += ds[i * L + j] * qkv[idx(b, j, 1, h, c)];
            dk += ds[j * L + i] * qkv[idx(b, j, 0, h, c)];
            dv += p[j * L + i] * dout[(b * L + j) * d + h * dh + c];
          }
          dqkv[idx(b, i, 0, h, c)] += dq;
          dqkv[idx(b, i, 1, h, c)] += dk;
          dqkv[idx(b, i, 2, h, c)] += dv;
        }
    }
}

template void attention_forward<float>(const AttentionGeometry&, std::span<const float>,
                                       std::span<float>, std::span<float>);
template void attention_forward<double>(const AttentionGeometry&, std::span<const double>,
                                        std::span<double>, std::span<double>);
template void attention_backward<float>(const AttentionGeometry&, std::span<const float>,
                                        std::span<const float>, std::span<const float>,
                                        std::span<float>);
template void attention_backward<double>(const AttentionGeometry&, std::span<const double>,
                                         std::span<const double>, std::span<const double>,
                                         std::span<double>);

}  // namespace reference

template void attention_forward<float>(const AttentionGeometry&, std::span<const float>,
                                       std::span<float>, std::span<float>);
template void attention_forward<double>(const AttentionGeometry&, std::span<const double>,
                                        std::span<double>, std::span<double>);
template void attention_backward<float>(const AttentionGeometry&, std::span<const float>,
                                        std::span<const float>, std::span<const float>,
                                        std::span<float>);
template void attention_backward<double>(const AttentionGeometry&, std::span<const double>,
                                         std::span<const double>, std::span<const double>,
                                         std::span<double>);

}  // namespace mpjudge::kernels
