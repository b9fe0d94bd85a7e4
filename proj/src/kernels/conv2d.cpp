#include <cstddef>
#include <vector>

#include "mpjudge/errors.hpp"
#include "mpjudge/kernels.hpp"

namespace mpjudge::kernels {

namespace {

void check_geometry(const ConvGeometry& g) {
  if (g.stride == 0) throw DimensionError("conv2d stride must be positive");
  if (g.kernel > g.height + 2 * g.padding || g.kernel > g.width + 2 * g.padding) {
    throw DimensionError("conv2d kernel " + std::to_string(g.kernel) + " exceeds padded input " +
                         std::to_string(g.height + 2 * g.padding) + "x" +
                         std::to_string(g.width + 2 * g.padding));
  }
}

template <typename T>
void check_buffers(const ConvGeometry& g, std::size_t x, std::size_t w, std::size_t y) {
  const std::size_t kk = g.kernel * g.kernel;
  if (x != g.batch * g.in_channels * g.height * g.width ||
      w != g.out_channels * g.in_channels * kk ||
      y != g.batch * g.out_channels * g.out_height() * g.out_width()) {
    throw DimensionError("conv2d buffer sizes do not match geometry");
  }
}

// Column matrix of one image: (Cin*k*k) x (Ho*Wo).
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const std::size_t k = g.kernel;
  const std::size_t rows = g.in_channels * k * k;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t rr = 0; rr < static_cast<std::ptrdiff_t>(rows); ++rr) {
    const auto r = static_cast<std::size_t>(rr);
    const std::size_t c = r / (k * k);
    const std::size_t ki = (r / k) % k;
    const std::size_t kj = r % k;
    T* out = col + r * ho * wo;
    const T* plane = x + c * g.height * g.width;
    for (std::size_t oi = 0; oi < ho; ++oi) {
      const std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                                static_cast<std::ptrdiff_t>(g.padding);
      for (std::size_t oj = 0; oj < wo; ++oj) {
        const std::ptrdiff_t xj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                                  static_cast<std::ptrdiff_t>(g.padding);
        const bool inside = yi >= 0 && yi < static_cast<std::ptrdiff_t>(g.height) && xj >= 0 &&
                            xj < static_cast<std::ptrdiff_t>(g.width);
        out[oi * wo + oj] = inside ? plane[yi * static_cast<std::ptrdiff_t>(g.width) + xj] : T(0);
      }
    }
  }
}

// Scatter-add of a column matrix back onto one image. Parallel over
// input channels so no two threads touch the same plane.
template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* dx) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const std::size_t k = g.kernel;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t cc = 0; cc < static_cast<std::ptrdiff_t>(g.in_channels); ++cc) {
    const auto c = static_cast<std::size_t>(cc);
    T* plane = dx + c * g.height * g.width;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* in = col + ((c * k + ki) * k + kj) * ho * wo;
        for (std::size_t oi = 0; oi < ho; ++oi) {
          const std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.padding);
          if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t oj = 0; oj < wo; ++oj) {
            const std::ptrdiff_t xj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            if (xj < 0 || xj >= static_cast<std::ptrdiff_t>(g.width)) continue;
            plane[yi * static_cast<std::ptrdiff_t>(g.width) + xj] += in[oi * wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                    std::span<T> y) {
  check_geometry(g);
  check_buffers<T>(g, x.size(), w.size(), y.size());
  const std::size_t cols = g.out_height() * g.out_width();
  const std::size_t rows = g.in_channels * g.kernel * g.kernel;
  std::vector<T> col(rows * cols);
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(g, x.data() + b * g.in_channels * g.height * g.width, col.data());
    gemm<T>(Transpose::kNo, Transpose::kNo, g.out_channels, cols, rows, w,
            std::span<const T>(col), y.subspan(b * g.out_channels * cols, g.out_channels * cols),
            false);
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dw) {
  check_geometry(g);
  check_buffers<T>(g, x.size(), w.size(), dy.size());
  const std::size_t cols = g.out_height() * g.out_width();
  const std::size_t rows = g.in_channels * g.kernel * g.kernel;
  const std::size_t image = g.in_channels * g.height * g.width;
  std::vector<T> col(rows * cols);
  for (std::size_t b = 0; b < g.batch; ++b) {
    const auto dyb = dy.subspan(b * g.out_channels * cols, g.out_channels * cols);
    if (!dw.empty()) {
      im2col(g, x.data() + b * image, col.data());
      gemm<T>(Transpose::kNo, Transpose::kYes, g.out_channels, rows, cols, dyb,
              std::span<const T>(col), dw, true);
    }
    if (!dx.empty()) {
      gemm<T>(Transpose::kYes, Transpose::kNo, rows, cols, g.out_channels, w, dyb,
              std::span<T>(col), false);
      col2im_add(g, col.data(), dx.data() + b * image);
    }
  }
}

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                    std::span<T> y) {
  check_geometry(g);
  check_buffers<T>(g, x.size(), w.size(), y.size());
  const std::size_t ho = g.out_height(), wo = g.out_width(), k = g.kernel;
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t oi = 0; oi < ho; ++oi)
        for (std::size_t oj = 0; oj < wo; ++oj) {
          T acc = 0;
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                const auto yi = static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                                static_cast<std::ptrdiff_t>(g.padding);
                const auto xj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                                static_cast<std::ptrdiff_t>(g.padding);
                if (yi < 0 || xj < 0 || yi >= static_cast<std::ptrdiff_t>(g.height) ||
                    xj >= static_cast<std::ptrdiff_t>(g.width))
                  continue;
                acc += x[((b * g.in_channels + c) * g.height + yi) * g.width + xj] *
                       w[((o * g.in_channels + c) * k + ki) * k + kj];
              }
          y[((b * g.out_channels + o) * ho + oi) * wo + oj] = acc;
        }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dw) {
  check_geometry(g);
  check_buffers<T>(g, x.size(), w.size(), dy.size());
  const std::size_t ho = g.out_height(), wo = g.out_width(), k = g.kernel;
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t oi = 0; oi < ho; ++oi)
        for (std::size_t oj = 0; oj < wo; ++oj) {
          const T grad = dy[((b * g.out_channels + o) * ho + oi) * wo + oj];
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                const auto yi = static_cast<std::ptrdiff_t>(oi * g.stride + ki) -
                                static_cast<std::ptrdiff_t>(g.padding);
                const auto xj = static_cast<std::ptrdiff_t>(oj * g.stride + kj) -
                                static_cast<std::ptrdiff_t>(g.padding);
                if (yi < 0 || xj < 0 || yi >= static_cast<std::ptrdiff_t>(g.height) ||
                    xj >= static_cast<std::ptrdiff_t>(g.width))
                  continue;
                const std::size_t xi = ((b * g.in_channels + c) * g.height + yi) * g.width + xj;
                const std::size_t wi = ((o * g.in_channels + c) * k + ki) * k + kj;
                if (!dx.empty()) dx[xi] += grad * w[wi];
                if (!dw.empty()) dw[wi] += grad * x[xi];
              }
        }
}

template void conv2d_forward<float>(const ConvGeometry&, std::span<const float>,
                                    std::span<const float>, std::span<float>);
template void conv2d_forward<double>(const ConvGeometry&, std::span<const double>,
                                     std::span<const double>, std::span<double>);
template void conv2d_backward<float>(const ConvGeometry&, std::span<const float>,
                                     std::span<const float>, std::span<const float>,
                                     std::span<float>, std::span<float>);
template void conv2d_backward<double>(const ConvGeometry&, std::span<const double>,
                                      std::span<const double>, std::span<const double>,
                                      std::span<double>, std::span<double>);

}  // namespace reference

template void conv2d_forward<float>(const ConvGeometry&, std::span<const float>,
                                    std::span<const float>, std::span<float>);
template void conv2d_forward<double>(const ConvGeometry&, std::span<const double>,
                                     std::span<const double>, std::span<double>);
template void conv2d_backward<float>(const ConvGeometry&, std::span<const float>,
                                     std::span<const float>, std::span<const float>,
                                     std::span<float>, std::span<float>);
template void conv2d_backward<double>(const ConvGeometry&, std::span<const double>,
                                      std::span<const double>, std::span<const double>,
                                      std::span<double>, std::span<double>);

}  // namespace mpjudge::kernels
