#include <algorithm>
#include <cstddef>
#include <vector>

#include "mpjudge/errors.hpp"
#include "mpjudge/kernels.hpp"

namespace mpjudge::kernels {

namespace {

template <typename T>
void check_gemm_sizes(std::size_t m, std::size_t n, std::size_t k, std::span<const T> a,
                      std::span<const T> b, std::span<T> c) {
  if (a.size() != m * k || b.size() != k * n || c.size() != m * n) {
    throw DimensionError("gemm buffer sizes do not match m=" + std::to_string(m) +
                         " n=" + std::to_string(n) + " k=" + std::to_string(k));
  }
}

}  // namespace

template <typename T>
void gemm(Transpose ta, Transpose tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const T> a, std::span<const T> b, std::span<T> c, bool accumulate) {
  check_gemm_sizes(m, n, k, a, b, c);

  // Pack op(B) as k x n so the inner loop is a contiguous axpy.
  std::vector<T> packed;
  const T* bp = b.data();
  if (tb == Transpose::kYes) {
    packed.resize(k * n);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t p = 0; p < k; ++p) packed[p * n + j] = b[j * k + p];
    }
    bp = packed.data();
  }
  const T* ap = a.data();
  T* cp = c.data();
  const bool a_trans = ta == Transpose::kYes;

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    T* crow = cp + i * n;
    if (!accumulate) std::fill(crow, crow + n, T(0));
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a_trans ? ap[p * m + i] : ap[i * k + p];
      const T* brow = bp + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

namespace reference {

template <typename T>
void gemm(Transpose ta, Transpose tb, std::size_t m, std::size_t n, std::size_t k,
          std::span<const T> a, std::span<const T> b, std::span<T> c, bool accumulate) {
  check_gemm_sizes(m, n, k, a, b, c);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * n + j] : T(0);
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ta == Transpose::kYes ? a[p * m + i] : a[i * k + p];
        const T bv = tb == Transpose::kYes ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = acc;
    }
  }
}

template void gemm<float>(Transpose, Transpose, std::size_t, std::size_t, std::size_t,
                          std::span<const float>, std::span<const float>, std::span<float>, bool);
template void gemm<double>(Transpose, Transpose, std::size_t, std::size_t, std::size_t,
                           std::span<const double>, std::span<const double>, std::span<double>,
                           bool);

}  // namespace reference

template void gemm<float>(Transpose, Transpose, std::size_t, std::size_t, std::size_t,
                          std::span<const float>, std::span<const float>, std::span<float>, bool);
template void gemm<double>(Transpose, Transpose, std::size_t, std::size_t, std::size_t,
                           std::span<const double>, std::span<const double>, std::span<double>,
                           bool);

}  // namespace mpjudge::kernels
