#include "remind/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace remind::kernels {

namespace {

inline void matmul_row(const double* a, const double* b, double* c, std::size_t k,
                       std::size_t n) {
  std::fill(c, c + n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a[p];
    const double* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
  }
}

// Row r of c[k,n] += sum_i a[i, r] * b[i, :]
inline void at_b_row(const double* a, const double* b, double* c, std::size_t m,
                     std::size_t k, std::size_t n, std::size_t r) {
  double* crow = c + r * n;
  for (std::size_t i = 0; i < m; ++i) {
    const double av = a[i * k + r];
    if (av == 0.0) continue;
    const double* brow = b + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

inline void a_bt_row(const double* a, const double* b, double* c, std::size_t n,
                     std::size_t k, std::size_t i) {
  const double* arow = a + i * n;
  double* crow = c + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * n;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
    crow[p] += s;
  }
}

inline void softmax_row(const double* x, const std::uint8_t* mask, double* y,
                        std::size_t cols) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < cols; ++j)
    if (!mask || mask[j]) mx = std::max(mx, x[j]);
  if (mx == -std::numeric_limits<double>::infinity()) {
    std::fill(y, y + cols, 0.0);
    return;
  }
  double s = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    const double e = (!mask || mask[j]) ? std::exp(x[j] - mx) : 0.0;
    y[j] = e;
    s += e;
  }
  const double inv = 1.0 / s;
  for (std::size_t j = 0; j < cols; ++j) y[j] *= inv;
}

inline void softmax_backward_row(const double* y, const double* dy, double* dx,
                                 std::size_t cols) {
  double dot = 0.0;
  for (std::size_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
  for (std::size_t j = 0; j < cols; ++j) dx[j] += y[j] * (dy[j] - dot);
}

}  // namespace

namespace serial {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) matmul_row(a.data() + i * k, b.data(), c.data() + i * n, k, n);
}

void matmul_at_b_acc(std::span<const double> a, std::span<const double> b,
                     std::span<double> c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t r = 0; r < k; ++r) at_b_row(a.data(), b.data(), c.data(), m, k, n, r);
}

void matmul_a_bt_acc(std::span<const double> a, std::span<const double> b,
                     std::span<double> c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) a_bt_row(a.data(), b.data(), c.data(), n, k, i);
}

void softmax_rows(std::span<const double> x, std::span<const std::uint8_t> mask,
                  std::span<double> y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    softmax_row(x.data() + r * cols, mask.empty() ? nullptr : mask.data() + r * cols,
                y.data() + r * cols, cols);
}

void softmax_rows_backward(std::span<const double> y, std::span<const double> dy,
                           std::span<double> dx, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    softmax_backward_row(y.data() + r * cols, dy.data() + r * cols, dx.data() + r * cols, cols);
}

}  // namespace serial

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelThreshold)
  for (std::ptrdiff_t i = 0; i < rows; ++i)
    matmul_row(a.data() + i * k, b.data(), c.data() + i * n, k, n);
}

void matmul_at_b_acc(std::span<const double> a, std::span<const double> b,
                     std::span<double> c, std::size_t m, std::size_t k, std::size_t n) {
  const auto rows = static_cast<std::ptrdiff_t>(k);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelThreshold)
  for (std::ptrdiff_t r = 0; r < rows; ++r)
    at_b_row(a.data(), b.data(), c.data(), m, k, n, static_cast<std::size_t>(r));
}

void matmul_a_bt_acc(std::span<const double> a, std::span<const double> b,
                     std::span<double> c, std::size_t m, std::size_t n, std::size_t k) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelThreshold)
  for (std::ptrdiff_t i = 0; i < rows; ++i)
    a_bt_row(a.data(), b.data(), c.data(), n, k, static_cast<std::size_t>(i));
}

void softmax_rows(std::span<const double> x, std::span<const std::uint8_t> mask,
                  std::span<double> y, std::size_t rows, std::size_t cols) {
  const auto r_end = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelThreshold)
  for (std::ptrdiff_t r = 0; r < r_end; ++r)
    softmax_row(x.data() + r * cols, mask.empty() ? nullptr : mask.data() + r * cols,
                y.data() + r * cols, cols);
}

void softmax_rows_backward(std::span<const double> y, std::span<const double> dy,
                           std::span<double> dx, std::size_t rows, std::size_t cols) {
  const auto r_end = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelThreshold)
  for (std::ptrdiff_t r = 0; r < r_end; ++r)
    softmax_backward_row(y.data() + r * cols, dy.data() + r * cols, dx.data() + r * cols, cols);
}

}  // namespace remind::kernels
