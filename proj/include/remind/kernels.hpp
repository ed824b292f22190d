#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

// Dense inner loops used by the tape primitives. The default entry points are
// OpenMP-parallel over output rows; `serial::` holds the plain reference loops
// that tests and benchmarks compare against. Every output element is reduced
// by exactly one thread in a fixed order, so both paths are bitwise equal.
namespace remind::kernels {

// Below this many multiply-adds a kernel stays on the calling thread.
inline constexpr std::size_t kParallelThreshold = 1 << 16;

// c[m,n] = a[m,k] * b[k,n]
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n);
// c[k,n] += a[m,k]^T * b[m,n]
void matmul_at_b_acc(std::span<const double> a, std::span<const double> b,
                     std::span<double> c, std::size_t m, std::size_t k, std::size_t n);
// c[m,k] += a[m,n] * b[k,n]^T
void matmul_a_bt_acc(std::span<const double> a, std::span<const double> b,
                     std::span<double> c, std::size_t m, std::size_t n, std::size_t k);

// Row softmax with row-max subtraction. `mask` (optional, same size as x)
// marks allowed entries with 1; disallowed entries produce probability 0.
// A row with no allowed entry is all zeros.
void softmax_rows(std::span<const double> x, std::span<const std::uint8_t> mask,
                  std::span<double> y, std::size_t rows, std::size_t cols);

// dx = y * (dy - sum(dy * y)) per row
void softmax_rows_backward(std::span<const double> y, std::span<const double> dy,
                           std::span<double> dx, std::size_t rows, std::size_t cols);

namespace serial {
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n);
void matmul_at_b_acc(std::span<const double> a, std::span<const double> b,
                     std::span<double> c, std::size_t m, std::size_t k, std::size_t n);
void matmul_a_bt_acc(std::span<const double> a, std::span<const double> b,
                     std::span<double> c, std::size_t m, std::size_t n, std::size_t k);
void softmax_rows(std::span<const double> x, std::span<const std::uint8_t> mask,
                  std::span<double> y, std::size_t rows, std::size_t cols);
void softmax_rows_backward(std::span<const double> y, std::span<const double> dy,
                           std::span<double> dx, std::size_t rows, std::size_t cols);
}  // namespace serial

}  // namespace remind::kernels
