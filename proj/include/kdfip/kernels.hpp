// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense matrix kernels used by the tape. Every kernel exists twice: a plain
// serial reference and an OpenMP version parallel over output rows. Both
// accumulate each output element over the inner dimension in increasing
// order, so results do not depend on the thread count.

#include <cstddef>
#include <span>

namespace kdfip::kernels {

namespace serial {

/// c[m,n] = a[m,k] * b[k,n]
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n);
/// c[m,n] = a[m,k] * b[n,k]^T
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n);
/// c[m,n] = a[k,m]^T * b[k,n]
void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n);

} // namespace serial

namespace parallel {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n);
void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n);
void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n);

} // namespace parallel

/// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

} // namespace kdfip::kernels
