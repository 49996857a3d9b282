// SPDX-License-Identifier: Apache-2.0
#include "kdfip/kernels.hpp"

#include <algorithm>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace kdfip::kernels {

namespace serial {

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p)
                acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = acc;
        }
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p)
                acc += a[i * k + p] * b[j * k + p];
            c[i * n + j] = acc;
        }
}

void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p)
                acc += a[p * m + i] * b[p * n + j];
            c[i * n + j] = acc;
        }
}

} // namespace serial

namespace parallel {

namespace {

// Four output rows at a time. Each c[i,j] still accumulates a[i,p] * b[p,j]
// for p = 0..k-1 in order, so results match the serial reference bit for bit
// while every loaded row of b feeds four rows of c.
constexpr std::size_t kRowBlock = 4;

template <class ALoad>
void row_panel(ALoad a_at, const double *pb, double *pc, std::size_t m, std::size_t k,
               std::size_t n) {
    const auto blocks = static_cast<std::int64_t>((m + kRowBlock - 1) / kRowBlock);
#pragma omp parallel for schedule(static)
    for (std::int64_t bb = 0; bb < blocks; ++bb) {
        const std::size_t i0 = static_cast<std::size_t>(bb) * kRowBlock;
        const std::size_t rows = std::min(kRowBlock, m - i0);
        double *c0 = pc + i0 * n;
        std::fill(c0, c0 + rows * n, 0.0);
        if (rows == kRowBlock) {
            double *c1 = c0 + n, *c2 = c1 + n, *c3 = c2 + n;
            for (std::size_t p = 0; p < k; ++p) {
                const double a0 = a_at(i0, p), a1 = a_at(i0 + 1, p);
                const double a2 = a_at(i0 + 2, p), a3 = a_at(i0 + 3, p);
                const double *__restrict brow = pb + p * n;
                for (std::size_t j = 0; j < n; ++j) {
                    const double bv = brow[j];
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
        } else {
            for (std::size_t r = 0; r < rows; ++r) {
                double *crow = c0 + r * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = a_at(i0 + r, p);
                    const double *brow = pb + p * n;
                    for (std::size_t j = 0; j < n; ++j)
                        crow[j] += av * brow[j];
                }
            }
        }
    }
}

} // namespace

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c,
            std::size_t m, std::size_t k, std::size_t n) {
    const double *pa = a.data();
    row_panel([pa, k](std::size_t i, std::size_t p) { return pa[i * k + p]; }, b.data(),
              c.data(), m, k, n);
}

void matmul_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n) {
    const double *pa = a.data();
    row_panel([pa, m](std::size_t i, std::size_t p) { return pa[p * m + i]; }, b.data(),
              c.data(), m, k, n);
}

void matmul_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
               std::size_t m, std::size_t k, std::size_t n) {
    const double *pa = a.data();
    const double *pb = b.data();
    double *pc = c.data();
    const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static)
    for (std::int64_t ii = 0; ii < rows; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const double *arow = pa + i * k;
        std::size_t j = 0;
        for (; j + 4 <= n; j += 4) {
            const double *b0 = pb + j * k, *b1 = b0 + k, *b2 = b1 + k, *b3 = b2 + k;
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = arow[p];
                s0 += av * b0[p];
                s1 += av * b1[p];
                s2 += av * b2[p];
                s3 += av * b3[p];
            }
            pc[i * n + j] = s0;
            pc[i * n + j + 1] = s1;
            pc[i * n + j + 2] = s2;
            pc[i * n + j + 3] = s3;
        }
        for (; j < n; ++j) {
            const double *brow = pb + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p)
                acc += arow[p] * brow[p];
            pc[i * n + j] = acc;
        }
    }
}

} // namespace parallel

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

} // namespace kdfip::kernels
