#pragma once

// Dense arithmetic kernels with a scalar reference path and runtime-selected
// SIMD variants. Every variant must agree with the scalar path up to
// floating-point reassociation; tests/test_simd.cpp checks that.

#include <cstddef>
#include <string_view>

namespace vce::simd {

enum class Level { scalar = 0, avx2 = 1, avx512 = 2 };

std::string_view level_name(Level level);

// Highest level supported by the running CPU.
Level detected_level();

// Level used by kernels(). Defaults to detected_level(), can be lowered by the
// VCE_SIMD environment variable ("scalar", "avx2", "avx512") or set_level().
Level active_level();
void set_level(Level level);
bool level_supported(Level level);

// Row-major C = alpha * op(A) * op(B) + beta * C, op(X) = X or X^T.
// op(A) is m x k, op(B) is k x n.
using SgemmFn = void (*)(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
                         const float* a, int lda, const float* b, int ldb, float beta, float* c,
                         int ldc);

// Sum of squared differences, accumulated in double.
using SumSqDiffFn = double (*)(const float* a, const float* b, std::size_t n);

// y += alpha * x
using AxpyFn = void (*)(std::size_t n, float alpha, const float* x, float* y);

struct KernelTable {
    Level level;
    SgemmFn sgemm;
    SumSqDiffFn sum_sq_diff;
    AxpyFn axpy;
};

const KernelTable& kernels();
const KernelTable& kernels(Level level);

namespace scalar {
void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
           const float* b, int ldb, float beta, float* c, int ldc);
double sum_sq_diff(const float* a, const float* b, std::size_t n);
void axpy(std::size_t n, float alpha, const float* x, float* y);
}  // namespace scalar

namespace avx2 {
void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
           const float* b, int ldb, float beta, float* c, int ldc);
double sum_sq_diff(const float* a, const float* b, std::size_t n);
void axpy(std::size_t n, float alpha, const float* x, float* y);
}  // namespace avx2

namespace avx512 {
void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
           const float* b, int ldb, float beta, float* c, int ldc);
double sum_sq_diff(const float* a, const float* b, std::size_t n);
void axpy(std::size_t n, float alpha, const float* x, float* y);
}  // namespace avx512

}  // namespace vce::simd
