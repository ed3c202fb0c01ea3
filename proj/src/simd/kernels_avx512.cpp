// Compiled with -mavx512f -mfma; only reached when the CPU reports AVX-512F.
#include <immintrin.h>

#include <algorithm>
#include <cstddef>
#include <vector>

#include "vce/simd/kernels.hpp"

namespace vce::simd::avx512 {
namespace {

#include "gemm_blocked.inl"

struct Micro6x32 {
    static constexpr int MR = 6;
    static constexpr int NR = 32;

    static void run(int kc, const float* a, const float* b, float* c, int ldc) {
        __m512 acc[MR][2];
        for (int r = 0; r < MR; ++r) {
            acc[r][0] = _mm512_loadu_ps(c + static_cast<std::size_t>(r) * ldc);
            acc[r][1] = _mm512_loadu_ps(c + static_cast<std::size_t>(r) * ldc + 16);
        }
        for (int p = 0; p < kc; ++p) {
            const __m512 b0 = _mm512_loadu_ps(b);
            const __m512 b1 = _mm512_loadu_ps(b + 16);
            for (int r = 0; r < MR; ++r) {
                const __m512 av = _mm512_set1_ps(a[r]);
                acc[r][0] = _mm512_fmadd_ps(av, b0, acc[r][0]);
                acc[r][1] = _mm512_fmadd_ps(av, b1, acc[r][1]);
            }
            a += MR;
            b += NR;
        }
        for (int r = 0; r < MR; ++r) {
            _mm512_storeu_ps(c + static_cast<std::size_t>(r) * ldc, acc[r][0]);
            _mm512_storeu_ps(c + static_cast<std::size_t>(r) * ldc + 16, acc[r][1]);
        }
    }
};

}  // namespace

void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
           const float* b, int ldb, float beta, float* c, int ldc) {
    BlockedGemm<Micro6x32>::run(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

double sum_sq_diff(const float* a, const float* b, std::size_t n) {
    __m512d acc0 = _mm512_setzero_pd();
    __m512d acc1 = _mm512_setzero_pd();
    std::size_t i = 0;
    // widen before subtracting so differences are exact
    for (; i + 16 <= n; i += 16) {
        const __m512d lo =
            _mm512_sub_pd(_mm512_cvtps_pd(_mm256_loadu_ps(a + i)), _mm512_cvtps_pd(_mm256_loadu_ps(b + i)));
        const __m512d hi =
            _mm512_sub_pd(_mm512_cvtps_pd(_mm256_loadu_ps(a + i + 8)), _mm512_cvtps_pd(_mm256_loadu_ps(b + i + 8)));
        acc0 = _mm512_fmadd_pd(lo, lo, acc0);
        acc1 = _mm512_fmadd_pd(hi, hi, acc1);
    }
    double acc = _mm512_reduce_add_pd(_mm512_add_pd(acc0, acc1));
    for (; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return acc;
}

void axpy(std::size_t n, float alpha, const float* x, float* y) {
    const __m512 av = _mm512_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16)
        _mm512_storeu_ps(y + i, _mm512_fmadd_ps(av, _mm512_loadu_ps(x + i), _mm512_loadu_ps(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace vce::simd::avx512
