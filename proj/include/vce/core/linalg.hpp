#pragma once

#include <cstddef>

#include "vce/simd/kernels.hpp"

namespace vce {

// Row-major GEMM. float goes through the active SIMD kernel table; double
// uses the portable loop (it only backs gradient checks and small models).
template <class T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<std::size_t>(i) * ldc;
        for (int j = 0; j < n; ++j) crow[j] = beta == T(0) ? T(0) : crow[j] * beta;
    }
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<std::size_t>(i) * ldc;
        for (int p = 0; p < k; ++p) {
            const T av = alpha * (trans_a ? a[static_cast<std::size_t>(p) * lda + i]
                                          : a[static_cast<std::size_t>(i) * lda + p]);
            if (av == T(0)) continue;
            if (trans_b) {
                for (int j = 0; j < n; ++j) crow[j] += av * b[static_cast<std::size_t>(j) * ldb + p];
            } else {
                const T* brow = b + static_cast<std::size_t>(p) * ldb;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

template <>
inline void gemm<float>(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
                        const float* a, int lda, const float* b, int ldb, float beta, float* c,
                        int ldc) {
    simd::kernels().sgemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace vce
