#include "vce/simd/kernels.hpp"

namespace vce::simd::scalar {

void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
           const float* b, int ldb, float beta, float* c, int ldc) {
    for (int i = 0; i < m; ++i) {
        float* crow = c + static_cast<std::size_t>(i) * ldc;
        if (beta == 0.0f) {
            for (int j = 0; j < n; ++j) crow[j] = 0.0f;
        } else if (beta != 1.0f) {
            for (int j = 0; j < n; ++j) crow[j] *= beta;
        }
    }
    if (!trans_b) {
        // i-p-j keeps the B and C rows contiguous.
        for (int i = 0; i < m; ++i) {
            float* crow = c + static_cast<std::size_t>(i) * ldc;
            for (int p = 0; p < k; ++p) {
                const float av = alpha * (trans_a ? a[static_cast<std::size_t>(p) * lda + i]
                                                  : a[static_cast<std::size_t>(i) * lda + p]);
                if (av == 0.0f) continue;
                const float* brow = b + static_cast<std::size_t>(p) * ldb;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
        return;
    }
    for (int i = 0; i < m; ++i) {
        float* crow = c + static_cast<std::size_t>(i) * ldc;
        for (int j = 0; j < n; ++j) {
            const float* brow = b + static_cast<std::size_t>(j) * ldb;
            float acc = 0.0f;
            for (int p = 0; p < k; ++p) {
                const float av = trans_a ? a[static_cast<std::size_t>(p) * lda + i]
                                         : a[static_cast<std::size_t>(i) * lda + p];
                acc += av * brow[p];
            }
            crow[j] += alpha * acc;
        }
    }
}

double sum_sq_diff(const float* a, const float* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return acc;
}

void axpy(std::size_t n, float alpha, const float* x, float* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace vce::simd::scalar
