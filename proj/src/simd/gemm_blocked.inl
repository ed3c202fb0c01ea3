// Cache-blocked GEMM driver shared by the SIMD translation units. Include it
// inside an anonymous namespace after defining a MicroKernel type with
// static members MR, NR and
//   static void run(int kc, const float* a_panel, const float* b_panel,
//                   float* c, int ldc);
// that accumulates a full MR x NR tile into C. The including file provides
// <algorithm>, <cstddef> and <vector>.

template <class MicroKernel>
struct BlockedGemm {
    static constexpr int MR = MicroKernel::MR;
    static constexpr int NR = MicroKernel::NR;
    static constexpr int KC = 256;
    static constexpr int MC = MR * 24;
    static constexpr int NC = NR * 128;

    static void pack_a(bool trans, const float* a, int lda, int row0, int rows, int col0,
                       int cols, float alpha, float* out) {
        for (int ir = 0; ir < rows; ir += MR) {
            const int mr = std::min(MR, rows - ir);
            for (int p = 0; p < cols; ++p) {
                for (int r = 0; r < MR; ++r) {
                    float v = 0.0f;
                    if (r < mr) {
                        const int i = row0 + ir + r;
                        const int q = col0 + p;
                        v = trans ? a[static_cast<std::size_t>(q) * lda + i]
                                  : a[static_cast<std::size_t>(i) * lda + q];
                    }
                    *out++ = alpha * v;
                }
            }
        }
    }

    static void pack_b(bool trans, const float* b, int ldb, int row0, int rows, int col0,
                       int cols, float* out) {
        for (int jr = 0; jr < cols; jr += NR) {
            const int nr = std::min(NR, cols - jr);
            for (int p = 0; p < rows; ++p) {
                const int q = row0 + p;
                if (!trans && nr == NR) {
                    const float* src = b + static_cast<std::size_t>(q) * ldb + col0 + jr;
                    std::copy(src, src + NR, out);
                    out += NR;
                    continue;
                }
                for (int c = 0; c < NR; ++c) {
                    float v = 0.0f;
                    if (c < nr) {
                        const int j = col0 + jr + c;
                        v = trans ? b[static_cast<std::size_t>(j) * ldb + q]
                                  : b[static_cast<std::size_t>(q) * ldb + j];
                    }
                    *out++ = v;
                }
            }
        }
    }

    static void run(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
                    int lda, const float* b, int ldb, float beta, float* c, int ldc) {
        for (int i = 0; i < m; ++i) {
            float* crow = c + static_cast<std::size_t>(i) * ldc;
            if (beta == 0.0f) {
                std::fill(crow, crow + n, 0.0f);
            } else if (beta != 1.0f) {
                for (int j = 0; j < n; ++j) crow[j] *= beta;
            }
        }
        if (m == 0 || n == 0 || k == 0 || alpha == 0.0f) return;

        thread_local std::vector<float> a_pack;
        thread_local std::vector<float> b_pack;
        alignas(64) float tile[MR * NR];

        for (int jc = 0; jc < n; jc += NC) {
            const int nc = std::min(NC, n - jc);
            const int nc_padded = (nc + NR - 1) / NR * NR;
            for (int pc = 0; pc < k; pc += KC) {
                const int kc = std::min(KC, k - pc);
                b_pack.resize(static_cast<std::size_t>(nc_padded) * kc);
                pack_b(trans_b, b, ldb, pc, kc, jc, nc, b_pack.data());
                for (int ic = 0; ic < m; ic += MC) {
                    const int mc = std::min(MC, m - ic);
                    const int mc_padded = (mc + MR - 1) / MR * MR;
                    a_pack.resize(static_cast<std::size_t>(mc_padded) * kc);
                    pack_a(trans_a, a, lda, ic, mc, pc, kc, alpha, a_pack.data());
                    for (int jr = 0; jr < nc; jr += NR) {
                        const int nr = std::min(NR, nc - jr);
                        const float* bp = b_pack.data() + static_cast<std::size_t>(jr) * kc;
                        for (int ir = 0; ir < mc; ir += MR) {
                            const int mr = std::min(MR, mc - ir);
                            const float* ap = a_pack.data() + static_cast<std::size_t>(ir) * kc;
                            float* cp = c + static_cast<std::size_t>(ic + ir) * ldc + jc + jr;
                            if (mr == MR && nr == NR) {
                                MicroKernel::run(kc, ap, bp, cp, ldc);
                            } else {
                                std::fill(tile, tile + MR * NR, 0.0f);
                                MicroKernel::run(kc, ap, bp, tile, NR);
                                for (int r = 0; r < mr; ++r)
                                    for (int q = 0; q < nr; ++q)
                                        cp[static_cast<std::size_t>(r) * ldc + q] += tile[r * NR + q];
                            }
                        }
                    }
                }
            }
        }
    }
};
