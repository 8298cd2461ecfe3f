// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.
#include "pcstyle/kernels.hpp"

#if defined(PCSTYLE_HAVE_AVX2)
#include <immintrin.h>

namespace pcstyle::kernels {
namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d shuf = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, shuf));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    }
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

// Four rows of C per pass so each B row load feeds four FMAs.
void gemm_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        double* c0 = c + i * ldc;
        double* c1 = c0 + ldc;
        double* c2 = c1 + ldc;
        double* c3 = c2 + ldc;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b + p * ldb;
            const double a0 = a[i * lda + p];
            const double a1 = a[(i + 1) * lda + p];
            const double a2 = a[(i + 2) * lda + p];
            const double a3 = a[(i + 3) * lda + p];
            const __m256d v0 = _mm256_set1_pd(a0);
            const __m256d v1 = _mm256_set1_pd(a1);
            const __m256d v2 = _mm256_set1_pd(a2);
            const __m256d v3 = _mm256_set1_pd(a3);
            std::size_t j = 0;
            for (; j + 4 <= n; j += 4) {
                const __m256d bv = _mm256_loadu_pd(brow + j);
                _mm256_storeu_pd(c0 + j, _mm256_fmadd_pd(v0, bv, _mm256_loadu_pd(c0 + j)));
                _mm256_storeu_pd(c1 + j, _mm256_fmadd_pd(v1, bv, _mm256_loadu_pd(c1 + j)));
                _mm256_storeu_pd(c2 + j, _mm256_fmadd_pd(v2, bv, _mm256_loadu_pd(c2 + j)));
                _mm256_storeu_pd(c3 + j, _mm256_fmadd_pd(v3, bv, _mm256_loadu_pd(c3 + j)));
            }
            for (; j < n; ++j) {
                c0[j] += a0 * brow[j];
                c1[j] += a1 * brow[j];
                c2[j] += a2 * brow[j];
                c3[j] += a3 * brow[j];
            }
        }
    }
    for (; i < m; ++i) {
        double* crow = c + i * ldc;
        for (std::size_t p = 0; p < k; ++p) axpy_avx2(a[i * lda + p], b + p * ldb, crow, n);
    }
}

}  // namespace

const KernelTable* avx2_table_impl() noexcept {
    static const KernelTable table{"avx2", &dot_avx2, &axpy_avx2, &gemm_avx2};
    return &table;
}

}  // namespace pcstyle::kernels
#endif
