#pragma once

#include <cstddef>
#include <string_view>

// Dense inner loops used by the linear layers, convolutions and splat blending.
// Every kernel has a scalar reference implementation; an AVX2/FMA variant is
// selected at runtime when the CPU supports it. The equivalence tests compare
// the two tables directly.

namespace pcstyle::kernels {

struct KernelTable {
    std::string_view name;
    double (*dot)(const double* a, const double* b, std::size_t n);
    /// y += alpha * x
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
    /// C[M,N] += A[M,K] * B[K,N], all row-major with leading dimensions.
    void (*gemm)(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                 const double* b, std::size_t ldb, double* c, std::size_t ldc);
};

const KernelTable& scalar_table() noexcept;

/// nullptr when the binary was built without AVX2 support or the CPU lacks it.
const KernelTable* avx2_table() noexcept;

/// The table used by the library. Chosen once: AVX2 if available, unless the
/// environment variable PCSTYLE_SIMD=scalar forces the reference path.
const KernelTable& active() noexcept;

inline double dot(const double* a, const double* b, std::size_t n) { return active().dot(a, b, n); }
inline void axpy(double alpha, const double* x, double* y, std::size_t n) { active().axpy(alpha, x, y, n); }
inline void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                 const double* b, std::size_t ldb, double* c, std::size_t ldc) {
    active().gemm(m, n, k, a, lda, b, ldb, c, ldc);
}

/// C[M,N] += A^T * B where A is [K,M].
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
/// C[M,N] += A * B^T where B is [N,K].
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);

}  // namespace pcstyle::kernels
