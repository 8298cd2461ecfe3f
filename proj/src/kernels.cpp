#include "pcstyle/kernels.hpp"

#include <cstdlib>
#include <string_view>

namespace pcstyle::kernels {

#if defined(PCSTYLE_HAVE_AVX2)
const KernelTable* avx2_table_impl() noexcept;
#endif

const KernelTable* avx2_table() noexcept {
#if defined(PCSTYLE_HAVE_AVX2)
    static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    return supported ? avx2_table_impl() : nullptr;
#else
    return nullptr;
#endif
}

const KernelTable& active() noexcept {
    static const KernelTable& table = []() -> const KernelTable& {
        const char* env = std::getenv("PCSTYLE_SIMD");
        if (env != nullptr && std::string_view(env) == "scalar") return scalar_table();
        if (const KernelTable* t = avx2_table()) return *t;
        return scalar_table();
    }();
    return table;
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    const KernelTable& t = active();
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            if (arow[i] != 0.0) t.axpy(arow[i], brow, c + i * n, n);
        }
    }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
    const KernelTable& t = active();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) c[i * n + j] += t.dot(a + i * k, b + j * k, k);
    }
}

}  // namespace pcstyle::kernels
