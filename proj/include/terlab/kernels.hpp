#pragma once

#include <cstddef>

namespace terlab::kern {

// Dispatch table of the arithmetic inner loops everything else is built on.
// Two lanes ship: a scalar reference and an AVX2/FMA variant; the active one
// is chosen once at runtime (cpuid, overridable via TERLAB_KERNELS=scalar|avx2).
//
// Matmul conventions (all row-major, c is m x n):
//   matmul_nn: c = a[m x k] * b[k x n]
//   matmul_nt: c = a[m x k] * b[n x k]^T
//   matmul_tn: c = a[k x m]^T * b[k x n]
// `accumulate` adds into c instead of overwriting it.
struct Kernels {
    const char* name;

    void (*add)(const double* a, const double* b, double* out, std::size_t n);
    void (*sub)(const double* a, const double* b, double* out, std::size_t n);
    void (*mul)(const double* a, const double* b, double* out, std::size_t n);
    void (*scale)(const double* a, double alpha, double* out, std::size_t n);
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
    void (*madd)(const double* a, const double* b, double* out, std::size_t n); // out += a.*b
    double (*dot)(const double* a, const double* b, std::size_t n);
    double (*sum)(const double* a, std::size_t n);
    double (*max)(const double* a, std::size_t n);
    void (*vexp)(const double* a, double* out, std::size_t n);

    void (*matmul_nn)(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n, bool accumulate);
    void (*matmul_nt)(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n, bool accumulate);
    void (*matmul_tn)(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n, bool accumulate);
};

const Kernels& scalar_kernels();

// True when the AVX2 lane was compiled in and the CPU supports AVX2+FMA.
bool avx2_available();
const Kernels& avx2_kernels(); // only valid when avx2_available()

// Runtime-selected lane. Selection happens on first call and is stable for
// the life of the process, so repeated runs on one machine are bit-identical.
const Kernels& active();

// Test hook: override the active lane.
void force(const Kernels& k);

} // namespace terlab::kern
