// AVX2/FMA lane. Compiled with -mavx2 -mfma on x86-64 only; callers go
// through the dispatch table, which checks cpuid before handing out this
// lane. Reduction order differs from the scalar lane (4-wide lanes folded at
// the end), so reductions agree with scalar to rounding, not bitwise.

#if defined(__x86_64__) || defined(_M_X64)

#include "terlab/kernels.hpp"

#include <cmath>
#include <cstring>
#include <immintrin.h>

namespace terlab::kern {
namespace {

void add_v(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_v(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_v(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_v(const double* a, double alpha, double* out, std::size_t n) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), va));
    for (; i < n; ++i) out[i] = a[i] * alpha;
}

void axpy_v(double alpha, const double* x, double* y, std::size_t n) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void madd_v(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i),
                                                  _mm256_loadu_pd(out + i)));
    for (; i < n; ++i) out[i] += a[i] * b[i];
}

double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
}

double dot_v(const double* a, const double* b, std::size_t n) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
    double r = hsum(acc);
    for (; i < n; ++i) r += a[i] * b[i];
    return r;
}

double sum_v(const double* a, std::size_t n) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(a + i));
    double r = hsum(acc);
    for (; i < n; ++i) r += a[i];
    return r;
}

double max_v(const double* a, std::size_t n) {
    if (n < 8) {
        double m = a[0];
        for (std::size_t i = 1; i < n; ++i)
            if (a[i] > m) m = a[i];
        return m;
    }
    __m256d acc = _mm256_loadu_pd(a);
    std::size_t i = 4;
    for (; i + 4 <= n; i += 4) acc = _mm256_max_pd(acc, _mm256_loadu_pd(a + i));
    __m128d lo = _mm_max_pd(_mm256_castpd256_pd128(acc), _mm256_extractf128_pd(acc, 1));
    double m = _mm_cvtsd_f64(_mm_max_sd(lo, _mm_unpackhi_pd(lo, lo)));
    for (; i < n; ++i)
        if (a[i] > m) m = a[i];
    return m;
}

// ---------------------------------------------------------------------------
// Vector exp, Cephes-style: x = n*ln2 + r, exp(r) via a rational polynomial,
// scale by 2^n through the exponent bits. |rel err| vs libm is a few ulp.
// ---------------------------------------------------------------------------

const __m256d kLog2E = _mm256_set1_pd(1.4426950408889634073599);
const __m256d kLn2Hi = _mm256_set1_pd(6.93145751953125e-1);
const __m256d kLn2Lo = _mm256_set1_pd(1.42860682030941723212e-6);
const __m256d kP0 = _mm256_set1_pd(1.26177193074810590878e-4);
const __m256d kP1 = _mm256_set1_pd(3.02994407707441961300e-2);
const __m256d kP2 = _mm256_set1_pd(9.99999999999999999910e-1);
const __m256d kQ0 = _mm256_set1_pd(3.00198505138664455042e-6);
const __m256d kQ1 = _mm256_set1_pd(2.52448340349684104192e-3);
const __m256d kQ2 = _mm256_set1_pd(2.27265548208155028766e-1);
const __m256d kQ3 = _mm256_set1_pd(2.00000000000000000005e0);
const double kExpLo = -708.396418532264106224; // below: exp underflows to 0
const double kExpHi = 709.782712893383996843;  // above: exp overflows to inf

__m256d exp4(__m256d x) {
    const __m256d n = _mm256_round_pd(_mm256_mul_pd(x, kLog2E),
                                      _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    // r = x - n*ln2, split high/low to keep the reduction exact
    __m256d r = _mm256_fnmadd_pd(n, kLn2Hi, x);
    r = _mm256_fnmadd_pd(n, kLn2Lo, r);

    const __m256d r2 = _mm256_mul_pd(r, r);
    __m256d p = _mm256_fmadd_pd(kP0, r2, kP1);
    p = _mm256_fmadd_pd(p, r2, kP2);
    p = _mm256_mul_pd(p, r);
    __m256d q = _mm256_fmadd_pd(kQ0, r2, kQ1);
    q = _mm256_fmadd_pd(q, r2, kQ2);
    q = _mm256_fmadd_pd(q, r2, kQ3);
    // exp(r) = 1 + 2p/(q - p)
    const __m256d e = _mm256_add_pd(_mm256_set1_pd(1.0),
                                    _mm256_div_pd(_mm256_add_pd(p, p), _mm256_sub_pd(q, p)));

    // 2^n via the exponent field (|n| < 1100 here, no denormal handling needed)
    const __m128i n32 = _mm256_cvtpd_epi32(n);
    const __m256i n64 = _mm256_cvtepi32_epi64(n32);
    const __m256i bits = _mm256_slli_epi64(_mm256_add_epi64(n64, _mm256_set1_epi64x(1023)), 52);
    return _mm256_mul_pd(e, _mm256_castsi256_pd(bits));
}

void vexp_v(const double* a, double* out, std::size_t n) {
    const __m256d lo = _mm256_set1_pd(kExpLo);
    const __m256d hi = _mm256_set1_pd(kExpHi);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d x = _mm256_loadu_pd(a + i);
        const __m256d inRange = _mm256_and_pd(_mm256_cmp_pd(x, lo, _CMP_GT_OQ),
                                              _mm256_cmp_pd(x, hi, _CMP_LT_OQ));
        if (_mm256_movemask_pd(inRange) == 0xF) {
            _mm256_storeu_pd(out + i, exp4(x));
        } else {
            for (int l = 0; l < 4; ++l) out[i + l] = std::exp(a[i + l]);
        }
    }
    for (; i < n; ++i) out[i] = std::exp(a[i]);
}

// ---------------------------------------------------------------------------
// Matmul variants. Same loop orders as the scalar lane so per-element
// accumulation sequences match; only FMA contraction differs.
// ---------------------------------------------------------------------------

void matmul_nn_v(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (!accumulate) std::memset(c, 0, m * n * sizeof(double));
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const __m256d av = _mm256_set1_pd(arow[p]);
            const double* brow = b + p * n;
            std::size_t j = 0;
            for (; j + 4 <= n; j += 4)
                _mm256_storeu_pd(crow + j, _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + j),
                                                           _mm256_loadu_pd(crow + j)));
            for (; j < n; ++j) crow[j] += arow[p] * brow[j];
        }
    }
}

void matmul_nt_v(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = dot_v(arow, b + j * k, k);
            crow[j] = accumulate ? crow[j] + d : d;
        }
    }
}

void matmul_tn_v(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (!accumulate) std::memset(c, 0, m * n * sizeof(double));
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const __m256d av = _mm256_set1_pd(arow[i]);
            double* crow = c + i * n;
            std::size_t j = 0;
            for (; j + 4 <= n; j += 4)
                _mm256_storeu_pd(crow + j, _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + j),
                                                           _mm256_loadu_pd(crow + j)));
            for (; j < n; ++j) crow[j] += arow[i] * brow[j];
        }
    }
}

} // namespace

bool avx2_available() {
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

const Kernels& avx2_kernels() {
    static const Kernels k = {
        "avx2",   add_v, sub_v,  mul_v,  scale_v,     axpy_v,      madd_v,      dot_v,
        sum_v,    max_v, vexp_v, matmul_nn_v, matmul_nt_v, matmul_tn_v,
    };
    return k;
}

} // namespace terlab::kern

#else

#include "terlab/kernels.hpp"

namespace terlab::kern {
bool avx2_available() { return false; }
const Kernels& avx2_kernels() { return scalar_kernels(); }
} // namespace terlab::kern

#endif
