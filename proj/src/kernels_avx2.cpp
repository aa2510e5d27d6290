#include "seqkv/kernels.hpp"

#include <cmath>

#if defined(__x86_64__) || defined(_M_X64)
#include <immintrin.h>
#define SEQKV_BUILD_AVX2 1
#else
#define SEQKV_BUILD_AVX2 0
#endif

namespace seqkv::kern {

#if SEQKV_BUILD_AVX2

namespace {

// Lane j of the accumulator register holds elements with index ≡ j (mod 4),
// matching the scalar reference exactly. Combine order is (l0+l2)+(l1+l3).
inline double combine_lanes(__m256d acc, double tail_lane[4]) {
    alignas(32) double lane[4];
    _mm256_store_pd(lane, acc);
    lane[0] += tail_lane[0];
    lane[1] += tail_lane[1];
    lane[2] += tail_lane[2];
    lane[3] += tail_lane[3];
    return (lane[0] + lane[2]) + (lane[1] + lane[3]);
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        acc = _mm256_add_pd(acc, _mm256_mul_pd(_mm256_loadu_pd(a + i),
                                               _mm256_loadu_pd(b + i)));
    }
    double tail[4] = {0.0, 0.0, 0.0, 0.0};
    for (; i < n; ++i) tail[i & 3] += a[i] * b[i];
    return combine_lanes(acc, tail);
}

double sum_sq_diff_avx2(const double* a, const double* b, std::size_t n) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d d =
            _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
        acc = _mm256_add_pd(acc, _mm256_mul_pd(d, d));
    }
    double tail[4] = {0.0, 0.0, 0.0, 0.0};
    for (; i < n; ++i) {
        const double d = a[i] - b[i];
        tail[i & 3] += d * d;
    }
    return combine_lanes(acc, tail);
}

double max_abs_avx2(const double* x, std::size_t n) {
    const __m256d sign = _mm256_set1_pd(-0.0);
    __m256d m4 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        m4 = _mm256_max_pd(m4, _mm256_andnot_pd(sign, _mm256_loadu_pd(x + i)));
    }
    alignas(32) double lane[4];
    _mm256_store_pd(lane, m4);
    double m = lane[0];
    if (lane[1] > m) m = lane[1];
    if (lane[2] > m) m = lane[2];
    if (lane[3] > m) m = lane[3];
    for (; i < n; ++i) {
        const double v = std::fabs(x[i]);
        if (v > m) m = v;
    }
    return m;
}

void axpy_avx2(double a, const double* x, double* y, std::size_t n) {
    const __m256d av = _mm256_set1_pd(a);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d r = _mm256_add_pd(
            _mm256_loadu_pd(y + i), _mm256_mul_pd(av, _mm256_loadu_pd(x + i)));
        _mm256_storeu_pd(y + i, r);
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

void sub_avx2(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i),
                                                _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] - b[i];
}

void quantize_avx2(const double* x, std::size_t n, double scale, double step,
                   std::uint32_t max_code, std::uint32_t* code) {
    const __m256d sv = _mm256_set1_pd(scale);
    const __m256d stepv = _mm256_set1_pd(step);
    const __m256d zero = _mm256_setzero_pd();
    const __m256d maxv = _mm256_set1_pd(static_cast<double>(max_code));
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d c = _mm256_floor_pd(
            _mm256_div_pd(_mm256_add_pd(_mm256_loadu_pd(x + i), sv), stepv));
        c = _mm256_min_pd(_mm256_max_pd(c, zero), maxv);
        // codes fit in 16 bits, so truncating conversion through i32 is exact
        const __m128i c32 = _mm256_cvttpd_epi32(c);
        _mm_storeu_si128(reinterpret_cast<__m128i*>(code + i), c32);
    }
    const double maxc = static_cast<double>(max_code);
    for (; i < n; ++i) {
        double c = std::floor((x[i] + scale) / step);
        if (c < 0.0) c = 0.0;
        if (c > maxc) c = maxc;
        code[i] = static_cast<std::uint32_t>(c);
    }
}

void dequantize_avx2(const std::uint32_t* code, std::size_t n, double scale,
                     double step, double* x) {
    const __m256d sv = _mm256_set1_pd(scale);
    const __m256d stepv = _mm256_set1_pd(step);
    const __m256d half = _mm256_set1_pd(0.5);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m128i c32 =
            _mm_loadu_si128(reinterpret_cast<const __m128i*>(code + i));
        const __m256d c = _mm256_cvtepi32_pd(c32);
        _mm256_storeu_pd(
            x + i, _mm256_sub_pd(_mm256_mul_pd(_mm256_add_pd(c, half), stepv), sv));
    }
    for (; i < n; ++i) {
        x[i] = (static_cast<double>(code[i]) + 0.5) * step - scale;
    }
}

constexpr Ops kAvx2Ops = {
    dot_avx2,      sum_sq_diff_avx2, max_abs_avx2,    axpy_avx2,
    sub_avx2,      quantize_avx2,    dequantize_avx2, "avx2",
};

}  // namespace

const Ops* avx2_ops_ptr() { return &kAvx2Ops; }

#else

const Ops* avx2_ops_ptr() { return nullptr; }

#endif  // SEQKV_BUILD_AVX2

}  // namespace seqkv::kern
