#include "seqkv/kernels.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <string>

#if defined(__aarch64__) || defined(__ARM_NEON)
#define SEQKV_HAVE_NEON 1
#include <arm_neon.h>
#else
#define SEQKV_HAVE_NEON 0
#endif

#if defined(__x86_64__) || defined(_M_X64)
#define SEQKV_X86 1
#else
#define SEQKV_X86 0
#endif

namespace seqkv::kern {

const Ops* avx2_ops_ptr();  // defined in kernels_avx2.cpp (nullptr off-x86)

// ---------------------------------------------------------------- scalar

namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
    double lane[4] = {0.0, 0.0, 0.0, 0.0};
    for (std::size_t i = 0; i < n; ++i) {
        lane[i & 3] += a[i] * b[i];
    }
    return (lane[0] + lane[2]) + (lane[1] + lane[3]);
}

double sum_sq_diff_scalar(const double* a, const double* b, std::size_t n) {
    double lane[4] = {0.0, 0.0, 0.0, 0.0};
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        lane[i & 3] += d * d;
    }
    return (lane[0] + lane[2]) + (lane[1] + lane[3]);
}

double max_abs_scalar(const double* x, std::size_t n) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = std::fabs(x[i]);
        if (v > m) m = v;
    }
    return m;
}

void axpy_scalar(double a, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void sub_scalar(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void quantize_scalar(const double* x, std::size_t n, double scale, double step,
                     std::uint32_t max_code, std::uint32_t* code) {
    const double maxc = static_cast<double>(max_code);
    for (std::size_t i = 0; i < n; ++i) {
        double c = std::floor((x[i] + scale) / step);
        if (c < 0.0) c = 0.0;
        if (c > maxc) c = maxc;
        code[i] = static_cast<std::uint32_t>(c);
    }
}

void dequantize_scalar(const std::uint32_t* code, std::size_t n, double scale,
                       double step, double* x) {
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = (static_cast<double>(code[i]) + 0.5) * step - scale;
    }
}

constexpr Ops kScalarOps = {
    dot_scalar,      sum_sq_diff_scalar, max_abs_scalar,    axpy_scalar,
    sub_scalar,      quantize_scalar,    dequantize_scalar, "scalar",
};

// ---------------------------------------------------------------- neon

#if SEQKV_HAVE_NEON

double dot_neon(const double* a, const double* b, std::size_t n) {
    float64x2_t acc01 = vdupq_n_f64(0.0);
    float64x2_t acc23 = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        acc01 = vaddq_f64(acc01, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
        acc23 = vaddq_f64(acc23, vmulq_f64(vld1q_f64(a + i + 2), vld1q_f64(b + i + 2)));
    }
    double lane[4] = {vgetq_lane_f64(acc01, 0), vgetq_lane_f64(acc01, 1),
                      vgetq_lane_f64(acc23, 0), vgetq_lane_f64(acc23, 1)};
    for (; i < n; ++i) lane[i & 3] += a[i] * b[i];
    return (lane[0] + lane[2]) + (lane[1] + lane[3]);
}

double sum_sq_diff_neon(const double* a, const double* b, std::size_t n) {
    float64x2_t acc01 = vdupq_n_f64(0.0);
    float64x2_t acc23 = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        float64x2_t d0 = vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i));
        float64x2_t d1 = vsubq_f64(vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
        acc01 = vaddq_f64(acc01, vmulq_f64(d0, d0));
        acc23 = vaddq_f64(acc23, vmulq_f64(d1, d1));
    }
    double lane[4] = {vgetq_lane_f64(acc01, 0), vgetq_lane_f64(acc01, 1),
                      vgetq_lane_f64(acc23, 0), vgetq_lane_f64(acc23, 1)};
    for (; i < n; ++i) {
        const double d = a[i] - b[i];
        lane[i & 3] += d * d;
    }
    return (lane[0] + lane[2]) + (lane[1] + lane[3]);
}

double max_abs_neon(const double* x, std::size_t n) {
    float64x2_t m2 = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) m2 = vmaxq_f64(m2, vabsq_f64(vld1q_f64(x + i)));
    double m = vgetq_lane_f64(m2, 0);
    const double m1 = vgetq_lane_f64(m2, 1);
    if (m1 > m) m = m1;
    for (; i < n; ++i) {
        const double v = std::fabs(x[i]);
        if (v > m) m = v;
    }
    return m;
}

void axpy_neon(double a, const double* x, double* y, std::size_t n) {
    const float64x2_t av = vdupq_n_f64(a);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        vst1q_f64(y + i, vaddq_f64(vld1q_f64(y + i), vmulq_f64(av, vld1q_f64(x + i))));
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

void sub_neon(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        vst1q_f64(out + i, vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] - b[i];
}

void quantize_neon(const double* x, std::size_t n, double scale, double step,
                   std::uint32_t max_code, std::uint32_t* code) {
    const float64x2_t sv = vdupq_n_f64(scale);
    const float64x2_t stepv = vdupq_n_f64(step);
    const float64x2_t zero = vdupq_n_f64(0.0);
    const float64x2_t maxv = vdupq_n_f64(static_cast<double>(max_code));
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        float64x2_t c = vrndmq_f64(vdivq_f64(vaddq_f64(vld1q_f64(x + i), sv), stepv));
        c = vminq_f64(vmaxq_f64(c, zero), maxv);
        const uint64x2_t u = vcvtq_u64_f64(c);
        code[i] = static_cast<std::uint32_t>(vgetq_lane_u64(u, 0));
        code[i + 1] = static_cast<std::uint32_t>(vgetq_lane_u64(u, 1));
    }
    const double maxc = static_cast<double>(max_code);
    for (; i < n; ++i) {
        double c = std::floor((x[i] + scale) / step);
        if (c < 0.0) c = 0.0;
        if (c > maxc) c = maxc;
        code[i] = static_cast<std::uint32_t>(c);
    }
}

void dequantize_neon(const std::uint32_t* code, std::size_t n, double scale,
                     double step, double* x) {
    const float64x2_t sv = vdupq_n_f64(scale);
    const float64x2_t stepv = vdupq_n_f64(step);
    const float64x2_t half = vdupq_n_f64(0.5);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        const uint64x2_t u = {static_cast<std::uint64_t>(code[i]),
                              static_cast<std::uint64_t>(code[i + 1])};
        float64x2_t c = vcvtq_f64_u64(u);
        vst1q_f64(x + i, vsubq_f64(vmulq_f64(vaddq_f64(c, half), stepv), sv));
    }
    for (; i < n; ++i) {
        x[i] = (static_cast<double>(code[i]) + 0.5) * step - scale;
    }
}

constexpr Ops kNeonOps = {
    dot_neon,      sum_sq_diff_neon, max_abs_neon,    axpy_neon,
    sub_neon,      quantize_neon,    dequantize_neon, "neon",
};

#endif  // SEQKV_HAVE_NEON

// ---------------------------------------------------------------- dispatch

#if SEQKV_X86
bool cpu_has_avx2() { return __builtin_cpu_supports("avx2") != 0; }
#else
bool cpu_has_avx2() { return false; }
#endif

std::atomic<const Ops*> g_ops{nullptr};

const Ops* pick(Backend b) {
    switch (b) {
        case Backend::scalar:
            return &kScalarOps;
        case Backend::avx2:
            if (!backend_available(Backend::avx2))
                throw std::runtime_error("avx2 kernels not available on this cpu");
            return avx2_ops_ptr();
        case Backend::neon:
#if SEQKV_HAVE_NEON
            return &kNeonOps;
#else
            throw std::runtime_error("neon kernels not available on this cpu");
#endif
        case Backend::auto_detect:
        default:
            break;
    }
#if SEQKV_HAVE_NEON
    return &kNeonOps;
#else
    if (cpu_has_avx2()) return avx2_ops_ptr();
    return &kScalarOps;
#endif
}

Backend backend_from_env() {
    const char* env = std::getenv("SEQKV_KERNEL");
    if (env == nullptr) return Backend::auto_detect;
    const std::string v(env);
    if (v == "scalar") return Backend::scalar;
    if (v == "avx2") return Backend::avx2;
    if (v == "neon") return Backend::neon;
    throw std::runtime_error("unknown SEQKV_KERNEL value: " + v);
}

}  // namespace

bool backend_available(Backend b) {
    switch (b) {
        case Backend::scalar:
        case Backend::auto_detect:
            return true;
        case Backend::avx2:
            return cpu_has_avx2() && avx2_ops_ptr() != nullptr;
        case Backend::neon:
            return SEQKV_HAVE_NEON != 0;
    }
    return false;
}

const Ops& ops() {
    const Ops* p = g_ops.load(std::memory_order_acquire);
    if (p == nullptr) {
        p = pick(backend_from_env());
        g_ops.store(p, std::memory_order_release);
    }
    return *p;
}

void force_backend(Backend b) { g_ops.store(pick(b), std::memory_order_release); }

Backend active_backend() {
    const Ops& o = ops();
    const std::string_view name = o.name;
    if (name == "avx2") return Backend::avx2;
    if (name == "neon") return Backend::neon;
    return Backend::scalar;
}

const Ops& scalar_ops() { return kScalarOps; }

}  // namespace seqkv::kern
