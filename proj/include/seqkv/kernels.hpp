#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace seqkv::kern {

// Double-precision inner loops shared by the model forward pass, the
// predictor and the quantizer. Every backend must produce bit-identical
// results to the scalar reference:
//
//  * elementwise kernels (axpy, sub, quantize, dequantize) perform the same
//    IEEE operation per element, so any chunking is equivalent;
//  * reductions (dot, sum_sq_diff) accumulate element i into lane i % 4 and
//    combine lanes as (l0 + l2) + (l1 + l3). The scalar reference implements
//    the same four-lane scheme, so an AVX2 register or a pair of NEON
//    registers reproduces it exactly;
//  * no backend may use fused multiply-add (the build sets -ffp-contract=off).
struct Ops {
    double (*dot)(const double* a, const double* b, std::size_t n);
    double (*sum_sq_diff)(const double* a, const double* b, std::size_t n);
    double (*max_abs)(const double* x, std::size_t n);
    // y[i] += a * x[i]
    void (*axpy)(double a, const double* x, double* y, std::size_t n);
    // out[i] = a[i] - b[i]
    void (*sub)(const double* a, const double* b, double* out, std::size_t n);
    // code[i] = clamp(floor((x[i] + scale) / step), 0, max_code)
    void (*quantize_midrise)(const double* x, std::size_t n, double scale,
                             double step, std::uint32_t max_code,
                             std::uint32_t* code);
    // x[i] = (code[i] + 0.5) * step - scale
    void (*dequantize_midrise)(const std::uint32_t* code, std::size_t n,
                               double scale, double step, double* x);
    const char* name;
};

enum class Backend { auto_detect, scalar, avx2, neon };

// Selected once on first use; SEQKV_KERNEL=scalar|avx2|neon overrides.
const Ops& ops();
void force_backend(Backend b);
Backend active_backend();
bool backend_available(Backend b);

const Ops& scalar_ops();  // always available, the reference implementation

inline double dot(const double* a, const double* b, std::size_t n) {
    return ops().dot(a, b, n);
}
inline double sum_sq_diff(const double* a, const double* b, std::size_t n) {
    return ops().sum_sq_diff(a, b, n);
}
inline double max_abs(const double* x, std::size_t n) { return ops().max_abs(x, n); }
inline void axpy(double a, const double* x, double* y, std::size_t n) {
    ops().axpy(a, x, y, n);
}
inline void sub(const double* a, const double* b, double* out, std::size_t n) {
    ops().sub(a, b, out, n);
}

}  // namespace seqkv::kern
