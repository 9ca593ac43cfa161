#include "cape/kernels.hpp"

namespace cape::kern {

namespace scalar {

double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void add(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void sub(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void scale(const double* a, double alpha, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = alpha * a[i];
}

}  // namespace scalar

bool avx2_available() {
#if defined(__x86_64__) || defined(_M_X64)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

namespace {

using DotFn = double (*)(const double*, const double*, std::size_t);
using AxpyFn = void (*)(double, const double*, double*, std::size_t);
using MapFn = void (*)(const double*, const double*, double*, std::size_t);
using ScaleFn = void (*)(const double*, double, double*, std::size_t);

struct Dispatch {
    DotFn dot;
    AxpyFn axpy;
    MapFn add, sub, mul;
    ScaleFn scale;
    Dispatch() {
        if (avx2_available()) {
            dot = avx2::dot; axpy = avx2::axpy;
            add = avx2::add; sub = avx2::sub; mul = avx2::mul;
            scale = avx2::scale;
        } else {
            dot = scalar::dot; axpy = scalar::axpy;
            add = scalar::add; sub = scalar::sub; mul = scalar::mul;
            scale = scalar::scale;
        }
    }
};

const Dispatch& disp() {
    static Dispatch d;
    return d;
}

}  // namespace

double dot(const double* a, const double* b, std::size_t n) { return disp().dot(a, b, n); }
void axpy(double alpha, const double* x, double* y, std::size_t n) { disp().axpy(alpha, x, y, n); }
void add(const double* a, const double* b, double* out, std::size_t n) { disp().add(a, b, out, n); }
void sub(const double* a, const double* b, double* out, std::size_t n) { disp().sub(a, b, out, n); }
void mul(const double* a, const double* b, double* out, std::size_t n) { disp().mul(a, b, out, n); }
void scale(const double* a, double alpha, double* out, std::size_t n) { disp().scale(a, alpha, out, n); }

void matmul_acc(const double* a, const double* b, double* c,
                std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av != 0.0) axpy(av, b + p * n, crow, n);
        }
    }
}

}  // namespace cape::kern
