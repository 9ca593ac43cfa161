#pragma once

#include <cstddef>

// Dense f64 inner loops. Scalar reference kernels live in kern::scalar,
// AVX2/FMA variants in kern::avx2 (separate TU compiled with -mavx2 -mfma).
// The top-level functions dispatch once at startup based on cpuid.

namespace cape::kern {

namespace scalar {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void add(const double* a, const double* b, double* out, std::size_t n);
void sub(const double* a, const double* b, double* out, std::size_t n);
void mul(const double* a, const double* b, double* out, std::size_t n);
void scale(const double* a, double alpha, double* out, std::size_t n);
}  // namespace scalar

namespace avx2 {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void add(const double* a, const double* b, double* out, std::size_t n);
void sub(const double* a, const double* b, double* out, std::size_t n);
void mul(const double* a, const double* b, double* out, std::size_t n);
void scale(const double* a, double alpha, double* out, std::size_t n);
}  // namespace avx2

bool avx2_available();

double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void add(const double* a, const double* b, double* out, std::size_t n);
void sub(const double* a, const double* b, double* out, std::size_t n);
void mul(const double* a, const double* b, double* out, std::size_t n);
void scale(const double* a, double alpha, double* out, std::size_t n);

// C[m x n] += A[m x k] * B[k x n], row-major. Inner loop is axpy over
// rows of B so it rides the dispatched kernels.
void matmul_acc(const double* a, const double* b, double* c,
                std::size_t m, std::size_t k, std::size_t n);

}  // namespace cape::kern
