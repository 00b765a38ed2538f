// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense inner-loop kernels. Every kernel has a scalar reference variant and an
// AVX2+FMA variant; the variant is chosen once at startup from CPUID and can be
// pinned with P4O_ISA=scalar|avx2 or force_isa().

#pragma once

#include <cstddef>
#include <string_view>

namespace p4o::kernels {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);

// True when the running CPU can execute the AVX2 variants.
bool avx2_available();

Isa active_isa();

// Pins the dispatch table. Throws std::invalid_argument when the CPU lacks the
// requested instruction set.
void force_isa(Isa isa);

// sum_i a[i] * b[i]
float dot(const float* a, const float* b, std::size_t n);
double dot(const double* a, const double* b, std::size_t n);

// y[i] += alpha * x[i]
void axpy(float alpha, const float* x, float* y, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);

// y[i] += x[i]
void add_inplace(const float* x, float* y, std::size_t n);
void add_inplace(const double* x, double* y, std::size_t n);

// y[i] = max(x[i], 0)
void relu(const float* x, float* y, std::size_t n);
void relu(const double* x, double* y, std::size_t n);

// dx[i] += x[i] > 0 ? dy[i] : 0
void relu_backward(const float* x, const float* dy, float* dx, std::size_t n);
void relu_backward(const double* x, const double* dy, double* dx, std::size_t n);

// C[m,n] += A[m,k] B[k,n], all row-major and densely packed.
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c);
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);

// Explicit variants, used by the equivalence tests and by the dispatcher.
namespace scalar {
float dot(const float* a, const float* b, std::size_t n);
double dot(const double* a, const double* b, std::size_t n);
void axpy(float alpha, const float* x, float* y, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void add_inplace(const float* x, float* y, std::size_t n);
void add_inplace(const double* x, double* y, std::size_t n);
void relu(const float* x, float* y, std::size_t n);
void relu(const double* x, double* y, std::size_t n);
void relu_backward(const float* x, const float* dy, float* dx, std::size_t n);
void relu_backward(const double* x, const double* dy, double* dx, std::size_t n);
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c);
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
}  // namespace scalar

namespace avx2 {
float dot(const float* a, const float* b, std::size_t n);
double dot(const double* a, const double* b, std::size_t n);
void axpy(float alpha, const float* x, float* y, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void add_inplace(const float* x, float* y, std::size_t n);
void add_inplace(const double* x, double* y, std::size_t n);
void relu(const float* x, float* y, std::size_t n);
void relu(const double* x, double* y, std::size_t n);
void relu_backward(const float* x, const float* dy, float* dx, std::size_t n);
void relu_backward(const double* x, const double* dy, double* dx, std::size_t n);
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c);
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
}  // namespace avx2

}  // namespace p4o::kernels
