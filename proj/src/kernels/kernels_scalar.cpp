// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#include "p4o/kernels.hpp"

namespace p4o::kernels::scalar {
namespace {

template <typename T>
T dot_impl(const T* a, const T* b, std::size_t n) {
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void axpy_impl(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void add_impl(const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += x[i];
}

template <typename T>
void relu_impl(const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
}

template <typename T>
void relu_backward_impl(const T* x, const T* dy, T* dx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i] > T{0}) dx[i] += dy[i];
  }
}

template <typename T>
void gemm_impl(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

}  // namespace

float dot(const float* a, const float* b, std::size_t n) { return dot_impl(a, b, n); }
double dot(const double* a, const double* b, std::size_t n) { return dot_impl(a, b, n); }
void axpy(float alpha, const float* x, float* y, std::size_t n) { axpy_impl(alpha, x, y, n); }
void axpy(double alpha, const double* x, double* y, std::size_t n) { axpy_impl(alpha, x, y, n); }
void add_inplace(const float* x, float* y, std::size_t n) { add_impl(x, y, n); }
void add_inplace(const double* x, double* y, std::size_t n) { add_impl(x, y, n); }
void relu(const float* x, float* y, std::size_t n) { relu_impl(x, y, n); }
void relu(const double* x, double* y, std::size_t n) { relu_impl(x, y, n); }
void relu_backward(const float* x, const float* dy, float* dx, std::size_t n) {
  relu_backward_impl(x, dy, dx, n);
}
void relu_backward(const double* x, const double* dy, double* dx, std::size_t n) {
  relu_backward_impl(x, dy, dx, n);
}

void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
  gemm_impl(m, n, k, a, b, c);
}
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  gemm_impl(m, n, k, a, b, c);
}

}  // namespace p4o::kernels::scalar
