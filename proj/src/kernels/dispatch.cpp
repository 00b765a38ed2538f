// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <stdexcept>
#include <string>

#include "p4o/kernels.hpp"

namespace p4o::kernels {
namespace {

struct Table {
  float (*dot_f)(const float*, const float*, std::size_t);
  double (*dot_d)(const double*, const double*, std::size_t);
  void (*axpy_f)(float, const float*, float*, std::size_t);
  void (*axpy_d)(double, const double*, double*, std::size_t);
  void (*add_f)(const float*, float*, std::size_t);
  void (*add_d)(const double*, double*, std::size_t);
  void (*relu_f)(const float*, float*, std::size_t);
  void (*relu_d)(const double*, double*, std::size_t);
  void (*relu_bwd_f)(const float*, const float*, float*, std::size_t);
  void (*relu_bwd_d)(const double*, const double*, double*, std::size_t);
  void (*gemm_f)(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
  void (*gemm_d)(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);
};

constexpr Table kScalar{scalar::dot,         scalar::dot,  scalar::axpy,          scalar::axpy,
                        scalar::add_inplace, scalar::add_inplace, scalar::relu,   scalar::relu,
                        scalar::relu_backward, scalar::relu_backward, scalar::gemm_acc, scalar::gemm_acc};

#if defined(__x86_64__) || defined(_M_X64)
constexpr Table kAvx2{avx2::dot,         avx2::dot,  avx2::axpy,          avx2::axpy,
                      avx2::add_inplace, avx2::add_inplace, avx2::relu,   avx2::relu,
                      avx2::relu_backward, avx2::relu_backward, avx2::gemm_acc, avx2::gemm_acc};
#endif

Isa detect() {
  Isa isa = avx2_available() ? Isa::avx2 : Isa::scalar;
  if (const char* env = std::getenv("P4O_ISA")) {
    std::string want(env);
    if (want == "scalar") isa = Isa::scalar;
    else if (want == "avx2" && avx2_available()) isa = Isa::avx2;
  }
  return isa;
}

struct State {
  Isa isa;
  const Table* table;
};

const Table* table_for(Isa isa) {
#if defined(__x86_64__) || defined(_M_X64)
  if (isa == Isa::avx2) return &kAvx2;
#endif
  return &kScalar;
}

State& state() {
  static State s = [] {
    Isa isa = detect();
    return State{isa, table_for(isa)};
  }();
  return s;
}

}  // namespace

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

bool avx2_available() {
#if defined(__x86_64__) || defined(_M_X64)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa active_isa() { return state().isa; }

void force_isa(Isa isa) {
  if (isa == Isa::avx2 && !avx2_available()) {
    throw std::invalid_argument("force_isa: CPU does not support AVX2+FMA");
  }
  state() = State{isa, table_for(isa)};
}

float dot(const float* a, const float* b, std::size_t n) { return state().table->dot_f(a, b, n); }
double dot(const double* a, const double* b, std::size_t n) { return state().table->dot_d(a, b, n); }
void axpy(float alpha, const float* x, float* y, std::size_t n) { state().table->axpy_f(alpha, x, y, n); }
void axpy(double alpha, const double* x, double* y, std::size_t n) { state().table->axpy_d(alpha, x, y, n); }
void add_inplace(const float* x, float* y, std::size_t n) { state().table->add_f(x, y, n); }
void add_inplace(const double* x, double* y, std::size_t n) { state().table->add_d(x, y, n); }
void relu(const float* x, float* y, std::size_t n) { state().table->relu_f(x, y, n); }
void relu(const double* x, double* y, std::size_t n) { state().table->relu_d(x, y, n); }
void relu_backward(const float* x, const float* dy, float* dx, std::size_t n) {
  state().table->relu_bwd_f(x, dy, dx, n);
}
void relu_backward(const double* x, const double* dy, double* dx, std::size_t n) {
  state().table->relu_bwd_d(x, dy, dx, n);
}

void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
  state().table->gemm_f(m, n, k, a, b, c);
}
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  state().table->gemm_d(m, n, k, a, b, c);
}

}  // namespace p4o::kernels
