// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations. Instantiated for float and double.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "p4o/diff_array.hpp"
#include "p4o/rng.hpp"

namespace p4o {

// Elementwise, identical shapes.
template <typename T> DiffArray<T> add(const DiffArray<T>& a, const DiffArray<T>& b);
template <typename T> DiffArray<T> sub(const DiffArray<T>& a, const DiffArray<T>& b);
template <typename T> DiffArray<T> mul(const DiffArray<T>& a, const DiffArray<T>& b);
template <typename T> DiffArray<T> scale(const DiffArray<T>& a, T factor);
template <typename T> DiffArray<T> sigmoid(const DiffArray<T>& a);
template <typename T> DiffArray<T> tanh(const DiffArray<T>& a);
template <typename T> DiffArray<T> relu(const DiffArray<T>& a);
template <typename T> DiffArray<T> exp(const DiffArray<T>& a);

// out[B,m] = x[B,n] W[m,n]^T + b[m]; `bias` may be undefined.
template <typename T>
DiffArray<T> linear(const DiffArray<T>& x, const DiffArray<T>& weight, const DiffArray<T>& bias);

// 3x3 cross-correlation, stride 1, zero padding 1.
// x[B,C,H,W], kernel[O,C,3,3], bias[O] (may be undefined) -> [B,O,H,W].
template <typename T>
DiffArray<T> conv2d(const DiffArray<T>& x, const DiffArray<T>& kernel, const DiffArray<T>& bias);

// 2x2 max pooling, stride 2, output [B,C,ceil(H/2),ceil(W/2)]. Windows that
// overhang the bottom/right edge only consider the in-range elements. Ties go
// to the first element in row-major scan order, which also receives the
// whole gradient.
template <typename T> DiffArray<T> maxpool2(const DiffArray<T>& x);

// Fused LSTM cell. gates[B,4n] are pre-activations ordered input, forget,
// output, candidate; cell[B,n]. Returns [B,2n] = (hidden | new cell).
template <typename T>
DiffArray<T> lstm_cell(const DiffArray<T>& gates, const DiffArray<T>& cell);

template <typename T> DiffArray<T> reshape(const DiffArray<T>& a, Shape shape);

// Column operations on [B,n] arrays.
template <typename T> DiffArray<T> concat_cols(const DiffArray<T>& a, const DiffArray<T>& b);
template <typename T>
DiffArray<T> slice_cols(const DiffArray<T>& a, std::size_t begin, std::size_t count);

// Row operations over the leading dimension of any rank.
template <typename T>
DiffArray<T> slice_rows(const DiffArray<T>& a, std::size_t begin, std::size_t count);
template <typename T> DiffArray<T> concat_rows(std::span<const DiffArray<T>> parts);
// out[r, ...] = a[r, ...] * factors[r]; factors are constants.
template <typename T> DiffArray<T> scale_rows(const DiffArray<T>& a, std::span<const T> factors);

// Reductions to a scalar (shape {}).
template <typename T> DiffArray<T> sum(const DiffArray<T>& a);
template <typename T> DiffArray<T> mean(const DiffArray<T>& a);
template <typename T> DiffArray<T> mean_abs(const DiffArray<T>& a);
// sum_i coeffs[i] * terms[i] over scalar terms.
template <typename T>
DiffArray<T> weighted_sum(std::span<const DiffArray<T>> terms, std::span<const T> coeffs);

// Mean of squared differences, optionally restricted to rows with nonzero
// weight: sum_r w_r sum_f (a-b)^2 / (sum_r w_r * F). Zero total weight gives 0.
template <typename T> DiffArray<T> mse(const DiffArray<T>& a, const DiffArray<T>& b);
template <typename T>
DiffArray<T> row_weighted_mse(const DiffArray<T>& a, const DiffArray<T>& b,
                              std::span<const T> row_weights);

// Row-wise on [B,A].
template <typename T> DiffArray<T> log_softmax(const DiffArray<T>& logits);
template <typename T>
DiffArray<T> gather_cols(const DiffArray<T>& a, std::span<const int> index);
// Shannon entropy (nats) of softmax(logits) per row -> [B].
template <typename T> DiffArray<T> softmax_entropy(const DiffArray<T>& logits);

// Graph-free helpers.
template <typename T> std::vector<T> softmax(std::span<const T> logits);
template <typename T> T log_sum_exp(std::span<const T> logits);
template <typename T> T entropy(std::span<const T> probs);

// Draws from softmax(logits). Throws NumericError on a non-finite logit.
template <typename T> int categorical_sample(std::span<const T> logits, Rng& rng);
template <typename T> int categorical_sample(const DiffArray<T>& logits, Rng& rng);
template <typename T> int argmax(std::span<const T> values);

}  // namespace p4o
