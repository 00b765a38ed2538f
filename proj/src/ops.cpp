// Copyright 2026 The P4O Authors
// SPDX-License-Identifier: Apache-2.0

#include "p4o/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "p4o/kernels.hpp"

namespace p4o {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }
void detail::set_grad_enabled(bool enabled) { g_grad_enabled = enabled; }
NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace {

template <typename T>
void require_same_shape(const char* op, const DiffArray<T>& a, const DiffArray<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
}

template <typename T>
void require_rank(const char* op, const DiffArray<T>& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_string(a.shape()));
  }
}

// Elementwise unary op whose derivative is expressed through input and output.
template <typename T, typename F, typename D>
DiffArray<T> unary(const DiffArray<T>& a, F forward, D derivative) {
  std::vector<T> out(a.size());
  const T* x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(x[i]);
  return DiffArray<T>::from_op(a.shape(), std::move(out), {a}, [derivative](auto& n) {
    auto& in = n.parent(0);
    if (!in.requires_grad) return;
    T* g = in.grad_data();
    for (std::size_t i = 0; i < n.value.size(); ++i) {
      g[i] += n.grad[i] * derivative(in.value[i], n.value[i]);
    }
  });
}

}  // namespace

template <typename T>
DiffArray<T> add(const DiffArray<T>& a, const DiffArray<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> out(a.values().begin(), a.values().end());
  kernels::add_inplace(b.data(), out.data(), out.size());
  return DiffArray<T>::from_op(a.shape(), std::move(out), {a, b}, [](auto& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = n.parent(k);
      if (p.requires_grad) kernels::add_inplace(n.grad.data(), p.grad_data(), n.grad.size());
    }
  });
}

template <typename T>
DiffArray<T> sub(const DiffArray<T>& a, const DiffArray<T>& b) {
  require_same_shape("sub", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return DiffArray<T>::from_op(a.shape(), std::move(out), {a, b}, [](auto& n) {
    auto& pa = n.parent(0);
    auto& pb = n.parent(1);
    if (pa.requires_grad) kernels::add_inplace(n.grad.data(), pa.grad_data(), n.grad.size());
    if (pb.requires_grad) kernels::axpy(T{-1}, n.grad.data(), pb.grad_data(), n.grad.size());
  });
}

template <typename T>
DiffArray<T> mul(const DiffArray<T>& a, const DiffArray<T>& b) {
  require_same_shape("mul", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return DiffArray<T>::from_op(a.shape(), std::move(out), {a, b}, [](auto& n) {
    auto& pa = n.parent(0);
    auto& pb = n.parent(1);
    if (pa.requires_grad) {
      T* g = pa.grad_data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      T* g = pb.grad_data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
DiffArray<T> scale(const DiffArray<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return DiffArray<T>::from_op(a.shape(), std::move(out), {a}, [factor](auto& n) {
    auto& p = n.parent(0);
    if (p.requires_grad) kernels::axpy(factor, n.grad.data(), p.grad_data(), n.grad.size());
  });
}

template <typename T>
DiffArray<T> sigmoid(const DiffArray<T>& a) {
  return unary(
      a,
      [](T x) {
        if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
        const T e = std::exp(x);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
DiffArray<T> tanh(const DiffArray<T>& a) {
  return unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T{1} - y * y; });
}

template <typename T>
DiffArray<T> relu(const DiffArray<T>& a) {
  std::vector<T> out(a.size());
  kernels::relu(a.data(), out.data(), out.size());
  return DiffArray<T>::from_op(a.shape(), std::move(out), {a}, [](auto& n) {
    auto& p = n.parent(0);
    if (p.requires_grad) {
      kernels::relu_backward(p.value.data(), n.grad.data(), p.grad_data(), n.grad.size());
    }
  });
}

template <typename T>
DiffArray<T> exp(const DiffArray<T>& a) {
  return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

namespace {
template <typename T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}
}  // namespace

template <typename T>
DiffArray<T> lstm_cell(const DiffArray<T>& gates, const DiffArray<T>& cell) {
  require_rank("lstm_cell", gates, 2);
  require_rank("lstm_cell", cell, 2);
  const std::size_t B = cell.dim(0), n = cell.dim(1);
  if (gates.dim(0) != B || gates.dim(1) != 4 * n) {
    throw DimensionError("lstm_cell: gates " + shape_string(gates.shape()) + " do not match cell " +
                         shape_string(cell.shape()));
  }
  // act holds i, f, o, g after their nonlinearities, laid out like `gates`.
  std::vector<T> act(gates.size());
  std::vector<T> out(2 * B * n);
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = gates.data() + b * 4 * n;
    T* a = act.data() + b * 4 * n;
    for (std::size_t j = 0; j < 3 * n; ++j) a[j] = stable_sigmoid(z[j]);
    for (std::size_t j = 3 * n; j < 4 * n; ++j) a[j] = std::tanh(z[j]);
    for (std::size_t j = 0; j < n; ++j) {
      const T c = a[n + j] * cell.data()[b * n + j] + a[j] * a[3 * n + j];
      out[b * 2 * n + n + j] = c;
      out[b * 2 * n + j] = a[2 * n + j] * std::tanh(c);
    }
  }
  return DiffArray<T>::from_op({B, 2 * n}, std::move(out), {gates, cell},
                               [act = std::move(act), B, n](auto& node) {
    auto& pz = node.parent(0);
    auto& pc = node.parent(1);
    T* gz = pz.requires_grad ? pz.grad_data() : nullptr;
    T* gc = pc.requires_grad ? pc.grad_data() : nullptr;
    for (std::size_t b = 0; b < B; ++b) {
      const T* a = act.data() + b * 4 * n;
      const T* y = node.value.data() + b * 2 * n;
      const T* dy = node.grad.data() + b * 2 * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T i = a[j], f = a[n + j], o = a[2 * n + j], g = a[3 * n + j];
        const T tc = std::tanh(y[n + j]);
        const T dc = dy[n + j] + dy[j] * o * (T{1} - tc * tc);
        if (gz) {
          T* d = gz + b * 4 * n;
          d[j] += dc * g * i * (T{1} - i);
          d[n + j] += dc * pc.value[b * n + j] * f * (T{1} - f);
          d[2 * n + j] += dy[j] * tc * o * (T{1} - o);
          d[3 * n + j] += dc * i * (T{1} - g * g);
        }
        if (gc) gc[b * n + j] += dc * f;
      }
    }
  });
}

template <typename T>
DiffArray<T> linear(const DiffArray<T>& x, const DiffArray<T>& weight, const DiffArray<T>& bias) {
  require_rank("linear(x)", x, 2);
  require_rank("linear(W)", weight, 2);
  const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    throw DimensionError("linear: x " + shape_string(x.shape()) + " incompatible with W " +
                         shape_string(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " incompatible with W " +
                         shape_string(weight.shape()));
  }
  std::vector<T> out(batch * out_dim);
  const T* xv = x.data();
  const T* wv = weight.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t m = 0; m < out_dim; ++m) {
      T v = kernels::dot(xv + b * in, wv + m * in, in);
      out[b * out_dim + m] = bias.defined() ? v + bias.data()[m] : v;
    }
  }
  return DiffArray<T>::from_op(
      {batch, out_dim}, std::move(out), {x, weight, bias}, [batch, in, out_dim](auto& n) {
        auto& px = n.parent(0);
        auto& pw = n.parent(1);
        auto& pb = n.parent(2);
        const T* gy = n.grad.data();
        if (px.requires_grad) {
          T* gx = px.grad_data();
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t m = 0; m < out_dim; ++m) {
              const T g = gy[b * out_dim + m];
              if (g != T{0}) kernels::axpy(g, pw.value.data() + m * in, gx + b * in, in);
            }
          }
        }
        if (pw.requires_grad) {
          T* gw = pw.grad_data();
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t m = 0; m < out_dim; ++m) {
              const T g = gy[b * out_dim + m];
              if (g != T{0}) kernels::axpy(g, px.value.data() + b * in, gw + m * in, in);
            }
          }
        }
        if (pb.requires_grad) {
          T* gb = pb.grad_data();
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t m = 0; m < out_dim; ++m) gb[m] += gy[b * out_dim + m];
          }
        }
      });
}

namespace {

// Pixel rows of a [B,C,H,W] batch are processed in chunks so the unfolded
// patch matrix stays cache-resident.
constexpr std::size_t kConvChunkPixels = 1024;

struct ConvGeometry {
  std::size_t batch, channels, height, width, out_channels;
  std::size_t patch() const { return channels * 9; }
  std::size_t rows() const { return batch * height; }
};

// Offset of the source row feeding output row r through kernel row ky, or -1
// when it falls in the zero padding. Indexed [(r - row_begin) * 3 + ky].
inline std::vector<std::ptrdiff_t> source_rows(const ConvGeometry& g, std::size_t row_begin, std::size_t row_end) {
  std::vector<std::ptrdiff_t> src((row_end - row_begin) * 3);
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  for (std::size_t r = row_begin; r < row_end; ++r) {
    const auto b = static_cast<std::ptrdiff_t>(r / g.height), y = static_cast<std::ptrdiff_t>(r % g.height);
    for (std::ptrdiff_t ky = 0; ky < 3; ++ky) {
      const std::ptrdiff_t sy = y + ky - 1;
      src[(r - row_begin) * 3 + static_cast<std::size_t>(ky)] =
          (sy < 0 || sy >= H) ? -1 : (b * static_cast<std::ptrdiff_t>(g.channels) * H + sy) * static_cast<std::ptrdiff_t>(g.width);
    }
  }
  return src;
}

// cols[k][j] for k = (c, ky, kx) and pixel j of rows [row_begin, row_end).
template <typename T>
void unfold_rows(const ConvGeometry& g, const T* x, std::size_t row_begin, std::size_t row_end,
                 T* cols) {
  const std::size_t rows = row_end - row_begin;
  const std::size_t len = rows * g.width;
  const std::size_t W = g.width, plane = g.height * g.width;
  const auto src = source_rows(g, row_begin, row_end);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* xc = x + c * plane;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      T* d0 = cols + ((c * 3 + ky) * 3) * len;
      T* d1 = d0 + len;
      T* d2 = d1 + len;
      for (std::size_t i = 0; i < rows; ++i) {
        const std::ptrdiff_t off = src[i * 3 + ky];
        T* r0 = d0 + i * W;
        T* r1 = d1 + i * W;
        T* r2 = d2 + i * W;
        if (off < 0) {
          std::fill(r0, r0 + W, T{0});
          std::fill(r1, r1 + W, T{0});
          std::fill(r2, r2 + W, T{0});
          continue;
        }
        const T* s = xc + off;
        r0[0] = T{0};
        for (std::size_t j = 1; j < W; ++j) r0[j] = s[j - 1];
        for (std::size_t j = 0; j < W; ++j) r1[j] = s[j];
        for (std::size_t j = 0; j + 1 < W; ++j) r2[j] = s[j + 1];
        r2[W - 1] = T{0};
      }
    }
  }
}

// Inverse of unfold_rows: accumulates patch gradients into dx.
template <typename T>
void fold_rows(const ConvGeometry& g, const T* dcols, std::size_t row_begin, std::size_t row_end,
               T* dx) {
  const std::size_t rows = row_end - row_begin;
  const std::size_t len = rows * g.width;
  const std::size_t W = g.width, plane = g.height * g.width;
  const auto src = source_rows(g, row_begin, row_end);
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* xc = dx + c * plane;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      const T* d0 = dcols + ((c * 3 + ky) * 3) * len;
      const T* d1 = d0 + len;
      const T* d2 = d1 + len;
      for (std::size_t i = 0; i < rows; ++i) {
        const std::ptrdiff_t off = src[i * 3 + ky];
        if (off < 0) continue;
        T* s = xc + off;
        const T* r0 = d0 + i * W;
        const T* r1 = d1 + i * W;
        const T* r2 = d2 + i * W;
        for (std::size_t j = 1; j < W; ++j) s[j - 1] += r0[j];
        for (std::size_t j = 0; j < W; ++j) s[j] += r1[j];
        for (std::size_t j = 0; j + 1 < W; ++j) s[j + 1] += r2[j];
      }
    }
  }
}

}  // namespace

template <typename T>
DiffArray<T> conv2d(const DiffArray<T>& x, const DiffArray<T>& kernel, const DiffArray<T>& bias) {
  require_rank("conv2d(x)", x, 4);
  require_rank("conv2d(kernel)", kernel, 4);
  if (kernel.dim(2) != 3 || kernel.dim(3) != 3) {
    throw DimensionError("conv2d: only 3x3 kernels are supported, got " +
                         shape_string(kernel.shape()));
  }
  if (kernel.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d: input " + shape_string(x.shape()) +
                         " channel count does not match kernel " + shape_string(kernel.shape()));
  }
  const ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0)};
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.out_channels)) {
    throw DimensionError("conv2d: bias " + shape_string(bias.shape()) + " does not match kernel " +
                         shape_string(kernel.shape()));
  }
  const std::size_t HW = g.height * g.width;
  const std::size_t rows_per_chunk = std::max<std::size_t>(1, kConvChunkPixels / g.width);
  std::vector<T> out(g.batch * g.out_channels * HW);
  std::vector<T> cols(g.patch() * rows_per_chunk * g.width);
  std::vector<T> acc(g.out_channels * rows_per_chunk * g.width);
  const T* kv = kernel.data();
  for (std::size_t r0 = 0; r0 < g.rows(); r0 += rows_per_chunk) {
    const std::size_t r1 = std::min(g.rows(), r0 + rows_per_chunk);
    const std::size_t len = (r1 - r0) * g.width;
    unfold_rows(g, x.data(), r0, r1, cols.data());
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      T* a = acc.data() + o * len;
      std::fill(a, a + len, bias.defined() ? bias.data()[o] : T{0});
    }
    kernels::gemm_acc(g.out_channels, len, g.patch(), kv, cols.data(), acc.data());
    for (std::size_t r = r0; r < r1; ++r) {
      const std::size_t b = r / g.height, y = r % g.height;
      for (std::size_t o = 0; o < g.out_channels; ++o) {
        const T* src = acc.data() + o * len + (r - r0) * g.width;
        std::copy(src, src + g.width, out.data() + (b * g.out_channels + o) * HW + y * g.width);
      }
    }
  }
  return DiffArray<T>::from_op(
      {g.batch, g.out_channels, g.height, g.width}, std::move(out), {x, kernel, bias},
      [g, rows_per_chunk](auto& n) {
        auto& px = n.parent(0);
        auto& pk = n.parent(1);
        auto& pb = n.parent(2);
        const std::size_t HW = g.height * g.width;
        std::vector<T> cols(g.patch() * rows_per_chunk * g.width);
        std::vector<T> dout(g.out_channels * rows_per_chunk * g.width);
        std::vector<T> dcols(px.requires_grad ? cols.size() : 0);
        T* gk = pk.requires_grad ? pk.grad_data() : nullptr;
        T* gb = pb.requires_grad ? pb.grad_data() : nullptr;
        T* gx = px.requires_grad ? px.grad_data() : nullptr;
        std::vector<T> kernel_t(gx ? g.patch() * g.out_channels : 0);
        for (std::size_t o = 0; gx && o < g.out_channels; ++o) {
          for (std::size_t k = 0; k < g.patch(); ++k) kernel_t[k * g.out_channels + o] = pk.value[o * g.patch() + k];
        }
        for (std::size_t r0 = 0; r0 < g.rows(); r0 += rows_per_chunk) {
          const std::size_t r1 = std::min(g.rows(), r0 + rows_per_chunk);
          const std::size_t len = (r1 - r0) * g.width;
          for (std::size_t r = r0; r < r1; ++r) {
            const std::size_t b = r / g.height, y = r % g.height;
            for (std::size_t o = 0; o < g.out_channels; ++o) {
              const T* src = n.grad.data() + (b * g.out_channels + o) * HW + y * g.width;
              std::copy(src, src + g.width, dout.data() + o * len + (r - r0) * g.width);
            }
          }
          if (gb) {
            for (std::size_t o = 0; o < g.out_channels; ++o) {
              const T* d = dout.data() + o * len;
              gb[o] += std::accumulate(d, d + len, T{0});
            }
          }
          if (gk) {
            unfold_rows(g, px.value.data(), r0, r1, cols.data());
            for (std::size_t o = 0; o < g.out_channels; ++o) {
              for (std::size_t k = 0; k < g.patch(); ++k) {
                gk[o * g.patch() + k] +=
                    kernels::dot(dout.data() + o * len, cols.data() + k * len, len);
              }
            }
          }
          if (gx) {
            std::fill(dcols.begin(), dcols.begin() + g.patch() * len, T{0});
            kernels::gemm_acc(g.patch(), len, g.out_channels, kernel_t.data(), dout.data(), dcols.data());
            fold_rows(g, dcols.data(), r0, r1, gx);
          }
        }
      });
}

template <typename T>
DiffArray<T> maxpool2(const DiffArray<T>& x) {
  require_rank("maxpool2", x, 4);
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t OH = (H + 1) / 2, OW = (W + 1) / 2;
  std::vector<T> out(B * C * OH * OW);
  auto argmax_index = std::make_shared<std::vector<std::size_t>>(out.size());
  const T* xv = x.data();
  for (std::size_t plane = 0; plane < B * C; ++plane) {
    const std::size_t base = plane * H * W;
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        std::size_t best = base + (2 * oy) * W + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          const std::size_t y = 2 * oy + dy;
          if (y >= H) break;
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t xx = 2 * ox + dx;
            if (xx >= W) break;
            const std::size_t idx = base + y * W + xx;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        const std::size_t o = (plane * OH + oy) * OW + ox;
        out[o] = xv[best];
        (*argmax_index)[o] = best;
      }
    }
  }
  return DiffArray<T>::from_op({B, C, OH, OW}, std::move(out), {x}, [argmax_index](auto& n) {
    auto& p = n.parent(0);
    if (!p.requires_grad) return;
    T* g = p.grad_data();
    for (std::size_t o = 0; o < n.grad.size(); ++o) g[(*argmax_index)[o]] += n.grad[o];
  });
}

template <typename T>
DiffArray<T> reshape(const DiffArray<T>& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                         shape_string(shape));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  return DiffArray<T>::from_op(std::move(shape), std::move(out), {a}, [](auto& n) {
    auto& p = n.parent(0);
    if (p.requires_grad) kernels::add_inplace(n.grad.data(), p.grad_data(), n.grad.size());
  });
}

template <typename T>
DiffArray<T> concat_cols(const DiffArray<T>& a, const DiffArray<T>& b) {
  require_rank("concat_cols(a)", a, 2);
  require_rank("concat_cols(b)", b, 2);
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_cols: row counts differ: " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t rows = a.dim(0), na = a.dim(1), nb = b.dim(1);
  std::vector<T> out(rows * (na + nb));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data() + r * na, na, out.data() + r * (na + nb));
    std::copy_n(b.data() + r * nb, nb, out.data() + r * (na + nb) + na);
  }
  return DiffArray<T>::from_op({rows, na + nb}, std::move(out), {a, b}, [rows, na, nb](auto& n) {
    auto& pa = n.parent(0);
    auto& pb = n.parent(1);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* g = n.grad.data() + r * (na + nb);
      if (pa.requires_grad) kernels::add_inplace(g, pa.grad_data() + r * na, na);
      if (pb.requires_grad) kernels::add_inplace(g + na, pb.grad_data() + r * nb, nb);
    }
  });
}

template <typename T>
DiffArray<T> slice_cols(const DiffArray<T>& a, std::size_t begin, std::size_t count) {
  require_rank("slice_cols", a, 2);
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (begin + count > cols) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of range for " +
                         shape_string(a.shape()));
  }
  std::vector<T> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data() + r * cols + begin, count, out.data() + r * count);
  }
  return DiffArray<T>::from_op({rows, count}, std::move(out), {a},
                               [rows, cols, begin, count](auto& n) {
                                 auto& p = n.parent(0);
                                 if (!p.requires_grad) return;
                                 T* g = p.grad_data();
                                 for (std::size_t r = 0; r < rows; ++r) {
                                   kernels::add_inplace(n.grad.data() + r * count,
                                                        g + r * cols + begin, count);
                                 }
                               });
}

template <typename T>
DiffArray<T> slice_rows(const DiffArray<T>& a, std::size_t begin, std::size_t count) {
  if (a.rank() == 0 || begin + count > a.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of range for " +
                         shape_string(a.shape()));
  }
  const std::size_t stride = a.size() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = count;
  std::vector<T> out(a.data() + begin * stride, a.data() + (begin + count) * stride);
  return DiffArray<T>::from_op(std::move(shape), std::move(out), {a}, [begin, stride](auto& n) {
    auto& p = n.parent(0);
    if (p.requires_grad) {
      kernels::add_inplace(n.grad.data(), p.grad_data() + begin * stride, n.grad.size());
    }
  });
}

template <typename T>
DiffArray<T> concat_rows(std::span<const DiffArray<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Shape shape = parts[0].shape();
  if (shape.empty()) throw DimensionError("concat_rows: scalar inputs");
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
      throw DimensionError("concat_rows: " + shape_string(p.shape()) + " incompatible with " +
                           shape_string(shape));
    }
    rows += p.dim(0);
  }
  shape[0] = rows;
  std::vector<T> out;
  out.reserve(shape_size(shape));
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  std::vector<DiffArray<T>> parents(parts.begin(), parts.end());
  return DiffArray<T>::from_op(std::move(shape), std::move(out), parents, [offsets](auto& n) {
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      auto& p = n.parent(k);
      if (p.requires_grad) {
        kernels::add_inplace(n.grad.data() + offsets[k], p.grad_data(), p.value.size());
      }
    }
  });
}

template <typename T>
DiffArray<T> scale_rows(const DiffArray<T>& a, std::span<const T> factors) {
  if (a.rank() == 0 || factors.size() != a.dim(0)) {
    throw DimensionError("scale_rows: " + std::to_string(factors.size()) + " factors for " +
                         shape_string(a.shape()));
  }
  const std::size_t stride = a.size() / a.dim(0);
  std::vector<T> f(factors.begin(), factors.end());
  std::vector<T> out(a.size());
  for (std::size_t r = 0; r < f.size(); ++r) {
    for (std::size_t j = 0; j < stride; ++j) out[r * stride + j] = a.data()[r * stride + j] * f[r];
  }
  return DiffArray<T>::from_op(a.shape(), std::move(out), {a}, [f, stride](auto& n) {
    auto& p = n.parent(0);
    if (!p.requires_grad) return;
    T* g = p.grad_data();
    for (std::size_t r = 0; r < f.size(); ++r) {
      if (f[r] != T{0}) kernels::axpy(f[r], n.grad.data() + r * stride, g + r * stride, stride);
    }
  });
}

template <typename T>
DiffArray<T> sum(const DiffArray<T>& a) {
  T s = std::accumulate(a.values().begin(), a.values().end(), T{0});
  return DiffArray<T>::from_op({}, {s}, {a}, [](auto& n) {
    auto& p = n.parent(0);
    if (!p.requires_grad) return;
    T* g = p.grad_data();
    for (std::size_t i = 0; i < p.value.size(); ++i) g[i] += n.grad[0];
  });
}

template <typename T>
DiffArray<T> mean(const DiffArray<T>& a) {
  if (a.size() == 0) throw DimensionError("mean: empty array");
  const T inv = T{1} / static_cast<T>(a.size());
  T s = std::accumulate(a.values().begin(), a.values().end(), T{0});
  return DiffArray<T>::from_op({}, {s * inv}, {a}, [inv](auto& n) {
    auto& p = n.parent(0);
    if (!p.requires_grad) return;
    T* g = p.grad_data();
    for (std::size_t i = 0; i < p.value.size(); ++i) g[i] += n.grad[0] * inv;
  });
}

template <typename T>
DiffArray<T> mean_abs(const DiffArray<T>& a) {
  if (a.size() == 0) throw DimensionError("mean_abs: empty array");
  const T inv = T{1} / static_cast<T>(a.size());
  T s{0};
  for (T v : a.values()) s += std::abs(v);
  return DiffArray<T>::from_op({}, {s * inv}, {a}, [inv](auto& n) {
    auto& p = n.parent(0);
    if (!p.requires_grad) return;
    T* g = p.grad_data();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T v = p.value[i];
      g[i] += n.grad[0] * inv * (v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}));
    }
  });
}

template <typename T>
DiffArray<T> weighted_sum(std::span<const DiffArray<T>> terms, std::span<const T> coeffs) {
  if (terms.size() != coeffs.size()) {
    throw DimensionError("weighted_sum: " + std::to_string(terms.size()) + " terms, " +
                         std::to_string(coeffs.size()) + " coefficients");
  }
  T s{0};
  for (std::size_t i = 0; i < terms.size(); ++i) s += coeffs[i] * terms[i].item();
  std::vector<T> c(coeffs.begin(), coeffs.end());
  std::vector<DiffArray<T>> parents(terms.begin(), terms.end());
  return DiffArray<T>::from_op({}, {s}, parents, [c](auto& n) {
    for (std::size_t k = 0; k < c.size(); ++k) {
      auto& p = n.parent(k);
      if (p.requires_grad) p.grad_data()[0] += c[k] * n.grad[0];
    }
  });
}

template <typename T>
DiffArray<T> row_weighted_mse(const DiffArray<T>& a, const DiffArray<T>& b,
                              std::span<const T> row_weights) {
  require_same_shape("row_weighted_mse", a, b);
  if (a.rank() == 0 || row_weights.size() != a.dim(0)) {
    throw DimensionError("row_weighted_mse: " + std::to_string(row_weights.size()) +
                         " weights for " + shape_string(a.shape()));
  }
  const std::size_t rows = a.dim(0), feat = a.size() / rows;
  std::vector<T> w(row_weights.begin(), row_weights.end());
  const T total = std::accumulate(w.begin(), w.end(), T{0});
  const T inv = total > T{0} ? T{1} / (total * static_cast<T>(feat)) : T{0};
  T s{0};
  for (std::size_t r = 0; r < rows; ++r) {
    if (w[r] == T{0}) continue;
    T row{0};
    for (std::size_t f = 0; f < feat; ++f) {
      const T d = a.data()[r * feat + f] - b.data()[r * feat + f];
      row += d * d;
    }
    s += w[r] * row;
  }
  return DiffArray<T>::from_op({}, {s * inv}, {a, b}, [w, inv, feat](auto& n) {
    auto& pa = n.parent(0);
    auto& pb = n.parent(1);
    T* ga = pa.requires_grad ? pa.grad_data() : nullptr;
    T* gb = pb.requires_grad ? pb.grad_data() : nullptr;
    for (std::size_t r = 0; r < w.size(); ++r) {
      if (w[r] == T{0}) continue;
      const T k = T{2} * w[r] * inv * n.grad[0];
      for (std::size_t f = 0; f < feat; ++f) {
        const std::size_t i = r * feat + f;
        const T d = k * (pa.value[i] - pb.value[i]);
        if (ga) ga[i] += d;
        if (gb) gb[i] -= d;
      }
    }
  });
}

template <typename T>
DiffArray<T> mse(const DiffArray<T>& a, const DiffArray<T>& b) {
  require_same_shape("mse", a, b);
  if (a.rank() == 0) {
    const std::vector<T> one{T{1}};
    return row_weighted_mse(reshape(a, {1}), reshape(b, {1}), std::span<const T>(one));
  }
  const std::vector<T> ones(a.dim(0), T{1});
  return row_weighted_mse(a, b, std::span<const T>(ones));
}

template <typename T>
T log_sum_exp(std::span<const T> logits) {
  if (logits.empty()) throw DimensionError("log_sum_exp: empty input");
  const T m = *std::max_element(logits.begin(), logits.end());
  if (!std::isfinite(m)) return m;
  T s{0};
  for (T v : logits) s += std::exp(v - m);
  return m + std::log(s);
}

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  if (logits.empty()) throw DimensionError("softmax: empty input");
  const T m = *std::max_element(logits.begin(), logits.end());
  std::vector<T> p(logits.size());
  T s{0};
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    s += p[i];
  }
  for (T& v : p) v /= s;
  return p;
}

template <typename T>
T entropy(std::span<const T> probs) {
  T h{0};
  for (T p : probs) {
    if (p > T{0}) h -= p * std::log(p);
  }
  return h;
}

template <typename T>
DiffArray<T> log_softmax(const DiffArray<T>& logits) {
  require_rank("log_softmax", logits, 2);
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<T> out(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    std::span<const T> row(logits.data() + r * cols, cols);
    const T lse = log_sum_exp(row);
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = row[j] - lse;
  }
  return DiffArray<T>::from_op(logits.shape(), std::move(out), {logits}, [rows, cols](auto& n) {
    auto& p = n.parent(0);
    if (!p.requires_grad) return;
    T* g = p.grad_data();
    for (std::size_t r = 0; r < rows; ++r) {
      T gsum{0};
      for (std::size_t j = 0; j < cols; ++j) gsum += n.grad[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) {
        const std::size_t i = r * cols + j;
        g[i] += n.grad[i] - std::exp(n.value[i]) * gsum;
      }
    }
  });
}

template <typename T>
DiffArray<T> gather_cols(const DiffArray<T>& a, std::span<const int> index) {
  require_rank("gather_cols", a, 2);
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (index.size() != rows) {
    throw DimensionError("gather_cols: " + std::to_string(index.size()) + " indices for " +
                         shape_string(a.shape()));
  }
  std::vector<std::size_t> flat(rows);
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] < 0 || static_cast<std::size_t>(index[r]) >= cols) {
      throw DimensionError("gather_cols: index " + std::to_string(index[r]) + " out of range for " +
                           shape_string(a.shape()));
    }
    flat[r] = r * cols + static_cast<std::size_t>(index[r]);
    out[r] = a.data()[flat[r]];
  }
  return DiffArray<T>::from_op({rows}, std::move(out), {a}, [flat](auto& n) {
    auto& p = n.parent(0);
    if (!p.requires_grad) return;
    T* g = p.grad_data();
    for (std::size_t r = 0; r < flat.size(); ++r) g[flat[r]] += n.grad[r];
  });
}

template <typename T>
DiffArray<T> softmax_entropy(const DiffArray<T>& logits) {
  require_rank("softmax_entropy", logits, 2);
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  auto probs = std::make_shared<std::vector<T>>(logits.size());
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::span<const T> row(logits.data() + r * cols, cols);
    const T lse = log_sum_exp(row);
    T h{0};
    for (std::size_t j = 0; j < cols; ++j) {
      const T logp = row[j] - lse;
      const T p = std::exp(logp);
      (*probs)[r * cols + j] = p;
      h -= p * logp;
    }
    out[r] = h;
  }
  return DiffArray<T>::from_op({rows}, std::move(out), {logits}, [probs, rows, cols](auto& n) {
    auto& p = n.parent(0);
    if (!p.requires_grad) return;
    T* g = p.grad_data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T h = n.value[r];
      for (std::size_t j = 0; j < cols; ++j) {
        const std::size_t i = r * cols + j;
        const T pr = (*probs)[i];
        if (pr > T{0}) g[i] -= n.grad[r] * pr * (std::log(pr) + h);
      }
    }
  });
}

template <typename T>
int categorical_sample(std::span<const T> logits, Rng& rng) {
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) {
      throw NumericError("categorical_sample: logit " + std::to_string(i) + " is not finite");
    }
  }
  const std::vector<T> p = softmax(logits);
  const double u = rng.uniform();
  double cumulative = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    cumulative += static_cast<double>(p[i]);
    if (u < cumulative) return static_cast<int>(i);
  }
  // Rounding left the cumulative sum below u: take the last nonzero entry.
  for (std::size_t i = p.size(); i-- > 0;) {
    if (p[i] > T{0}) return static_cast<int>(i);
  }
  return static_cast<int>(p.size() - 1);
}

template <typename T>
int categorical_sample(const DiffArray<T>& logits, Rng& rng) {
  if (logits.rank() > 1 && !(logits.rank() == 2 && logits.dim(0) == 1)) {
    throw DimensionError("categorical_sample: expected one row of logits, got " +
                         shape_string(logits.shape()));
  }
  return categorical_sample(logits.values(), rng);
}

template <typename T>
int argmax(std::span<const T> values) {
  if (values.empty()) throw DimensionError("argmax: empty input");
  return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
}

#define P4O_INSTANTIATE_OPS(T)                                                                  \
  template DiffArray<T> add(const DiffArray<T>&, const DiffArray<T>&);                          \
  template DiffArray<T> sub(const DiffArray<T>&, const DiffArray<T>&);                          \
  template DiffArray<T> mul(const DiffArray<T>&, const DiffArray<T>&);                          \
  template DiffArray<T> scale(const DiffArray<T>&, T);                                          \
  template DiffArray<T> sigmoid(const DiffArray<T>&);                                           \
  template DiffArray<T> tanh(const DiffArray<T>&);                                              \
  template DiffArray<T> relu(const DiffArray<T>&);                                              \
  template DiffArray<T> exp(const DiffArray<T>&);                                               \
  template DiffArray<T> linear(const DiffArray<T>&, const DiffArray<T>&, const DiffArray<T>&);  \
  template DiffArray<T> conv2d(const DiffArray<T>&, const DiffArray<T>&, const DiffArray<T>&);  \
  template DiffArray<T> maxpool2(const DiffArray<T>&);                                          \
  template DiffArray<T> lstm_cell(const DiffArray<T>&, const DiffArray<T>&);                    \
  template DiffArray<T> reshape(const DiffArray<T>&, Shape);                                    \
  template DiffArray<T> concat_cols(const DiffArray<T>&, const DiffArray<T>&);                  \
  template DiffArray<T> slice_cols(const DiffArray<T>&, std::size_t, std::size_t);              \
  template DiffArray<T> slice_rows(const DiffArray<T>&, std::size_t, std::size_t);              \
  template DiffArray<T> concat_rows(std::span<const DiffArray<T>>);                             \
  template DiffArray<T> scale_rows(const DiffArray<T>&, std::span<const T>);                    \
  template DiffArray<T> sum(const DiffArray<T>&);                                               \
  template DiffArray<T> mean(const DiffArray<T>&);                                              \
  template DiffArray<T> mean_abs(const DiffArray<T>&);                                          \
  template DiffArray<T> weighted_sum(std::span<const DiffArray<T>>, std::span<const T>);        \
  template DiffArray<T> mse(const DiffArray<T>&, const DiffArray<T>&);                          \
  template DiffArray<T> row_weighted_mse(const DiffArray<T>&, const DiffArray<T>&,              \
                                         std::span<const T>);                                   \
  template DiffArray<T> log_softmax(const DiffArray<T>&);                                       \
  template DiffArray<T> gather_cols(const DiffArray<T>&, std::span<const int>);                 \
  template DiffArray<T> softmax_entropy(const DiffArray<T>&);                                   \
  template std::vector<T> softmax(std::span<const T>);                                          \
  template T log_sum_exp(std::span<const T>);                                                   \
  template T entropy(std::span<const T>);                                                       \
  template int categorical_sample(std::span<const T>, Rng&);                                    \
  template int categorical_sample(const DiffArray<T>&, Rng&);                                   \
  template int argmax(std::span<const T>);

P4O_INSTANTIATE_OPS(float)
P4O_INSTANTIATE_OPS(double)

#undef P4O_INSTANTIATE_OPS

}  // namespace p4o
