/*
 * Copyright (c) 2026 The trunet3d Authors. All Rights Reserved
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "trunet/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "trunet/error.hpp"

namespace trunet::ops {

using detail::TensorImpl;

namespace {

void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, float alpha, const float* a,
          const float* b, float beta, float* c) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(trans_a ? m : k), b, static_cast<int>(trans_b ? k : n), beta, c,
              static_cast<int>(n));
}

void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, double alpha, const double* a,
          const double* b, double beta, double* c) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(trans_a ? m : k), b, static_cast<int>(trans_b ? k : n), beta, c,
              static_cast<int>(n));
}

int64_t normalize_axis(int64_t axis, int64_t rank) {
  const int64_t a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ConfigError("axis " + std::to_string(axis) + " out of range");
  return a;
}

int64_t product(const Shape& s, size_t begin, size_t end) {
  int64_t p = 1;
  for (size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

template <typename T>
void require_rank(const BasicTensor<T>& t, int64_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ConfigError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " +
                      shape_to_string(t.shape()));
  }
}

template <typename T>
std::vector<T> copy_values(const BasicTensor<T>& t) {
  return std::vector<T>(t.data().begin(), t.data().end());
}

struct ConvGeometry {
  int64_t channels, d, h, w;  // input
  int64_t od, oh, ow;         // output
  int k, stride, padding;
  int64_t out_plane() const { return od * oh * ow; }
  int64_t in_plane() const { return d * h * w; }
  int64_t col_rows() const { return channels * k * k * k; }
};

// Valid output range [lo, hi) along the fastest axis for kernel tap `kw`.
inline void valid_span(const ConvGeometry& g, int kw, int64_t& lo, int64_t& hi) {
  // ix = x * stride - padding + kw must land in [0, w)
  const int64_t off = kw - g.padding;
  lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  hi = (g.w - 1 - off) < 0 ? 0 : (g.w - 1 - off) / g.stride + 1;
  hi = std::min(hi, g.ow);
  lo = std::min(lo, hi);
}

// Unfolds one sample [C, D, H, W] into [C*k^3, od*oh*ow].
template <typename T>
void im2col(const ConvGeometry& g, const T* in, T* col) {
  const int k = g.k;
  int64_t row = 0;
  for (int64_t c = 0; c < g.channels; ++c) {
    const T* plane = in + c * g.in_plane();
    for (int kd = 0; kd < k; ++kd) {
      for (int kh = 0; kh < k; ++kh) {
        for (int kw = 0; kw < k; ++kw, ++row) {
          int64_t lo, hi;
          valid_span(g, kw, lo, hi);
          const int64_t off = kw - g.padding;
          T* dst = col + row * g.out_plane();
          for (int64_t z = 0; z < g.od; ++z) {
            const int64_t iz = z * g.stride - g.padding + kd;
            for (int64_t y = 0; y < g.oh; ++y) {
              const int64_t iy = y * g.stride - g.padding + kh;
              T* out_row = dst + (z * g.oh + y) * g.ow;
              if (iz < 0 || iz >= g.d || iy < 0 || iy >= g.h) {
                std::fill(out_row, out_row + g.ow, T(0));
                continue;
              }
              const T* src_row = plane + (iz * g.h + iy) * g.w + off;
              std::fill(out_row, out_row + lo, T(0));
              if (g.stride == 1) {
                std::copy(src_row + lo, src_row + hi, out_row + lo);
              } else {
                for (int64_t x = lo; x < hi; ++x) out_row[x] = src_row[x * g.stride];
              }
              std::fill(out_row + hi, out_row + g.ow, T(0));
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into [C, D, H, W].
template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* in) {
  const int k = g.k;
  int64_t row = 0;
  for (int64_t c = 0; c < g.channels; ++c) {
    T* plane = in + c * g.in_plane();
    for (int kd = 0; kd < k; ++kd) {
      for (int kh = 0; kh < k; ++kh) {
        for (int kw = 0; kw < k; ++kw, ++row) {
          int64_t lo, hi;
          valid_span(g, kw, lo, hi);
          const int64_t off = kw - g.padding;
          const T* src = col + row * g.out_plane();
          for (int64_t z = 0; z < g.od; ++z) {
            const int64_t iz = z * g.stride - g.padding + kd;
            if (iz < 0 || iz >= g.d) continue;
            for (int64_t y = 0; y < g.oh; ++y) {
              const int64_t iy = y * g.stride - g.padding + kh;
              if (iy < 0 || iy >= g.h) continue;
              const T* col_row = src + (z * g.oh + y) * g.ow;
              T* dst_row = plane + (iz * g.h + iy) * g.w + off;
              if (g.stride == 1) {
                for (int64_t x = lo; x < hi; ++x) dst_row[x] += col_row[x];
              } else {
                for (int64_t x = lo; x < hi; ++x) dst_row[x * g.stride] += col_row[x];
              }
            }
          }
        }
      }
    }
  }
}

// Per-axis sampling table for align-corners-false linear interpolation.
struct LinearTap {
  int64_t lo, hi;
  double frac;
};

std::vector<LinearTap> linear_taps(int64_t in_extent, int64_t out_extent) {
  std::vector<LinearTap> taps(static_cast<size_t>(out_extent));
  const double ratio = static_cast<double>(in_extent) / static_cast<double>(out_extent);
  for (int64_t o = 0; o < out_extent; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<int64_t>(std::floor(src));
    if (lo > in_extent - 1) lo = in_extent - 1;
    const int64_t hi = std::min(lo + 1, in_extent - 1);
    taps[static_cast<size_t>(o)] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

// Grow-only per-thread buffer for unfolded columns; avoids faulting in fresh
// pages for every convolution.
template <typename T>
T* scratch(size_t count, int slot) {
  thread_local std::vector<T> buffers[2];
  auto& buf = buffers[slot];
  if (buf.size() < count) buf.resize(count);
  return buf.data();
}

}  // namespace

int64_t conv_output_extent(int64_t extent, int kernel, int stride, int padding) {
  if (kernel < 1 || stride < 1 || padding < 0) {
    throw ConfigError("invalid window: kernel " + std::to_string(kernel) + ", stride " +
                      std::to_string(stride) + ", padding " + std::to_string(padding));
  }
  const int64_t span = extent + 2 * padding - kernel;
  if (span < 0) {
    throw ConfigError("window of " + std::to_string(kernel) + " does not fit extent " +
                      std::to_string(extent) + " with padding " + std::to_string(padding));
  }
  return span / stride + 1;
}

// ---------------------------------------------------------------------------
// conv3d

template <typename T>
BasicTensor<T> conv3d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias,
                      int stride, int padding) {
  require_rank(input, 5, "conv3d input");
  require_rank(kernel, 5, "conv3d kernel");
  const int64_t n = input.dim(0);
  const int64_t cin = input.dim(1);
  const int64_t cout = kernel.dim(0);
  const auto k = static_cast<int>(kernel.dim(2));
  if (kernel.dim(1) != cin) {
    throw ConfigError("conv3d: input has " + std::to_string(cin) + " channels, kernel expects " +
                      std::to_string(kernel.dim(1)));
  }
  if (kernel.dim(3) != k || kernel.dim(4) != k || k % 2 == 0) {
    throw ConfigError("conv3d: kernel must be cubic with odd extent, got " + shape_to_string(kernel.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ConfigError("conv3d: bias shape " + shape_to_string(bias.shape()) + " does not match " +
                      std::to_string(cout) + " output channels");
  }
  ConvGeometry g{cin,
                 input.dim(2),
                 input.dim(3),
                 input.dim(4),
                 conv_output_extent(input.dim(2), k, stride, padding),
                 conv_output_extent(input.dim(3), k, stride, padding),
                 conv_output_extent(input.dim(4), k, stride, padding),
                 k,
                 stride,
                 padding};
  const bool direct = (k == 1 && stride == 1 && padding == 0);
  const int64_t plane = g.out_plane();
  const int64_t rows = g.col_rows();

  std::vector<T> out(static_cast<size_t>(n * cout * plane));
  T* col = direct ? nullptr : scratch<T>(static_cast<size_t>(rows * plane), 0);
  const T* x = input.data().data();
  const T* w = kernel.data().data();
  for (int64_t s = 0; s < n; ++s) {
    const T* sample = x + s * cin * g.in_plane();
    const T* cols = sample;
    if (!direct) {
      im2col(g, sample, col);
      cols = col;
    }
    T* dst = out.data() + s * cout * plane;
    gemm(false, false, cout, plane, rows, T(1), w, cols, T(0), dst);
    if (bias.defined()) {
      const T* b = bias.data().data();
      for (int64_t c = 0; c < cout; ++c) {
        T* row = dst + c * plane;
        for (int64_t i = 0; i < plane; ++i) row[i] += b[c];
      }
    }
  }

  auto xi = input.impl();
  auto wi = kernel.impl();
  auto bi = bias.impl();
  return detail::make_result<T>(
      "conv3d", Shape{n, cout, g.od, g.oh, g.ow}, std::move(out), {&input, &kernel, &bias},
      [xi, wi, bi, g, n, cout, direct](const TensorImpl<T>& res) {
        const int64_t plane = g.out_plane();
        const int64_t rows = g.col_rows();
        const T* gout = res.grad.data();
        T* col = direct ? nullptr : scratch<T>(static_cast<size_t>(rows * plane), 0);
        T* gcol = direct ? nullptr : scratch<T>(static_cast<size_t>(rows * plane), 1);
        for (int64_t s = 0; s < n; ++s) {
          const T* go = gout + s * cout * plane;
          const T* sample = xi->data.data() + s * g.channels * g.in_plane();
          if (wi->requires_grad) {
            const T* cols = sample;
            if (!direct) {
              im2col(g, sample, col);
              cols = col;
            }
            gemm(false, true, cout, rows, plane, T(1), go, cols, T(1), wi->ensure_grad().data());
          }
          if (bi && bi->requires_grad) {
            auto& gb = bi->ensure_grad();
            for (int64_t c = 0; c < cout; ++c) {
              T acc = 0;
              for (int64_t i = 0; i < plane; ++i) acc += go[c * plane + i];
              gb[static_cast<size_t>(c)] += acc;
            }
          }
          if (xi->requires_grad) {
            T* gx = xi->ensure_grad().data() + s * g.channels * g.in_plane();
            if (direct) {
              gemm(true, false, rows, plane, cout, T(1), wi->data.data(), go, T(1), gx);
            } else {
              gemm(true, false, rows, plane, cout, T(1), wi->data.data(), go, T(0), gcol);
              col2im(g, gcol, gx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// trilinear_upsample

template <typename T>
BasicTensor<T> trilinear_upsample(const BasicTensor<T>& input, int factor) {
  require_rank(input, 5, "trilinear_upsample");
  if (factor < 1) throw ConfigError("trilinear_upsample: factor must be >= 1");
  if (factor == 1) {
    return detail::make_result<T>("upsample", input.shape(), copy_values(input), {&input},
                                  [xi = input.impl()](const TensorImpl<T>& res) {
                                    auto& gx = xi->ensure_grad();
                                    for (size_t i = 0; i < gx.size(); ++i) gx[i] += res.grad[i];
                                  });
  }
  const int64_t nc = input.dim(0) * input.dim(1);
  const int64_t d = input.dim(2), h = input.dim(3), w = input.dim(4);
  const int64_t od = d * factor, oh = h * factor, ow = w * factor;
  const auto tz = linear_taps(d, od);
  const auto ty = linear_taps(h, oh);
  const auto tx = linear_taps(w, ow);

  auto for_each_tap = [=](auto&& visit) {
    for (int64_t c = 0; c < nc; ++c) {
      const int64_t in_base = c * d * h * w;
      int64_t o = c * od * oh * ow;
      for (int64_t z = 0; z < od; ++z) {
        const auto& a = tz[static_cast<size_t>(z)];
        for (int64_t y = 0; y < oh; ++y) {
          const auto& b = ty[static_cast<size_t>(y)];
          for (int64_t x = 0; x < ow; ++x, ++o) {
            const auto& e = tx[static_cast<size_t>(x)];
            const int64_t zs[2] = {a.lo, a.hi};
            const int64_t ys[2] = {b.lo, b.hi};
            const int64_t xs[2] = {e.lo, e.hi};
            const double wz[2] = {1 - a.frac, a.frac};
            const double wy[2] = {1 - b.frac, b.frac};
            const double wx[2] = {1 - e.frac, e.frac};
            for (int i = 0; i < 2; ++i)
              for (int j = 0; j < 2; ++j)
                for (int l = 0; l < 2; ++l)
                  visit(o, in_base + (zs[i] * h + ys[j]) * w + xs[l], static_cast<T>(wz[i] * wy[j] * wx[l]));
          }
        }
      }
    }
  };

  std::vector<T> out(static_cast<size_t>(nc * od * oh * ow), T(0));
  const T* src = input.data().data();
  for_each_tap([&](int64_t o, int64_t i, T wgt) { out[static_cast<size_t>(o)] += wgt * src[i]; });

  Shape shape{input.dim(0), input.dim(1), od, oh, ow};
  return detail::make_result<T>("upsample", shape, std::move(out), {&input},
                                [xi = input.impl(), for_each_tap](const TensorImpl<T>& res) {
                                  auto& gx = xi->ensure_grad();
                                  for_each_tap([&](int64_t o, int64_t i, T wgt) {
                                    gx[static_cast<size_t>(i)] += wgt * res.grad[static_cast<size_t>(o)];
                                  });
                                });
}

// ---------------------------------------------------------------------------
// matmul / linear

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ConfigError("matmul operands need rank >= 2");
  const int64_t m = a.dim(-2), k = a.dim(-1), p = b.dim(-1);
  if (b.dim(-2) != k) {
    throw ConfigError("matmul inner extents differ: " + shape_to_string(a.shape()) + " x " +
                      shape_to_string(b.shape()));
  }
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const bool shared_b = bs.size() == 2;
  if (!shared_b && (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin()))) {
    throw ConfigError("matmul batch extents differ: " + shape_to_string(as) + " x " + shape_to_string(bs));
  }
  const int64_t batch = product(as, 0, as.size() - 2);
  Shape shape(as.begin(), as.end() - 2);
  shape.push_back(m);
  shape.push_back(p);
  std::vector<T> out(static_cast<size_t>(batch * m * p));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (int64_t i = 0; i < batch; ++i) {
    gemm(false, false, m, p, k, T(1), ad + i * m * k, bd + (shared_b ? 0 : i * k * p), T(0),
         out.data() + i * m * p);
  }
  return detail::make_result<T>(
      "matmul", shape, std::move(out), {&a, &b},
      [ai = a.impl(), bi = b.impl(), batch, m, k, p, shared_b](const TensorImpl<T>& res) {
        for (int64_t i = 0; i < batch; ++i) {
          const T* g = res.grad.data() + i * m * p;
          const T* bmat = bi->data.data() + (shared_b ? 0 : i * k * p);
          if (ai->requires_grad) gemm(false, true, m, k, p, T(1), g, bmat, T(1), ai->ensure_grad().data() + i * m * k);
          if (bi->requires_grad) {
            gemm(true, false, k, p, m, T(1), ai->data.data() + i * m * k, g, T(1),
                 bi->ensure_grad().data() + (shared_b ? 0 : i * k * p));
          }
        }
      });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  require_rank(weight, 2, "linear weight");
  const int64_t in = weight.dim(0), out_dim = weight.dim(1);
  if (x.dim(-1) != in) {
    throw ConfigError("linear: input width " + std::to_string(x.dim(-1)) + " != weight rows " + std::to_string(in));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) throw ConfigError("linear: bias shape mismatch");
  const int64_t rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = out_dim;
  std::vector<T> out(static_cast<size_t>(rows * out_dim));
  if (bias.defined()) {
    for (int64_t r = 0; r < rows; ++r) std::copy(bias.data().begin(), bias.data().end(), out.begin() + r * out_dim);
  }
  gemm(false, false, rows, out_dim, in, T(1), x.data().data(), weight.data().data(), bias.defined() ? T(1) : T(0),
       out.data());
  return detail::make_result<T>(
      "linear", shape, std::move(out), {&x, &weight, &bias},
      [xi = x.impl(), wi = weight.impl(), bi = bias.impl(), rows, in, out_dim](const TensorImpl<T>& res) {
        const T* g = res.grad.data();
        if (xi->requires_grad) gemm(false, true, rows, in, out_dim, T(1), g, wi->data.data(), T(1), xi->ensure_grad().data());
        if (wi->requires_grad) gemm(true, false, in, out_dim, rows, T(1), xi->data.data(), g, T(1), wi->ensure_grad().data());
        if (bi && bi->requires_grad) {
          auto& gb = bi->ensure_grad();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < out_dim; ++c) gb[static_cast<size_t>(c)] += g[r * out_dim + c];
        }
      });
}

// ---------------------------------------------------------------------------
// softmax

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& input, int64_t axis) {
  const Shape& s = input.shape();
  const auto ax = static_cast<size_t>(normalize_axis(axis, input.rank()));
  const int64_t outer = product(s, 0, ax), extent = s[ax], inner = product(s, ax + 1, s.size());
  std::vector<T> out(input.data().begin(), input.data().end());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      T* base = out.data() + o * extent * inner + i;
      T mx = base[0];
      for (int64_t a = 1; a < extent; ++a) mx = std::max(mx, base[a * inner]);
      T total = 0;
      for (int64_t a = 0; a < extent; ++a) {
        base[a * inner] = std::exp(base[a * inner] - mx);
        total += base[a * inner];
      }
      for (int64_t a = 0; a < extent; ++a) base[a * inner] /= total;
    }
  }
  return detail::make_result<T>("softmax", s, std::move(out), {&input},
                                [xi = input.impl(), outer, extent, inner](const TensorImpl<T>& res) {
                                  auto& gx = xi->ensure_grad();
                                  for (int64_t o = 0; o < outer; ++o) {
                                    for (int64_t i = 0; i < inner; ++i) {
                                      const int64_t base = o * extent * inner + i;
                                      T dot = 0;
                                      for (int64_t a = 0; a < extent; ++a) {
                                        dot += res.grad[base + a * inner] * res.data[base + a * inner];
                                      }
                                      for (int64_t a = 0; a < extent; ++a) {
                                        const int64_t j = base + a * inner;
                                        gx[j] += res.data[j] * (res.grad[j] - dot);
                                      }
                                    }
                                  }
                                });
}

// ---------------------------------------------------------------------------
// normalization

namespace {

// Normalizes `count` contiguous blocks of `block` values. `channel_of(b, i)`
// maps a block and in-block offset onto the affine parameter index.
template <typename T, typename ChannelOf>
BasicTensor<T> normalize_blocks(const char* op, const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                                const BasicTensor<T>& beta, double eps, int64_t count, int64_t block,
                                ChannelOf channel_of) {
  const T* x = input.data().data();
  const T* ga = gamma.data().data();
  const T* be = beta.data().data();
  std::vector<T> xhat(input.data().size());
  std::vector<T> inv_std(static_cast<size_t>(count));
  std::vector<T> out(input.data().size());
  for (int64_t b = 0; b < count; ++b) {
    const T* xb = x + b * block;
    double mu = 0;
    for (int64_t i = 0; i < block; ++i) mu += xb[i];
    mu /= static_cast<double>(block);
    double var = 0;
    for (int64_t i = 0; i < block; ++i) var += (xb[i] - mu) * (xb[i] - mu);
    var /= static_cast<double>(block);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(b)] = static_cast<T>(is);
    for (int64_t i = 0; i < block; ++i) {
      const int64_t j = b * block + i;
      xhat[j] = static_cast<T>((xb[i] - mu) * is);
      const int64_t c = channel_of(b, i);
      out[j] = xhat[j] * ga[c] + be[c];
    }
  }
  return detail::make_result<T>(
      op, input.shape(), std::move(out), {&input, &gamma, &beta},
      [xi = input.impl(), gi = gamma.impl(), bi = beta.impl(), xhat = std::move(xhat), inv_std = std::move(inv_std),
       count, block, channel_of](const TensorImpl<T>& res) {
        const T* g = res.grad.data();
        if (gi->requires_grad) {
          auto& gg = gi->ensure_grad();
          for (int64_t b = 0; b < count; ++b)
            for (int64_t i = 0; i < block; ++i) gg[channel_of(b, i)] += g[b * block + i] * xhat[b * block + i];
        }
        if (bi->requires_grad) {
          auto& gb = bi->ensure_grad();
          for (int64_t b = 0; b < count; ++b)
            for (int64_t i = 0; i < block; ++i) gb[channel_of(b, i)] += g[b * block + i];
        }
        if (!xi->requires_grad) return;
        auto& gx = xi->ensure_grad();
        const T* ga = gi->data.data();
        for (int64_t b = 0; b < count; ++b) {
          double mean_dy = 0, mean_dy_xhat = 0;
          for (int64_t i = 0; i < block; ++i) {
            const int64_t j = b * block + i;
            const double dy = static_cast<double>(g[j]) * ga[channel_of(b, i)];
            mean_dy += dy;
            mean_dy_xhat += dy * xhat[j];
          }
          mean_dy /= static_cast<double>(block);
          mean_dy_xhat /= static_cast<double>(block);
          const double is = inv_std[static_cast<size_t>(b)];
          for (int64_t i = 0; i < block; ++i) {
            const int64_t j = b * block + i;
            const double dy = static_cast<double>(g[j]) * ga[channel_of(b, i)];
            gx[j] += static_cast<T>(is * (dy - mean_dy - xhat[j] * mean_dy_xhat));
          }
        }
      });
}

}  // namespace

template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& input, int groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps) {
  if (input.rank() < 2) throw ConfigError("group_norm expects [N, C, ...]");
  const int64_t n = input.dim(0), c = input.dim(1);
  if (groups < 1 || c % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  if (gamma.numel() != c || beta.numel() != c) throw ConfigError("group_norm: affine parameters must have C entries");
  const int64_t spatial = input.numel() / (n * c);
  const int64_t per_group = c / groups;
  const int64_t block = per_group * spatial;
  return normalize_blocks("group_norm", input, gamma, beta, eps, n * groups, block,
                          [groups, per_group, spatial](int64_t b, int64_t i) {
                            return (b % groups) * per_group + i / spatial;
                          });
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& input, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          double eps) {
  const int64_t e = input.dim(-1);
  if (gamma.numel() != e || beta.numel() != e) throw ConfigError("layer_norm: affine parameters must have E entries");
  return normalize_blocks("layer_norm", input, gamma, beta, eps, input.numel() / e, e,
                          [](int64_t, int64_t i) { return i; });
}

// ---------------------------------------------------------------------------
// activations

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  std::vector<T> out(input.data().begin(), input.data().end());
  for (auto& v : out) v = v < T(0) ? T(0) : v;  // NaN passes through
  return detail::make_result<T>("relu", input.shape(), std::move(out), {&input},
                                [xi = input.impl()](const TensorImpl<T>& res) {
                                  auto& gx = xi->ensure_grad();
                                  for (size_t i = 0; i < gx.size(); ++i) {
                                    if (xi->data[i] > T(0)) gx[i] += res.grad[i];
                                  }
                                });
}

template <typename T>
BasicTensor<T> prelu(const BasicTensor<T>& input, const BasicTensor<T>& alpha) {
  const int64_t channels = alpha.numel();
  int64_t inner = 1, c_extent = 1;
  if (channels != 1) {
    if (input.rank() < 2 || input.dim(1) != channels) {
      throw ConfigError("prelu: " + std::to_string(channels) + " slopes for input " + shape_to_string(input.shape()));
    }
    c_extent = channels;
    inner = input.numel() / (input.dim(0) * channels);
  }
  auto channel = [inner, c_extent](size_t i) { return static_cast<size_t>((static_cast<int64_t>(i) / inner) % c_extent); };
  const T* x = input.data().data();
  const T* a = alpha.data().data();
  std::vector<T> out(input.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = x[i] >= T(0) ? x[i] : a[channel(i)] * x[i];
  return detail::make_result<T>("prelu", input.shape(), std::move(out), {&input, &alpha},
                                [xi = input.impl(), ai = alpha.impl(), channel](const TensorImpl<T>& res) {
                                  const auto& x = xi->data;
                                  if (xi->requires_grad) {
                                    auto& gx = xi->ensure_grad();
                                    for (size_t i = 0; i < gx.size(); ++i) {
                                      gx[i] += x[i] >= T(0) ? res.grad[i] : ai->data[channel(i)] * res.grad[i];
                                    }
                                  }
                                  if (ai->requires_grad) {
                                    auto& ga = ai->ensure_grad();
                                    for (size_t i = 0; i < x.size(); ++i) {
                                      if (x[i] < T(0)) ga[channel(i)] += x[i] * res.grad[i];
                                    }
                                  }
                                });
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& input) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<T> out(input.data().size());
  const T* x = input.data().data();
  for (size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  return detail::make_result<T>("gelu", input.shape(), std::move(out), {&input},
                                [xi = input.impl()](const TensorImpl<T>& res) {
                                  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
                                  auto& gx = xi->ensure_grad();
                                  for (size_t i = 0; i < gx.size(); ++i) {
                                    const double v = xi->data[i];
                                    const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                                    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                                    gx[i] += static_cast<T>(res.grad[i] * (cdf + v * pdf));
                                  }
                                });
}

// ---------------------------------------------------------------------------
// arithmetic

namespace {

template <typename T>
int64_t broadcast_period(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() <= as.size() && std::equal(bs.begin(), bs.end(), as.end() - static_cast<int64_t>(bs.size()))) {
    return b.numel();
  }
  throw ConfigError(std::string(op) + ": shapes " + shape_to_string(as) + " and " + shape_to_string(bs) +
                    " are not compatible");
}

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const int64_t period = broadcast_period(a, b, "add");
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* bd = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[static_cast<int64_t>(i) % period];
  return detail::make_result<T>("add", a.shape(), std::move(out), {&a, &b},
                                [ai = a.impl(), bi = b.impl(), period](const TensorImpl<T>& res) {
                                  if (ai->requires_grad) {
                                    auto& ga = ai->ensure_grad();
                                    for (size_t i = 0; i < ga.size(); ++i) ga[i] += res.grad[i];
                                  }
                                  if (bi->requires_grad) {
                                    auto& gb = bi->ensure_grad();
                                    for (size_t i = 0; i < res.grad.size(); ++i) {
                                      gb[static_cast<int64_t>(i) % period] += res.grad[i];
                                    }
                                  }
                                });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const int64_t period = broadcast_period(a, b, "mul");
  std::vector<T> out(a.data().begin(), a.data().end());
  const T* bd = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[static_cast<int64_t>(i) % period];
  return detail::make_result<T>("mul", a.shape(), std::move(out), {&a, &b},
                                [ai = a.impl(), bi = b.impl(), period](const TensorImpl<T>& res) {
                                  if (ai->requires_grad) {
                                    auto& ga = ai->ensure_grad();
                                    for (size_t i = 0; i < ga.size(); ++i) {
                                      ga[i] += res.grad[i] * bi->data[static_cast<int64_t>(i) % period];
                                    }
                                  }
                                  if (bi->requires_grad) {
                                    auto& gb = bi->ensure_grad();
                                    for (size_t i = 0; i < res.grad.size(); ++i) {
                                      gb[static_cast<int64_t>(i) % period] += res.grad[i] * ai->data[i];
                                    }
                                  }
                                });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& input, double factor) {
  std::vector<T> out(input.data().begin(), input.data().end());
  for (auto& v : out) v = static_cast<T>(v * factor);
  return detail::make_result<T>("scale", input.shape(), std::move(out), {&input},
                                [xi = input.impl(), factor](const TensorImpl<T>& res) {
                                  auto& gx = xi->ensure_grad();
                                  for (size_t i = 0; i < gx.size(); ++i) gx[i] += static_cast<T>(res.grad[i] * factor);
                                });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& input) {
  // Neumaier-compensated in double: keeps large reductions (losses, check
  // functionals) accurate to a few ulps.
  double total = 0.0, carry = 0.0;
  for (T v : input.data()) {
    const double x = v;
    const double t = total + x;
    carry += std::abs(total) >= std::abs(x) ? (total - t) + x : (x - t) + total;
    total = t;
  }
  return detail::make_result<T>("sum", Shape{1}, std::vector<T>{static_cast<T>(total + carry)}, {&input},
                                [xi = input.impl()](const TensorImpl<T>& res) {
                                  auto& gx = xi->ensure_grad();
                                  for (auto& g : gx) g += res.grad[0];
                                });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& input) {
  return scale(sum(input), 1.0 / static_cast<double>(input.numel()));
}

// ---------------------------------------------------------------------------
// structural

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& inputs, int64_t axis) {
  if (inputs.empty()) throw ConfigError("concat of zero tensors");
  const Shape& first = inputs.front().shape();
  const auto ax = static_cast<size_t>(normalize_axis(axis, static_cast<int64_t>(first.size())));
  Shape shape = first;
  shape[ax] = 0;
  std::vector<int64_t> extents;
  for (const auto& t : inputs) {
    const Shape& s = t.shape();
    bool ok = s.size() == first.size();
    for (size_t i = 0; ok && i < s.size(); ++i) ok = (i == ax) || s[i] == first[i];
    if (!ok) {
      throw ConfigError("concat: " + shape_to_string(s) + " does not match " + shape_to_string(first) +
                        " off axis " + std::to_string(ax));
    }
    extents.push_back(s[ax]);
    shape[ax] += s[ax];
  }
  const int64_t outer = product(first, 0, ax);
  const int64_t inner = product(first, ax + 1, first.size());
  const int64_t total = shape[ax];
  std::vector<T> out(static_cast<size_t>(shape_numel(shape)));
  int64_t offset = 0;
  for (size_t t = 0; t < inputs.size(); ++t) {
    const T* src = inputs[t].data().data();
    const int64_t chunk = extents[t] * inner;
    for (int64_t o = 0; o < outer; ++o) {
      std::copy(src + o * chunk, src + (o + 1) * chunk, out.begin() + o * total * inner + offset * inner);
    }
    offset += extents[t];
  }
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  for (const auto& t : inputs) impls.push_back(t.impl());
  return detail::make_result<T>("concat", shape, std::move(out), inputs,
                                [impls, extents, outer, inner, total](const TensorImpl<T>& res) {
                                  int64_t offset = 0;
                                  for (size_t t = 0; t < impls.size(); ++t) {
                                    const int64_t chunk = extents[t] * inner;
                                    if (impls[t]->requires_grad) {
                                      auto& g = impls[t]->ensure_grad();
                                      for (int64_t o = 0; o < outer; ++o) {
                                        const T* src = res.grad.data() + o * total * inner + offset * inner;
                                        for (int64_t i = 0; i < chunk; ++i) g[o * chunk + i] += src[i];
                                      }
                                    }
                                    offset += extents[t];
                                  }
                                });
}

template <typename T>
BasicTensor<T> maxpool3d(const BasicTensor<T>& input, int kernel, int stride, int padding) {
  require_rank(input, 5, "maxpool3d");
  const int64_t nc = input.dim(0) * input.dim(1);
  const int64_t d = input.dim(2), h = input.dim(3), w = input.dim(4);
  const int64_t od = conv_output_extent(d, kernel, stride, padding);
  const int64_t oh = conv_output_extent(h, kernel, stride, padding);
  const int64_t ow = conv_output_extent(w, kernel, stride, padding);
  std::vector<T> out(static_cast<size_t>(nc * od * oh * ow));
  std::vector<int64_t> argmax(out.size());
  const T* x = input.data().data();
  int64_t o = 0;
  for (int64_t c = 0; c < nc; ++c) {
    for (int64_t z = 0; z < od; ++z) {
      for (int64_t y = 0; y < oh; ++y) {
        for (int64_t xo = 0; xo < ow; ++xo, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          int64_t best_i = -1;
          for (int kz = 0; kz < kernel; ++kz) {
            const int64_t iz = z * stride - padding + kz;
            if (iz < 0 || iz >= d) continue;
            for (int ky = 0; ky < kernel; ++ky) {
              const int64_t iy = y * stride - padding + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kernel; ++kx) {
                const int64_t ix = xo * stride - padding + kx;
                if (ix < 0 || ix >= w) continue;
                const int64_t i = ((c * d + iz) * h + iy) * w + ix;
                if (best_i < 0 || x[i] > best || std::isnan(x[i])) {
                  best = x[i];
                  best_i = i;
                }
              }
            }
          }
          out[o] = best;
          argmax[o] = best_i;
        }
      }
    }
  }
  return detail::make_result<T>("maxpool3d", Shape{input.dim(0), input.dim(1), od, oh, ow}, std::move(out), {&input},
                                [xi = input.impl(), argmax = std::move(argmax)](const TensorImpl<T>& res) {
                                  auto& gx = xi->ensure_grad();
                                  for (size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += res.grad[i];
                                });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& input, Shape shape) {
  if (shape_numel(shape) != input.numel()) {
    throw ConfigError("reshape " + shape_to_string(input.shape()) + " -> " + shape_to_string(shape));
  }
  return detail::make_result<T>("reshape", std::move(shape), copy_values(input), {&input},
                                [xi = input.impl()](const TensorImpl<T>& res) {
                                  auto& gx = xi->ensure_grad();
                                  for (size_t i = 0; i < gx.size(); ++i) gx[i] += res.grad[i];
                                });
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& input, const std::vector<int>& order) {
  const Shape& s = input.shape();
  const size_t r = s.size();
  if (order.size() != r) throw ConfigError("permute: order rank mismatch");
  std::vector<bool> seen(r, false);
  for (int a : order) {
    if (a < 0 || static_cast<size_t>(a) >= r || seen[static_cast<size_t>(a)]) throw ConfigError("permute: invalid order");
    seen[static_cast<size_t>(a)] = true;
  }
  std::vector<int64_t> in_strides(r, 1);
  for (size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * s[i];
  Shape shape(r);
  std::vector<int64_t> strides(r);
  for (size_t i = 0; i < r; ++i) {
    shape[i] = s[static_cast<size_t>(order[i])];
    strides[i] = in_strides[static_cast<size_t>(order[i])];
  }
  // source index of each output element, in output order
  const int64_t total = input.numel();
  std::vector<int64_t> src(static_cast<size_t>(total));
  std::vector<int64_t> idx(r, 0);
  int64_t offset = 0;
  for (int64_t o = 0; o < total; ++o) {
    src[static_cast<size_t>(o)] = offset;
    for (size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      offset += strides[ax];
      if (idx[ax] < shape[ax]) break;
      offset -= strides[ax] * shape[ax];
      idx[ax] = 0;
    }
  }
  std::vector<T> out(static_cast<size_t>(total));
  const T* x = input.data().data();
  for (size_t o = 0; o < out.size(); ++o) out[o] = x[src[o]];
  return detail::make_result<T>("permute", shape, std::move(out), {&input},
                                [xi = input.impl(), src = std::move(src)](const TensorImpl<T>& res) {
                                  auto& gx = xi->ensure_grad();
                                  for (size_t o = 0; o < src.size(); ++o) gx[src[o]] += res.grad[o];
                                });
}

template <typename T>
std::vector<int32_t> argmax_channels(const BasicTensor<T>& input) {
  if (input.rank() < 2) throw ConfigError("argmax_channels needs [N, C, ...] input");
  const int64_t n = input.dim(0), c = input.dim(1);
  const int64_t inner = input.numel() / (n * c);
  std::vector<int32_t> out(static_cast<size_t>(n * inner), 0);
  const T* x = input.data().data();
  for (int64_t b = 0; b < n; ++b) {
    const T* base = x + b * c * inner;
    for (int64_t i = 0; i < inner; ++i) {
      int32_t best = 0;
      T best_value = base[i];
      for (int64_t k = 1; k < c; ++k) {
        if (base[k * inner + i] > best_value) {
          best_value = base[k * inner + i];
          best = static_cast<int32_t>(k);
        }
      }
      out[static_cast<size_t>(b * inner + i)] = best;
    }
  }
  return out;
}

#define TRUNET_INSTANTIATE_OPS(T)                                                                               \
  template BasicTensor<T> conv3d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, int, int); \
  template BasicTensor<T> trilinear_upsample(const BasicTensor<T>&, int);                                      \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                                \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> softmax(const BasicTensor<T>&, int64_t);                                             \
  template BasicTensor<T> group_norm(const BasicTensor<T>&, int, const BasicTensor<T>&, const BasicTensor<T>&, \
                                     double);                                                                  \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,      \
                                     double);                                                                  \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> prelu(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> scale(const BasicTensor<T>&, double);                                                \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, int64_t);                                 \
  template BasicTensor<T> maxpool3d(const BasicTensor<T>&, int, int, int);                                     \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                               \
  template BasicTensor<T> permute(const BasicTensor<T>&, const std::vector<int>&);                             \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                         \
  template std::vector<int32_t> argmax_channels(const BasicTensor<T>&);

TRUNET_INSTANTIATE_OPS(float)
TRUNET_INSTANTIATE_OPS(double)

}  // namespace trunet::ops
