/* Copyright (c) 2026 The otfnet Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#include "otf/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <sstream>

#include "otf/error.hpp"

namespace otf {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using ConstMapRM = Eigen::Map<const MatRM>;
using MatRMd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRMd = Eigen::Map<MatRMd>;
using ConstMapRMd = Eigen::Map<const MatRMd>;

Tensor scalar_tensor(double v) { return Tensor(Shape{1}, std::vector<float>{static_cast<float>(v)}); }

void require_rank(const Tensor& t, int rank, const char* op, const char* arg) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) +
                     ", got " + t.shape().str());
  }
}

void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Output columns [lo, hi) whose input column xo*stride - pad + kj lies inside [0, w).
void valid_range(int ow, int w, int stride, int offset, int& lo, int& hi) {
  lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  hi = w - 1 - offset < 0 ? 0 : std::min(ow, (w - 1 - offset) / stride + 1);
  if (hi < lo) hi = lo;
}

// Unfolds one [C,H,W] sample into a [C*kh*kw, out_h*out_w] block of a row-major matrix whose
// rows are `ld` floats apart.
template <typename T>
void im2col(const float* x, int channels, int h, int w, const ConvGeometry& g, int oh, int ow,
            T* col, std::size_t ld) {
  for (int c = 0; c < channels; ++c) {
    const float* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < g.kernel_h; ++ki) {
      for (int kj = 0; kj < g.kernel_w; ++kj) {
        T* dst = col + (static_cast<std::size_t>(c * g.kernel_h + ki) * g.kernel_w + kj) * ld;
        const int offset = kj - g.pad_w;
        int lo, hi;
        valid_range(ow, w, g.stride_w, offset, lo, hi);
        for (int y = 0; y < oh; ++y) {
          const int iy = y * g.stride_h - g.pad_h + ki;
          T* drow = dst + static_cast<std::size_t>(y) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(drow, drow + ow, T(0));
            continue;
          }
          const float* srow = xc + static_cast<std::size_t>(iy) * w;
          for (int xo = 0; xo < lo; ++xo) drow[xo] = T(0);
          if (g.stride_w == 1) {
            const float* sp = srow + offset;
            for (int xo = lo; xo < hi; ++xo) drow[xo] = sp[xo];
          } else {
            for (int xo = lo; xo < hi; ++xo) drow[xo] = srow[xo * g.stride_w + offset];
          }
          for (int xo = hi; xo < ow; ++xo) drow[xo] = T(0);
        }
      }
    }
  }
}

void col2im_add(const float* col, int channels, int h, int w, const ConvGeometry& g, int oh, int ow,
                float* dx, std::size_t ld) {
  for (int c = 0; c < channels; ++c) {
    float* dxc = dx + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < g.kernel_h; ++ki) {
      for (int kj = 0; kj < g.kernel_w; ++kj) {
        const float* src =
            col + (static_cast<std::size_t>(c * g.kernel_h + ki) * g.kernel_w + kj) * ld;
        const int offset = kj - g.pad_w;
        int lo, hi;
        valid_range(ow, w, g.stride_w, offset, lo, hi);
        for (int y = 0; y < oh; ++y) {
          const int iy = y * g.stride_h - g.pad_h + ki;
          if (iy < 0 || iy >= h) continue;
          const float* srow = src + static_cast<std::size_t>(y) * ow;
          float* drow = dxc + static_cast<std::size_t>(iy) * w;
          if (g.stride_w == 1) {
            float* dp = drow + offset;
            for (int xo = lo; xo < hi; ++xo) dp[xo] += srow[xo];
          } else {
            for (int xo = lo; xo < hi; ++xo) drow[xo * g.stride_w + offset] += srow[xo];
          }
        }
      }
    }
  }
}

bool is_plain_pointwise(const ConvGeometry& g) {
  return g.kernel_h == 1 && g.kernel_w == 1 && g.pad_h == 0 && g.pad_w == 0 && g.stride_h == 1 &&
         g.stride_w == 1;
}

// Per-thread buffers reused across conv calls; fresh multi-megabyte allocations each call cost
// more in page faults than the GEMMs they feed.
template <typename T = float>
T* scratch(int slot, std::size_t n) {
  thread_local std::vector<T> buf[3];
  auto& b = buf[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

// Samples per batched GEMM, keeping the unfolded matrix cache-sized.
int conv_chunk(int n, int k, int p) {
  constexpr std::size_t kBudget = std::size_t{1} << 16;
  const std::size_t per = static_cast<std::size_t>(k) * p;
  return static_cast<int>(std::clamp<std::size_t>(kBudget / std::max<std::size_t>(per, 1), 1, static_cast<std::size_t>(std::max(n, 1))));
}

// Samples [s0, s0+m) side by side as a [K, m*P] matrix.
template <typename T>
void gather_cols(const float* x, int s0, int m, int cin, int h, int w, const ConvGeometry& g, int oh,
                 int ow, bool direct, T* col) {
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  const std::size_t ld = p * static_cast<std::size_t>(m);
  for (int j = 0; j < m; ++j) {
    const float* xs = x + static_cast<std::size_t>(s0 + j) * cin * h * w;
    T* dst = col + static_cast<std::size_t>(j) * p;
    if (direct) {
      for (int c = 0; c < cin; ++c) std::copy_n(xs + static_cast<std::size_t>(c) * p, p, dst + static_cast<std::size_t>(c) * ld);
    } else {
      im2col(xs, cin, h, w, g, oh, ow, dst, ld);
    }
  }
}

// Double reductions over float runs with eight fixed lanes, so the loops vectorise while the
// summation order stays independent of the build.
constexpr int kLanes = 8;

double lane_total(const double* acc) {
  double t = 0.0;
  for (int l = 0; l < kLanes; ++l) t += acc[l];
  return t;
}

void sum_into(const float* p, int n, double* acc) {
  int i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (int l = 0; l < kLanes; ++l) acc[l] += p[i + l];
  for (; i < n; ++i) acc[i % kLanes] += p[i];
}

void sq_dev_into(const float* p, int n, double mu, double* acc) {
  int i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (int l = 0; l < kLanes; ++l) {
      const double d = p[i + l] - mu;
      acc[l] += d * d;
    }
  for (; i < n; ++i) {
    const double d = p[i] - mu;
    acc[i % kLanes] += d * d;
  }
}

// acc_g += g, acc_gx += g * (x - mu)
void bn_grad_sums(const float* x, const float* g, int n, double mu, double* acc_g, double* acc_gx) {
  int i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (int l = 0; l < kLanes; ++l) {
      acc_g[l] += g[i + l];
      acc_gx[l] += g[i + l] * (x[i + l] - mu);
    }
  for (; i < n; ++i) {
    acc_g[i % kLanes] += g[i];
    acc_gx[i % kLanes] += g[i] * (x[i] - mu);
  }
}

}  // namespace

ConvGeometry ConvGeometry::square(int n) { return {n, n, n / 2, n / 2, 1, 1}; }
ConvGeometry ConvGeometry::row(int n) { return {1, n, 0, n / 2, 1, 1}; }
ConvGeometry ConvGeometry::column(int n) { return {n, 1, n / 2, 0, 1, 1}; }
ConvGeometry ConvGeometry::pointwise() { return {1, 1, 0, 0, 1, 1}; }

ConvGeometry ConvGeometry::with_stride(int s) const {
  ConvGeometry g = *this;
  g.stride_h = s;
  g.stride_w = s;
  return g;
}

int ConvGeometry::out_h(int in_h) const {
  const int span = in_h + 2 * pad_h - kernel_h;
  if (kernel_h < 1 || stride_h < 1 || span < 0) {
    throw ShapeError("conv geometry " + str() + " yields no output rows for height " +
                     std::to_string(in_h));
  }
  return span / stride_h + 1;
}

int ConvGeometry::out_w(int in_w) const {
  const int span = in_w + 2 * pad_w - kernel_w;
  if (kernel_w < 1 || stride_w < 1 || span < 0) {
    throw ShapeError("conv geometry " + str() + " yields no output columns for width " +
                     std::to_string(in_w));
  }
  return span / stride_w + 1;
}

std::string ConvGeometry::str() const {
  std::ostringstream os;
  os << kernel_h << 'x' << kernel_w << " pad(" << pad_h << ',' << pad_w << ") stride(" << stride_h
     << ',' << stride_w << ')';
  return os.str();
}

Var conv2d(Var x, Var w, const Var* bias, const ConvGeometry& g) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank(xv, 4, "conv2d", "input");
  require_rank(wv, 4, "conv2d", "weight");
  if (wv.dim(2) != g.kernel_h) {
    throw ShapeError("conv2d: weight axis 2 (kernel height) is " + std::to_string(wv.dim(2)) +
                     " but geometry expects " + std::to_string(g.kernel_h));
  }
  if (wv.dim(3) != g.kernel_w) {
    throw ShapeError("conv2d: weight axis 3 (kernel width) is " + std::to_string(wv.dim(3)) +
                     " but geometry expects " + std::to_string(g.kernel_w));
  }
  if (wv.dim(1) != xv.dim(1)) {
    throw ShapeError("conv2d: input axis 1 (channels) is " + std::to_string(xv.dim(1)) +
                     " but weight expects " + std::to_string(wv.dim(1)));
  }
  const int n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const int cout = wv.dim(0);
  if (bias != nullptr && (bias->value().rank() != 1 || bias->value().dim(0) != cout)) {
    throw ShapeError("conv2d: bias axis 0 must equal output channels " + std::to_string(cout) +
                     ", got " + bias->value().shape().str());
  }
  const int oh = g.out_h(h), ow = g.out_w(wd);
  const int k = cin * g.kernel_h * g.kernel_w;
  const int p = oh * ow;
  const bool direct = is_plain_pointwise(g);

  // Forward products accumulate in double; the backward GEMMs stay in float.
  Tensor out(Shape{n, cout, oh, ow});
  const MatRMd wm = ConstMapRM(wv.ptr(), cout, k).cast<double>();
  const int cs = conv_chunk(n, k, p);
  double* col = scratch<double>(0, static_cast<std::size_t>(k) * cs * p);
  double* resp = scratch<double>(1, static_cast<std::size_t>(cout) * cs * p);
  for (int s0 = 0; s0 < n; s0 += cs) {
    const int m = std::min(cs, n - s0);
    const std::size_t ld = static_cast<std::size_t>(m) * p;
    gather_cols(xv.ptr(), s0, m, cin, h, wd, g, oh, ow, direct, col);
    MapRMd res(resp, cout, static_cast<Eigen::Index>(ld));
    res.noalias() = wm * ConstMapRMd(col, k, static_cast<Eigen::Index>(ld));
    for (int j = 0; j < m; ++j) {
      MapRM om(out.ptr() + static_cast<std::size_t>(s0 + j) * cout * p, cout, p);
      for (int c = 0; c < cout; ++c) {
        const double b = bias != nullptr ? static_cast<double>(bias->value()[static_cast<std::size_t>(c)]) : 0.0;
        const double* r = resp + static_cast<std::size_t>(c) * ld + static_cast<std::size_t>(j) * p;
        float* o = om.data() + static_cast<std::size_t>(c) * p;
        for (int i = 0; i < p; ++i) o[i] = static_cast<float>(r[i] + b);
      }
    }
  }

  std::vector<Var> inputs{x, w};
  if (bias != nullptr) inputs.push_back(*bias);
  const Var bias_var = bias != nullptr ? *bias : Var();
  return x.tape()->record(std::move(out), inputs, [x, w, bias_var, g](Tape& t, const Tensor& gout) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const int n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
    const int cout = wv.dim(0);
    const int oh = gout.dim(2), ow = gout.dim(3);
    const int k = cin * g.kernel_h * g.kernel_w;
    const int p = oh * ow;
    const bool direct = is_plain_pointwise(g);
    const bool need_x = t.requires_grad(x);
    const bool need_w = t.requires_grad(w);
    const bool need_b = bias_var.valid() && t.requires_grad(bias_var);

    ConstMapRM wm(wv.ptr(), cout, k);
    const int cs = conv_chunk(n, k, p);
    float* col = need_w ? scratch(0, static_cast<std::size_t>(k) * cs * p) : nullptr;
    MapRM go(scratch(1, static_cast<std::size_t>(cout) * cs * p), cout, static_cast<Eigen::Index>(cs) * p);
    float* dcolp = need_x ? scratch(2, static_cast<std::size_t>(k) * cs * p) : nullptr;
    MatRM dw;
    if (need_w) dw = MatRM::Zero(cout, k);
    std::vector<double> db(need_b ? static_cast<std::size_t>(cout) : 0, 0.0);
    Tensor* dx = need_x ? &t.grad(x) : nullptr;

    for (int s0 = 0; s0 < n; s0 += cs) {
      const int m = std::min(cs, n - s0);
      const Eigen::Index ld = static_cast<Eigen::Index>(m) * p;
      // A single sample is already laid out as [cout, P].
      const float* gsrc = gout.ptr() + static_cast<std::size_t>(s0) * cout * p;
      if (m > 1) {
        for (int c = 0; c < cout; ++c) {
          for (int j = 0; j < m; ++j) {
            std::copy_n(gout.ptr() + (static_cast<std::size_t>(s0 + j) * cout + c) * p, p,
                        go.data() + static_cast<std::size_t>(c) * ld + static_cast<std::size_t>(j) * p);
          }
        }
        gsrc = go.data();
      }
      ConstMapRM gm(gsrc, cout, ld);
      if (need_w) {
        gather_cols(xv.ptr(), s0, m, cin, h, wd, g, oh, ow, direct, col);
        dw.noalias() += gm * ConstMapRM(col, k, ld).transpose();
      }
      if (need_b) {
        for (int c = 0; c < cout; ++c) {
          const float* row = gout.ptr();
          double acc = 0.0;
          for (int j = 0; j < m; ++j) {
            const float* r = row + (static_cast<std::size_t>(s0 + j) * cout + c) * p;
            for (int i = 0; i < p; ++i) acc += r[i];
          }
          db[static_cast<std::size_t>(c)] += acc;
        }
      }
      if (need_x) {
        MapRM dcol(dcolp, k, ld);
        dcol.noalias() = wm.transpose() * gm;
        for (int j = 0; j < m; ++j) {
          float* dxs = dx->ptr() + static_cast<std::size_t>(s0 + j) * cin * h * wd;
          const float* src = dcol.data() + static_cast<std::size_t>(j) * p;
          if (direct) {
            for (int c = 0; c < cin; ++c) {
              const float* sr = src + static_cast<std::size_t>(c) * ld;
              float* dr = dxs + static_cast<std::size_t>(c) * p;
              for (int i = 0; i < p; ++i) dr[i] += sr[i];
            }
          } else {
            col2im_add(src, cin, h, wd, g, oh, ow, dxs, static_cast<std::size_t>(ld));
          }
        }
      }
    }
    if (need_w) {
      MapRM(t.grad(w).ptr(), cout, k) += dw;
    }
    if (need_b) {
      Tensor& gb = t.grad(bias_var);
      for (int c = 0; c < cout; ++c) gb[static_cast<std::size_t>(c)] += static_cast<float>(db[static_cast<std::size_t>(c)]);
    }
  });
}

Var batchnorm2d(Var x, Var gamma, Var beta, BnState state, BnMode mode) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "batchnorm2d", "input");
  const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  const Shape per_channel{c};
  expect_shape(gamma.value(), per_channel, "batchnorm2d gamma");
  expect_shape(beta.value(), per_channel, "batchnorm2d beta");
  expect_shape(state.running_mean, per_channel, "batchnorm2d running_mean");
  expect_shape(state.running_var, per_channel, "batchnorm2d running_var");
  const std::size_t m = static_cast<std::size_t>(n) * hw;
  if (m == 0) throw ShapeError("batchnorm2d: empty batch");

  // Per-channel mean and inverse std actually used for normalisation.
  std::vector<double> mean(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    double mu = 0.0, var = 0.0;
    if (mode == BnMode::train) {
      double acc[kLanes] = {};
      for (int s = 0; s < n; ++s) sum_into(xv.ptr() + (static_cast<std::size_t>(s) * c + ch) * hw, hw, acc);
      mu = lane_total(acc) / static_cast<double>(m);
      double acc2[kLanes] = {};
      for (int s = 0; s < n; ++s) {
        sq_dev_into(xv.ptr() + (static_cast<std::size_t>(s) * c + ch) * hw, hw, mu, acc2);
      }
      var = lane_total(acc2);
      const double biased = var / static_cast<double>(m);
      const double unbiased = m > 1 ? var / static_cast<double>(m - 1) : biased;
      const float mom = state.momentum;
      auto& rm = state.running_mean[static_cast<std::size_t>(ch)];
      auto& rv = state.running_var[static_cast<std::size_t>(ch)];
      rm = static_cast<float>((1.0 - mom) * rm + mom * mu);
      rv = static_cast<float>((1.0 - mom) * rv + mom * unbiased);
      var = biased;
    } else {
      mu = state.running_mean[static_cast<std::size_t>(ch)];
      var = state.running_var[static_cast<std::size_t>(ch)];
    }
    mean[static_cast<std::size_t>(ch)] = mu;
    inv_std[static_cast<std::size_t>(ch)] = 1.0 / std::sqrt(var + static_cast<double>(state.eps));
  }

  Tensor out(xv.shape());
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
      const double scale = inv_std[static_cast<std::size_t>(ch)] * gamma.value()[static_cast<std::size_t>(ch)];
      const double shift = beta.value()[static_cast<std::size_t>(ch)] - mean[static_cast<std::size_t>(ch)] * scale;
      const float* p = xv.ptr() + off;
      float* o = out.ptr() + off;
      for (int i = 0; i < hw; ++i) o[i] = static_cast<float>(p[i] * scale + shift);
    }
  }

  return x.tape()->record(std::move(out), {x, gamma, beta},
                          [x, gamma, beta, mean, inv_std, mode](Tape& t, const Tensor& gout) {
    const Tensor& xv = x.value();
    const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    const double m = static_cast<double>(n) * hw;
    const bool need_x = t.requires_grad(x);
    const bool need_g = t.requires_grad(gamma);
    const bool need_b = t.requires_grad(beta);
    for (int ch = 0; ch < c; ++ch) {
      const auto chu = static_cast<std::size_t>(ch);
      const double mu = mean[chu], is = inv_std[chu];
      double acc_g[kLanes] = {}, acc_gx[kLanes] = {};
      for (int s = 0; s < n; ++s) {
        const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
        bn_grad_sums(xv.ptr() + off, gout.ptr() + off, hw, mu, acc_g, acc_gx);
      }
      const double sum_dy = lane_total(acc_g);
      const double sum_dy_xhat = lane_total(acc_gx) * is;
      if (need_g) t.grad(gamma)[chu] += static_cast<float>(sum_dy_xhat);
      if (need_b) t.grad(beta)[chu] += static_cast<float>(sum_dy);
      if (!need_x) continue;
      const double gam = gamma.value()[chu];
      Tensor& dx = t.grad(x);
      for (int s = 0; s < n; ++s) {
        const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
        const float* p = xv.ptr() + off;
        const float* g = gout.ptr() + off;
        float* d = dx.ptr() + off;
        if (mode == BnMode::train) {
          const double k = gam * is / m;
          for (int i = 0; i < hw; ++i) {
            const double xhat = (p[i] - mu) * is;
            d[i] += static_cast<float>(k * (m * g[i] - sum_dy - xhat * sum_dy_xhat));
          }
        } else {
          const double k = gam * is;
          for (int i = 0; i < hw; ++i) d[i] += static_cast<float>(k * g[i]);
        }
      }
    }
  });
}

Var relu(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Tensor& gout) {
    const Tensor& xv = x.value();
    Tensor& dx = t.grad(x);
    const float* xp = xv.ptr();
    const float* gp = gout.ptr();
    float* dp = dx.ptr();
    for (std::size_t i = 0; i < xv.size(); ++i) dp[i] += xp[i] > 0.0f ? gp[i] : 0.0f;
  });
}

Var max_pool2x2(Var x) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "max_pool2x2", "input");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("max_pool2x2: spatial extents must be even, got " + xv.shape().str());
  }
  const int oh = h / 2, ow = w / 2;
  Tensor out(Shape{n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  std::size_t o = 0;
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * h * w;
      for (int y = 0; y < oh; ++y) {
        for (int xo = 0; xo < ow; ++xo, ++o) {
          std::size_t best = base + static_cast<std::size_t>(2 * y) * w + 2 * xo;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t idx = base + static_cast<std::size_t>(2 * y + dy) * w + 2 * xo + dx;
              if (xv[idx] > xv[best]) best = idx;
            }
          }
          out[o] = xv[best];
          (*argmax)[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return x.tape()->record(std::move(out), {x}, [x, argmax](Tape& t, const Tensor& gout) {
    Tensor& dx = t.grad(x);
    for (std::size_t i = 0; i < gout.size(); ++i) dx[(*argmax)[i]] += gout[i];
  });
}

Var global_avg_pool(Var x) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "global_avg_pool", "input");
  const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out(Shape{n, c});
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const float* p = xv.ptr() + (static_cast<std::size_t>(s) * c + ch) * hw;
      double acc = 0.0;
      for (int i = 0; i < hw; ++i) acc += p[i];
      out[static_cast<std::size_t>(s) * c + ch] = static_cast<float>(acc / hw);
    }
  }
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Tensor& gout) {
    const Tensor& xv = x.value();
    const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    Tensor& dx = t.grad(x);
    for (int s = 0; s < n; ++s) {
      for (int ch = 0; ch < c; ++ch) {
        const float g = gout[static_cast<std::size_t>(s) * c + ch] / static_cast<float>(hw);
        float* d = dx.ptr() + (static_cast<std::size_t>(s) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) d[i] += g;
      }
    }
  });
}

Var linear(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank(xv, 2, "linear", "input");
  require_rank(wv, 2, "linear", "weight");
  const int n = xv.dim(0), f = xv.dim(1), k = wv.dim(0);
  if (wv.dim(1) != f) {
    throw ShapeError("linear: input axis 1 (features) is " + std::to_string(f) +
                     " but weight expects " + std::to_string(wv.dim(1)));
  }
  expect_shape(b.value(), Shape{k}, "linear bias");
  Tensor out(Shape{n, k});
  MapRM om(out.ptr(), n, k);
  om.noalias() = ConstMapRM(xv.ptr(), n, f) * ConstMapRM(wv.ptr(), k, f).transpose();
  for (int s = 0; s < n; ++s) {
    for (int j = 0; j < k; ++j) om(s, j) += b.value()[static_cast<std::size_t>(j)];
  }
  return x.tape()->record(std::move(out), {x, w, b}, [x, w, b](Tape& t, const Tensor& gout) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const int n = xv.dim(0), f = xv.dim(1), k = wv.dim(0);
    ConstMapRM go(gout.ptr(), n, k);
    if (t.requires_grad(x)) {
      MapRM(t.grad(x).ptr(), n, f).noalias() += go * ConstMapRM(wv.ptr(), k, f);
    }
    if (t.requires_grad(w)) {
      MapRM(t.grad(w).ptr(), k, f).noalias() += go.transpose() * ConstMapRM(xv.ptr(), n, f);
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      for (int j = 0; j < k; ++j) {
        double acc = 0.0;
        for (int s = 0; s < n; ++s) acc += go(s, j);
        gb[static_cast<std::size_t>(j)] += static_cast<float>(acc);
      }
    }
  });
}

Var flatten(Var x) {
  const Tensor& xv = x.value();
  const int n = xv.dim(0);
  const int f = static_cast<int>(xv.size() / static_cast<std::size_t>(n));
  Tensor out(Shape{n, f}, std::vector<float>(xv.data().begin(), xv.data().end()));
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Tensor& gout) {
    add_into(t.grad(x), gout);
  });
}

Var add(Var a, Var b) {
  expect_shape(b.value(), a.value().shape(), "add rhs");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& gout) {
    if (t.requires_grad(a)) add_into(t.grad(a), gout);
    if (t.requires_grad(b)) add_into(t.grad(b), gout);
  });
}

Var mean_of(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("mean_of: no inputs");
  const Shape& shape = xs[0].value().shape();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    expect_shape(xs[i].value(), shape, "mean_of input " + std::to_string(i));
  }
  const double inv = 1.0 / static_cast<double>(xs.size());
  Tensor out(shape);
  for (std::size_t e = 0; e < out.size(); ++e) {
    double acc = 0.0;
    for (const Var& v : xs) acc += v.value()[e];
    out[e] = static_cast<float>(acc * inv);
  }
  std::vector<Var> inputs(xs.begin(), xs.end());
  return xs[0].tape()->record(std::move(out), inputs, [inputs, inv](Tape& t, const Tensor& gout) {
    for (const Var& v : inputs) {
      if (!t.requires_grad(v)) continue;
      Tensor& g = t.grad(v);
      for (std::size_t e = 0; e < g.size(); ++e) g[e] += static_cast<float>(gout[e] * inv);
    }
  });
}

Var log_mean_softmax(Var a, Var b) {
  expect_shape(b.value(), a.value().shape(), "log_mean_softmax rhs");
  require_rank(a.value(), 2, "log_mean_softmax", "logits");
  const Tensor pa = softmax_temperature(a.value(), 1.0);
  const Tensor pb = softmax_temperature(b.value(), 1.0);
  Tensor out(pa.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(std::log(0.5 * (static_cast<double>(pa[i]) + pb[i])));
  }
  return a.tape()->record(std::move(out), {a, b}, [a, b, pa, pb](Tape& t, const Tensor& gout) {
    // d/dl_a log(m_j) = 0.5 * pa_j (delta_jk - pa_k) / m_j
    const int n = pa.dim(0), k = pa.dim(1);
    for (int member = 0; member < 2; ++member) {
      const Var v = member == 0 ? a : b;
      if (!t.requires_grad(v)) continue;
      const Tensor& p = member == 0 ? pa : pb;
      Tensor& g = t.grad(v);
      for (int s = 0; s < n; ++s) {
        const std::size_t row = static_cast<std::size_t>(s) * k;
        double dot_term = 0.0;
        std::vector<double> r(static_cast<std::size_t>(k));
        for (int j = 0; j < k; ++j) {
          const double m = 0.5 * (static_cast<double>(pa[row + j]) + pb[row + j]);
          r[static_cast<std::size_t>(j)] = gout[row + j] * 0.5 * p[row + j] / m;
          dot_term += r[static_cast<std::size_t>(j)];
        }
        for (int j = 0; j < k; ++j) {
          g[row + j] += static_cast<float>(r[static_cast<std::size_t>(j)] - p[row + j] * dot_term);
        }
      }
    }
  });
}

Var detach(Var x) { return x.tape()->constant(x.value()); }

Var dot(Var a, Var b) {
  expect_shape(b.value(), a.value().shape(), "dot rhs");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    acc += static_cast<double>(a.value()[i]) * b.value()[i];
  }
  return a.tape()->record(scalar_tensor(acc), {a, b}, [a, b](Tape& t, const Tensor& gout) {
    const float g = gout[0];
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * b.value()[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * a.value()[i];
    }
  });
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> coeffs) {
  if (terms.empty() || terms.size() != coeffs.size()) {
    throw ShapeError("weighted_sum: need one coefficient per term");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().size() != 1) {
      throw ShapeError("weighted_sum: term " + std::to_string(i) + " is not a scalar");
    }
    acc += coeffs[i] * static_cast<double>(terms[i].value()[0]);
  }
  std::vector<Var> inputs(terms.begin(), terms.end());
  std::vector<double> w(coeffs.begin(), coeffs.end());
  return terms[0].tape()->record(scalar_tensor(acc), inputs, [inputs, w](Tape& t, const Tensor& gout) {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (t.requires_grad(inputs[i])) t.grad(inputs[i])[0] += static_cast<float>(w[i] * gout[0]);
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  require_rank(lv, 2, "cross_entropy", "logits");
  const int n = lv.dim(0), k = lv.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(n));
  }
  for (int s = 0; s < n; ++s) {
    const int y = labels[static_cast<std::size_t>(s)];
    if (y < 0 || y >= k) {
      throw ParamError("cross_entropy: label " + std::to_string(y) + " at row " + std::to_string(s) +
                       " outside [0, " + std::to_string(k) + ")");
    }
  }
  Tensor probs(lv.shape());
  double total = 0.0;
  for (int s = 0; s < n; ++s) {
    const float* row = lv.ptr() + static_cast<std::size_t>(s) * k;
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (int j = 0; j < k; ++j) {
      probs[static_cast<std::size_t>(s) * k + j] = static_cast<float>(std::exp(row[j] - lse));
    }
    total += lse - row[labels[static_cast<std::size_t>(s)]];
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape()->record(scalar_tensor(total / n), {logits},
                               [logits, probs, ys](Tape& t, const Tensor& gout) {
    const int n = probs.dim(0), k = probs.dim(1);
    const double scale = gout[0] / static_cast<double>(n);
    Tensor& g = t.grad(logits);
    for (int s = 0; s < n; ++s) {
      for (int j = 0; j < k; ++j) {
        const std::size_t i = static_cast<std::size_t>(s) * k + j;
        const double target = j == ys[static_cast<std::size_t>(s)] ? 1.0 : 0.0;
        g[i] += static_cast<float>(scale * (probs[i] - target));
      }
    }
  });
}

Var kl_div_temperature(Var teacher_logits, Var student_logits, double tau, double scale) {
  if (!(tau > 0.0)) throw ParamError("temperature must be positive, got " + std::to_string(tau));
  const Tensor& tv = teacher_logits.value();
  const Tensor& sv = student_logits.value();
  require_rank(sv, 2, "kl_div_temperature", "student logits");
  expect_shape(tv, sv.shape(), "kl_div_temperature teacher logits");
  const int n = sv.dim(0), k = sv.dim(1);

  Tensor pt(sv.shape()), ps(sv.shape());
  double total = 0.0;
  for (int s = 0; s < n; ++s) {
    const std::size_t off = static_cast<std::size_t>(s) * k;
    double mt = tv[off] / tau, ms = sv[off] / tau;
    for (int j = 1; j < k; ++j) {
      mt = std::max(mt, tv[off + j] / tau);
      ms = std::max(ms, sv[off + j] / tau);
    }
    double zt = 0.0, zs = 0.0;
    for (int j = 0; j < k; ++j) {
      zt += std::exp(tv[off + j] / tau - mt);
      zs += std::exp(sv[off + j] / tau - ms);
    }
    const double lzt = mt + std::log(zt), lzs = ms + std::log(zs);
    for (int j = 0; j < k; ++j) {
      const double log_pt = tv[off + j] / tau - lzt;
      const double log_ps = sv[off + j] / tau - lzs;
      const double p = std::exp(log_pt);
      if (p > 0.0) total += p * (log_pt - log_ps);
      pt[off + j] = static_cast<float>(p);
      ps[off + j] = static_cast<float>(std::exp(log_ps));
    }
  }
  // Only the student side is an input of the record, so no gradient reaches the teacher.
  return student_logits.tape()->record(
      scalar_tensor(scale * total / n), {student_logits},
      [student_logits, pt, ps, tau, scale](Tape& t, const Tensor& gout) {
        const int n = ps.dim(0);
        const double c = gout[0] * scale / (tau * n);
        Tensor& g = t.grad(student_logits);
        for (std::size_t i = 0; i < g.size(); ++i) {
          g[i] += static_cast<float>(c * (static_cast<double>(ps[i]) - pt[i]));
        }
      });
}

Var mse(Var target, Var pred) {
  const Tensor& tv = target.value();
  const Tensor& pv = pred.value();
  expect_shape(tv, pv.shape(), "feature distance");
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double d = static_cast<double>(tv[i]) - pv[i];
    acc += d * d;
  }
  const double count = static_cast<double>(pv.size());
  return pred.tape()->record(scalar_tensor(acc / count), {pred},
                             [target, pred, count](Tape& t, const Tensor& gout) {
    const Tensor& tv = target.value();
    const Tensor& pv = pred.value();
    const double c = 2.0 * gout[0] / count;
    Tensor& g = t.grad(pred);
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += static_cast<float>(c * (static_cast<double>(pv[i]) - tv[i]));
    }
  });
}

Tensor softmax_temperature(const Tensor& logits, double tau) {
  if (!(tau > 0.0)) throw ParamError("temperature must be positive, got " + std::to_string(tau));
  require_rank(logits, 2, "softmax_temperature", "logits");
  const int n = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.shape());
  for (int s = 0; s < n; ++s) {
    const std::size_t off = static_cast<std::size_t>(s) * k;
    double mx = logits[off] / tau;
    for (int j = 1; j < k; ++j) mx = std::max(mx, logits[off + j] / tau);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(logits[off + j] / tau - mx);
    for (int j = 0; j < k; ++j) {
      out[off + j] = static_cast<float>(std::exp(logits[off + j] / tau - mx) / z);
    }
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "argmax_rows", "logits");
  const int n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    const std::size_t off = static_cast<std::size_t>(s) * k;
    int best = 0;
    for (int j = 1; j < k; ++j) {
      if (logits[off + j] > logits[off + best]) best = j;
    }
    out[static_cast<std::size_t>(s)] = best;
  }
  return out;
}

}  // namespace otf
