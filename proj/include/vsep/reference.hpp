#pragma once

// Naive reference kernels used as independent oracles by the test suites and
// the `check` self-test command. Everything here is written as plain nested
// loops over explicit indices, deliberately ignoring the layouts and loop
// orders of the production ops.

#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

#include "vsep/common.hpp"

namespace vsep::ref {

struct Shape4 {
  int n, c, h, w;
  std::int64_t numel() const { return std::int64_t(n) * c * h * w; }
  std::int64_t idx(int a, int b, int y, int x) const {
    return ((std::int64_t(a) * c + b) * h + y) * w + x;
  }
};

inline std::vector<double> conv2d(const std::vector<double>& x, Shape4 xs,
                                  const std::vector<double>& w, int o_ch, int k,
                                  const std::vector<double>* bias, int stride, int pad,
                                  int dil = 1) {
  const int ho = (xs.h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  const int wo = (xs.w + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  Shape4 os{xs.n, o_ch, ho, wo};
  std::vector<double> out(os.numel(), 0.0);
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < o_ch; ++o)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          double acc = bias ? (*bias)[o] : 0.0;
          for (int c = 0; c < xs.c; ++c)
            for (int kh = 0; kh < k; ++kh)
              for (int kw = 0; kw < k; ++kw) {
                const int ih = oh * stride - pad + kh * dil;
                const int iw = ow * stride - pad + kw * dil;
                if (ih < 0 || ih >= xs.h || iw < 0 || iw >= xs.w) continue;
                acc += x[xs.idx(n, c, ih, iw)] * w[((std::int64_t(o) * xs.c + c) * k + kh) * k + kw];
              }
          out[os.idx(n, o, oh, ow)] = acc;
        }
  return out;
}

inline std::vector<double> conv_transpose2d(const std::vector<double>& x, Shape4 xs,
                                            const std::vector<double>& w, int o_ch, int k,
                                            const std::vector<double>* bias, int stride,
                                            int pad) {
  const int ho = (xs.h - 1) * stride - 2 * pad + k;
  const int wo = (xs.w - 1) * stride - 2 * pad + k;
  Shape4 os{xs.n, o_ch, ho, wo};
  std::vector<double> out(os.numel(), 0.0);
  if (bias) {
    for (int n = 0; n < xs.n; ++n)
      for (int o = 0; o < o_ch; ++o)
        for (int y = 0; y < ho; ++y)
          for (int z = 0; z < wo; ++z) out[os.idx(n, o, y, z)] = (*bias)[o];
  }
  for (int n = 0; n < xs.n; ++n)
    for (int i = 0; i < xs.c; ++i)
      for (int ih = 0; ih < xs.h; ++ih)
        for (int iw = 0; iw < xs.w; ++iw)
          for (int o = 0; o < o_ch; ++o)
            for (int kh = 0; kh < k; ++kh)
              for (int kw = 0; kw < k; ++kw) {
                const int oh = ih * stride - pad + kh;
                const int ow = iw * stride - pad + kw;
                if (oh < 0 || oh >= ho || ow < 0 || ow >= wo) continue;
                out[os.idx(n, o, oh, ow)] +=
                    x[xs.idx(n, i, ih, iw)] * w[((std::int64_t(i) * o_ch + o) * k + kh) * k + kw];
              }
  return out;
}

// Two-pass per-channel statistics followed by the textbook normalization.
inline std::vector<double> batchnorm2d_train(const std::vector<double>& x, Shape4 xs,
                                             const std::vector<double>& gamma,
                                             const std::vector<double>& beta, double eps = 1e-5) {
  std::vector<double> out(x.size());
  const std::int64_t cnt = std::int64_t(xs.n) * xs.h * xs.w;
  for (int c = 0; c < xs.c; ++c) {
    double mean = 0.0;
    for (int n = 0; n < xs.n; ++n)
      for (int h = 0; h < xs.h; ++h)
        for (int w = 0; w < xs.w; ++w) mean += x[xs.idx(n, c, h, w)];
    mean /= double(cnt);
    double var = 0.0;
    for (int n = 0; n < xs.n; ++n)
      for (int h = 0; h < xs.h; ++h)
        for (int w = 0; w < xs.w; ++w) {
          const double d = x[xs.idx(n, c, h, w)] - mean;
          var += d * d;
        }
    var /= double(cnt);
    for (int n = 0; n < xs.n; ++n)
      for (int h = 0; h < xs.h; ++h)
        for (int w = 0; w < xs.w; ++w) {
          out[xs.idx(n, c, h, w)] =
              gamma[c] * (x[xs.idx(n, c, h, w)] - mean) / std::sqrt(var + eps) + beta[c];
        }
  }
  return out;
}

inline std::vector<double> max_pool2d(const std::vector<double>& x, Shape4 xs, int k, int stride) {
  const int ho = (xs.h - k) / stride + 1;
  const int wo = (xs.w - k) / stride + 1;
  Shape4 os{xs.n, xs.c, ho, wo};
  std::vector<double> out(os.numel());
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          double best = x[xs.idx(n, c, oh * stride, ow * stride)];
          for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw)
              best = std::max(best, x[xs.idx(n, c, oh * stride + kh, ow * stride + kw)]);
          out[os.idx(n, c, oh, ow)] = best;
        }
  return out;
}

inline std::vector<double> matmul(const std::vector<double>& a, int m, int k,
                                  const std::vector<double>& b, int n) {
  std::vector<double> out(std::int64_t(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t) acc += a[std::int64_t(i) * k + t] * b[std::int64_t(t) * n + j];
      out[std::int64_t(i) * n + j] = acc;
    }
  return out;
}

// Channel-attention chain of the fusion module:
// out[i](h,w) = sum_j e[i] * e[j] * f[j](h,w).
inline std::vector<double> avga(const std::vector<double>& e, const std::vector<double>& f, int c,
                                int h, int w) {
  std::vector<double> out(std::int64_t(c) * h * w, 0.0);
  for (int i = 0; i < c; ++i)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int j = 0; j < c; ++j) acc += e[i] * e[j] * f[(std::int64_t(j) * h + y) * w + x];
        out[(std::int64_t(i) * h + y) * w + x] = acc;
      }
  return out;
}

// O(N^2) DFT of a real frame; returns the non-negative-frequency half.
inline std::vector<std::complex<double>> dft_half(const std::vector<double>& x) {
  const int n = static_cast<int>(x.size());
  std::vector<std::complex<double>> out(n / 2 + 1);
  for (int k = 0; k <= n / 2; ++k) {
    double re = 0.0, im = 0.0;
    for (int i = 0; i < n; ++i) {
      const double a = -2.0 * M_PI * double(k) * double(i) / double(n);
      re += x[i] * std::cos(a);
      im += x[i] * std::sin(a);
    }
    out[k] = {re, im};
  }
  return out;
}

// Extended-precision mean BCE on logits for cross-checking the stable form.
inline double bce_with_logits(const std::vector<double>& z, const std::vector<double>& t) {
  long double acc = 0.0L;
  for (size_t i = 0; i < z.size(); ++i) {
    const long double zi = z[i];
    const long double s = 1.0L / (1.0L + std::exp(-zi));
    acc += -(static_cast<long double>(t[i]) * std::log(s) +
             (1.0L - static_cast<long double>(t[i])) * std::log(1.0L - s));
  }
  return static_cast<double>(acc / static_cast<long double>(z.size()));
}

}  // namespace vsep::ref
