#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "vsep/common.hpp"
#include "vsep/grid.hpp"

namespace vsep {

// Desk-scale default framing: 8 kHz audio, Hann window of 254 samples
// (128 frequency bins), hop 123. A clip of 8003 samples then yields exactly
// 64 frames, and both dimensions divide by 16*alpha for alpha in {1,2,4}.
constexpr double kDefaultSampleRate = 8000.0;
constexpr int kDefaultWindowLen = 254;
constexpr int kDefaultHopLen = 123;
constexpr int kDefaultClipLen = 8003;  // window + 63*hop -> 64 frames

struct Waveform {
  std::vector<double> samples;
  double sample_rate = kDefaultSampleRate;

  std::int64_t size() const { return static_cast<std::int64_t>(samples.size()); }
};

struct ComplexSpectrogram {
  ComplexGrid bins;  // rows = window_len/2 + 1 frequencies, cols = frames
  int window_len = 0;
  int hop_len = 0;
  double sample_rate = 0.0;
};

struct MagnitudeSpectrogram {
  RealGrid bins;
  int window_len = 0;
  int hop_len = 0;
  double sample_rate = 0.0;
};

struct BinaryMask {
  Grid<std::uint8_t> bits;
  int source_index = 0;
};

namespace detail {

// Periodic Hann window, zero only at n = 0.
inline std::vector<double> hann_window(int n) {
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  }
  return w;
}

// Roots of unity table: roots[j] = exp(-2*pi*i*j/n).
inline std::vector<std::complex<double>> dft_roots(int n) {
  std::vector<std::complex<double>> roots(n);
  for (int j = 0; j < n; ++j) {
    double a = -2.0 * std::numbers::pi * j / n;
    roots[j] = {std::cos(a), std::sin(a)};
  }
  return roots;
}

}  // namespace detail

inline ComplexSpectrogram stft(const Waveform& w, int window_len, int hop_len) {
  if (window_len < 2 || window_len % 2 != 0) {
    throw ValueError("stft: window_len must be even and >= 2");
  }
  if (hop_len < 1 || hop_len > window_len / 2) {
    throw ValueError("stft: hop_len must be in [1, window_len/2]");
  }
  if (w.size() < window_len) {
    throw ValueError("signal too short");
  }
  const int n = window_len;
  const int bins = n / 2 + 1;
  const int frames = static_cast<int>((w.size() - n) / hop_len) + 1;

  const auto win = detail::hann_window(n);
  const auto roots = detail::dft_roots(n);

  ComplexSpectrogram s;
  s.bins = ComplexGrid(bins, frames);
  s.window_len = n;
  s.hop_len = hop_len;
  s.sample_rate = w.sample_rate;

  std::vector<double> frame(n);
  for (int t = 0; t < frames; ++t) {
    const double* x = w.samples.data() + static_cast<size_t>(t) * hop_len;
    for (int i = 0; i < n; ++i) frame[i] = x[i] * win[i];
    for (int k = 0; k < bins; ++k) {
      double re = 0.0, im = 0.0;
      int idx = 0;
      for (int i = 0; i < n; ++i) {
        re += frame[i] * roots[idx].real();
        im += frame[i] * roots[idx].imag();
        idx += k;
        if (idx >= n) idx -= n;
      }
      s.bins.at(k, t) = {re, im};
    }
  }
  return s;
}

// Weighted overlap-add synthesis: each inverse-DFT frame is re-windowed and
// the accumulated signal divided by the accumulated squared window, so an
// unmodified spectrogram reconstructs the input wherever the window sum is
// positive. Output covers (frames-1)*hop + window samples.
inline Waveform istft(const ComplexSpectrogram& s) {
  const int n = s.window_len;
  const int hop = s.hop_len;
  const int frames = s.bins.cols;
  if (n < 2 || n % 2 != 0 || hop < 1 || frames < 1 || s.bins.rows != n / 2 + 1) {
    throw ValueError("istft: invalid framing metadata");
  }
  const int out_len = (frames - 1) * hop + n;
  const auto win = detail::hann_window(n);
  const auto roots = detail::dft_roots(n);
  const int half = n / 2;

  std::vector<double> acc(out_len, 0.0);
  std::vector<double> norm(out_len, 0.0);
  std::vector<double> frame(n);

  for (int t = 0; t < frames; ++t) {
    // Real inverse DFT of the hermitian-extended half spectrum.
    for (int i = 0; i < n; ++i) {
      double v = s.bins.at(0, t).real();
      v += ((i % 2 == 0) ? 1.0 : -1.0) * s.bins.at(half, t).real();
      int idx = 0;
      for (int k = 1; k < half; ++k) {
        idx += i;
        if (idx >= n) idx -= n;
        // cos(2*pi*k*i/n) = roots[k*i%n].re, sin = -roots[...].im
        v += 2.0 * (s.bins.at(k, t).real() * roots[idx].real() +
                    s.bins.at(k, t).imag() * roots[idx].imag());
      }
      frame[i] = v / n;
    }
    const int base = t * hop;
    for (int i = 0; i < n; ++i) {
      acc[base + i] += win[i] * frame[i];
      norm[base + i] += win[i] * win[i];
    }
  }

  double max_norm = 0.0;
  for (double v : norm) max_norm = std::max(max_norm, v);
  const double tol = 1e-12 * max_norm;
  for (int i = 1; i + 1 < out_len; ++i) {
    if (norm[i] <= tol) throw ValueError("non-invertible framing");
  }

  Waveform out;
  out.sample_rate = s.sample_rate;
  out.samples.resize(out_len);
  for (int i = 0; i < out_len; ++i) {
    out.samples[i] = norm[i] > tol ? acc[i] / norm[i] : 0.0;
  }
  return out;
}

inline MagnitudeSpectrogram magnitude(const ComplexSpectrogram& s) {
  MagnitudeSpectrogram m;
  m.bins = RealGrid(s.bins.rows, s.bins.cols);
  m.window_len = s.window_len;
  m.hop_len = s.hop_len;
  m.sample_rate = s.sample_rate;
  for (std::int64_t i = 0; i < s.bins.size(); ++i) m.bins.v[i] = std::abs(s.bins.v[i]);
  return m;
}

// phi: non-overlapping mean pooling of alpha consecutive columns.
template <typename T>
Grid<T> temporal_downsample(const Grid<T>& g, int alpha) {
  if (alpha < 1) throw ValueError("temporal_downsample: alpha must be >= 1");
  if (g.cols % alpha != 0) throw ValueError("resolution mismatch");
  if (alpha == 1) return g;
  Grid<T> out(g.rows, g.cols / alpha);
  for (int r = 0; r < g.rows; ++r) {
    for (int c = 0; c < out.cols; ++c) {
      T acc{};
      for (int j = 0; j < alpha; ++j) acc += g.at(r, c * alpha + j);
      out.at(r, c) = acc / static_cast<double>(alpha);
    }
  }
  return out;
}

// phi^-1: nearest-neighbor repetition of each column alpha times.
template <typename T>
Grid<T> temporal_upsample(const Grid<T>& g, int alpha) {
  if (alpha < 1) throw ValueError("temporal_upsample: alpha must be >= 1");
  if (alpha == 1) return g;
  Grid<T> out(g.rows, g.cols * alpha);
  for (int r = 0; r < g.rows; ++r) {
    for (int c = 0; c < g.cols; ++c) {
      for (int j = 0; j < alpha; ++j) out.at(r, c * alpha + j) = g.at(r, c);
    }
  }
  return out;
}

// Samplewise sum, no renormalization. A single source is permitted so tests
// can exercise the degenerate case.
inline Waveform mix(const std::vector<Waveform>& sources) {
  if (sources.empty()) throw ValueError("mix: no sources");
  const auto len = sources[0].size();
  const double sr = sources[0].sample_rate;
  for (const auto& s : sources) {
    if (s.size() != len) throw ValueError("mix: length mismatch");
    if (s.sample_rate != sr) throw ValueError("mix: sample rate mismatch");
  }
  Waveform out;
  out.sample_rate = sr;
  out.samples.assign(static_cast<size_t>(len), 0.0);
  for (const auto& s : sources) {
    for (std::int64_t i = 0; i < len; ++i) out.samples[i] += s.samples[i];
  }
  return out;
}

// Ground-truth mask: bit is 1 iff source n is at least as loud as every other
// source in that bin. Exact ties set the bit for every tied source.
inline BinaryMask ideal_binary_mask(const std::vector<MagnitudeSpectrogram>& mags, int n) {
  if (mags.empty()) throw ValueError("ideal_binary_mask: no spectrograms");
  if (n < 0 || n >= static_cast<int>(mags.size())) {
    throw ValueError("ideal_binary_mask: source index out of range");
  }
  for (const auto& m : mags) {
    if (!m.bins.same_shape(mags[0].bins)) throw ShapeError("ideal_binary_mask: shape mismatch");
  }
  BinaryMask mask;
  mask.source_index = n;
  mask.bits = Grid<std::uint8_t>(mags[0].bins.rows, mags[0].bins.cols, 1);
  for (size_t m = 0; m < mags.size(); ++m) {
    if (static_cast<int>(m) == n) continue;
    for (std::int64_t i = 0; i < mask.bits.size(); ++i) {
      if (mags[n].bins.v[i] < mags[m].bins.v[i]) mask.bits.v[i] = 0;
    }
  }
  return mask;
}

// Per-bin magnitude scaling with the mixture phase kept.
inline ComplexSpectrogram apply_mask(const RealGrid& mask, const ComplexSpectrogram& mixture) {
  if (mask.rows != mixture.bins.rows || mask.cols != mixture.bins.cols) {
    throw ShapeError("apply_mask: shape mismatch");
  }
  ComplexSpectrogram out = mixture;
  for (std::int64_t i = 0; i < out.bins.size(); ++i) out.bins.v[i] *= mask.v[i];
  return out;
}

}  // namespace vsep
