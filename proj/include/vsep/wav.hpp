#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "vsep/dsp.hpp"

namespace vsep {

struct MalformedWav : IoError {
  using IoError::IoError;
};
struct UnsupportedWavEncoding : IoError {
  using IoError::IoError;
};
struct UnsupportedWavChannels : IoError {
  using IoError::IoError;
};

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}
inline std::uint16_t read_u16(const unsigned char* p) {
  return std::uint16_t(p[0] | p[1] << 8);
}
inline void put_u32(std::string& s, std::uint32_t v) {
  s.push_back(char(v & 0xff));
  s.push_back(char((v >> 8) & 0xff));
  s.push_back(char((v >> 16) & 0xff));
  s.push_back(char((v >> 24) & 0xff));
}
inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(char(v & 0xff));
  s.push_back(char((v >> 8) & 0xff));
}

}  // namespace detail

// Reads canonical 16-bit PCM mono RIFF files. Anything compressed,
// multi-channel, or not 16-bit is rejected with a typed error.
inline Waveform load_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open WAV file: " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 ||
      std::memcmp(buf.data() + 8, "WAVE", 4) != 0) {
    throw MalformedWav("malformed WAV: missing RIFF/WAVE header in " + path);
  }

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t sample_rate = 0;
  const unsigned char* data = nullptr;
  std::uint32_t data_len = 0;

  size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const unsigned char* hdr = buf.data() + pos;
    std::uint32_t chunk_len = detail::read_u32(hdr + 4);
    pos += 8;
    if (pos + chunk_len > buf.size()) throw MalformedWav("malformed WAV: truncated chunk in " + path);
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (chunk_len < 16) throw MalformedWav("malformed WAV: short fmt chunk in " + path);
      const unsigned char* p = buf.data() + pos;
      format = detail::read_u16(p);
      channels = detail::read_u16(p + 2);
      sample_rate = detail::read_u32(p + 4);
      bits = detail::read_u16(p + 14);
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = buf.data() + pos;
      data_len = chunk_len;
    }
    pos += chunk_len + (chunk_len & 1);  // chunks are word-aligned
  }

  if (!have_fmt || data == nullptr) throw MalformedWav("malformed WAV: missing fmt/data chunk in " + path);
  if (format != 1) throw UnsupportedWavEncoding("unsupported WAV encoding (not PCM) in " + path);
  if (channels != 1) throw UnsupportedWavChannels("unsupported WAV channel count (need mono) in " + path);
  if (bits != 16) throw UnsupportedWavEncoding("unsupported WAV sample width (need 16-bit) in " + path);
  if (sample_rate == 0) throw MalformedWav("malformed WAV: zero sample rate in " + path);

  Waveform w;
  w.sample_rate = static_cast<double>(sample_rate);
  const std::uint32_t n = data_len / 2;
  w.samples.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::int16_t s = static_cast<std::int16_t>(detail::read_u16(data + 2 * i));
    w.samples[i] = s / 32768.0;
  }
  return w;
}

inline void save_wav(const Waveform& w, const std::string& path) {
  if (w.sample_rate <= 0) throw ValueError("save_wav: sample rate must be positive");
  const std::uint32_t n = static_cast<std::uint32_t>(w.samples.size());
  std::string out;
  out.reserve(44 + 2 * n);
  out.append("RIFF");
  detail::put_u32(out, 36 + 2 * n);
  out.append("WAVE");
  out.append("fmt ");
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);  // PCM
  detail::put_u16(out, 1);  // mono
  const std::uint32_t sr = static_cast<std::uint32_t>(std::lround(w.sample_rate));
  detail::put_u32(out, sr);
  detail::put_u32(out, sr * 2);
  detail::put_u16(out, 2);
  detail::put_u16(out, 16);
  out.append("data");
  detail::put_u32(out, 2 * n);
  for (std::uint32_t i = 0; i < n; ++i) {
    // Scale by 32768 so that k/32768 content round-trips exactly.
    long q = std::lround(w.samples[i] * 32768.0);
    q = std::clamp(q, -32768L, 32767L);
    detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write WAV file: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write to WAV file: " + path);
}

}  // namespace vsep
