#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "vsep/common.hpp"
#include "vsep/grid.hpp"

namespace vsep {

struct MalformedPpm : IoError {
  using IoError::IoError;
};

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
};

namespace detail {

inline int ppm_token(std::istream& in) {
  // Skips whitespace and '#' comments, then reads one non-negative integer.
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  if (c == EOF || !std::isdigit(c)) return -1;
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    if (v > 1 << 24) return -1;
    c = in.get();
  }
  return v;  // consumed exactly one trailing separator byte
}

}  // namespace detail

inline Image load_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open PPM file: " + path);
  char m0 = 0, m1 = 0;
  f.get(m0);
  f.get(m1);
  if (m0 != 'P' || m1 != '6') throw MalformedPpm("malformed PPM: not a P6 file: " + path);
  const int w = detail::ppm_token(f);
  const int h = detail::ppm_token(f);
  const int maxval = detail::ppm_token(f);
  if (w <= 0 || h <= 0) throw MalformedPpm("malformed PPM: bad dimensions in " + path);
  if (maxval != 255) throw MalformedPpm("malformed PPM: need maxval 255 in " + path);
  Image img;
  img.width = w;
  img.height = h;
  img.rgb.resize(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.rgb.size())) {
    throw MalformedPpm("malformed PPM: truncated pixel data in " + path);
  }
  return img;
}

inline void save_ppm(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write PPM file: " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
  if (!f) throw IoError("short write to PPM file: " + path);
}

// Grayscale dump of a [0,1] grid, used for mask and localization images.
inline void save_pgm(const RealGrid& g, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write PGM file: " + path);
  f << "P5\n" << g.cols << " " << g.rows << "\n255\n";
  for (int r = 0; r < g.rows; ++r) {
    for (int c = 0; c < g.cols; ++c) {
      double v = g.at(r, c);
      v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
      f.put(static_cast<char>(static_cast<unsigned char>(v * 255.0 + 0.5)));
    }
  }
  if (!f) throw IoError("short write to PGM file: " + path);
}

}  // namespace vsep
