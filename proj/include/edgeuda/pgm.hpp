#pragma once

// Binary PGM (P5) reading and writing. Maxval <= 255 stores one byte per
// pixel; larger maxvals store two bytes, most significant first.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "edgeuda/grid.hpp"

namespace edgeuda {

struct PgmImage {
  Grid<std::uint16_t> pixels;
  std::uint32_t maxval = 255;
};

namespace detail {

inline std::uint32_t pgm_header_int(std::istream& is, const std::string& what) {
  int c = is.peek();
  while (c != EOF) {
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      break;
    }
    c = is.peek();
  }
  std::uint32_t v = 0;
  if (!(is >> v)) throw DataError("pgm: malformed header (" + what + ")");
  return v;
}

}  // namespace detail

inline PgmImage read_pgm(std::istream& is) {
  char magic[2];
  if (!is.read(magic, 2) || magic[0] != 'P' || magic[1] != '5') throw DataError("pgm: not a binary P5 file");
  const auto w = detail::pgm_header_int(is, "width");
  const auto h = detail::pgm_header_int(is, "height");
  const auto maxval = detail::pgm_header_int(is, "maxval");
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw DataError("pgm: invalid dimensions or maxval");
  if (!std::isspace(is.get())) throw DataError("pgm: missing whitespace after header");
  PgmImage img{Grid<std::uint16_t>(h, w), maxval};
  const std::size_t bpp = maxval > 255 ? 2 : 1;
  std::string raw(img.pixels.size() * bpp, '\0');
  if (!is.read(raw.data(), static_cast<std::streamsize>(raw.size()))) throw DataError("pgm: truncated pixel data");
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    std::uint32_t v = static_cast<unsigned char>(raw[i * bpp]);
    if (bpp == 2) v = (v << 8) | static_cast<unsigned char>(raw[i * bpp + 1]);
    if (v > maxval) throw DataError("pgm: pixel exceeds maxval");
    img.pixels.values[i] = static_cast<std::uint16_t>(v);
  }
  return img;
}

inline void write_pgm(std::ostream& os, const PgmImage& img) {
  os << "P5\n" << img.pixels.width << ' ' << img.pixels.height << '\n' << img.maxval << '\n';
  const bool wide = img.maxval > 255;
  for (auto v : img.pixels.values) {
    if (wide) os.put(static_cast<char>(v >> 8));
    os.put(static_cast<char>(v & 0xff));
  }
  if (!os) throw DataError("pgm: write failed");
}

inline PgmImage read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  try {
    return read_pgm(is);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline void write_pgm(const std::string& path, const PgmImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_pgm(os, img);
}

/// [-1,1] intensities to 16-bit gray.
inline PgmImage image_to_pgm(const FloatMap& img) {
  PgmImage out{Grid<std::uint16_t>(img.height, img.width), 65535};
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(img.values[i], -1.0, 1.0);
    out.pixels.values[i] = static_cast<std::uint16_t>(std::lround((v + 1.0) * 0.5 * 65535.0));
  }
  return out;
}

/// Class index stored directly as the gray level.
inline PgmImage labels_to_pgm(const LabelMap& label) {
  PgmImage out{Grid<std::uint16_t>(label.height, label.width), 255};
  for (std::size_t i = 0; i < label.size(); ++i) out.pixels.values[i] = label.values[i];
  return out;
}

inline LabelMap pgm_to_labels(const PgmImage& img) {
  LabelMap out(img.pixels.height, img.pixels.width);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (img.pixels.values[i] > 255) throw DataError("pgm: label value exceeds 255");
    out.values[i] = static_cast<std::uint8_t>(img.pixels.values[i]);
  }
  return out;
}

/// Probabilities (or binary maps) in [0,1] to 8-bit gray.
inline PgmImage unit_to_pgm(const FloatMap& m) {
  PgmImage out{Grid<std::uint16_t>(m.height, m.width), 255};
  for (std::size_t i = 0; i < m.size(); ++i)
    out.pixels.values[i] = static_cast<std::uint16_t>(std::lround(std::clamp(m.values[i], 0.0, 1.0) * 255.0));
  return out;
}

inline PgmImage edges_to_pgm(const EdgeMap& e) {
  PgmImage out{Grid<std::uint16_t>(e.height, e.width), 255};
  for (std::size_t i = 0; i < e.size(); ++i) out.pixels.values[i] = e.values[i] ? 255 : 0;
  return out;
}

}  // namespace edgeuda
