#pragma once

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "sfmlab/core.hpp"

namespace sfmlab::io {

// Little-endian grayscale PFM ("Pf", scale -1.0). Lossless enough for attack
// round-trips; PNG is quantized and only used for previews.
inline void write_pfm(const std::string& path, const ImageBuffer& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("write_pfm: cannot open " + path);
  f << "Pf\n" << img.width << " " << img.height << "\n-1.0\n";
  // PFM stores rows bottom-up.
  std::vector<float> row(img.width);
  for (int y = img.height - 1; y >= 0; --y) {
    for (int x = 0; x < img.width; ++x) row[x] = static_cast<float>(img.at(x, y));
    f.write(reinterpret_cast<const char*>(row.data()), sizeof(float) * row.size());
  }
  if (!f) throw Error("write_pfm: write failed for " + path);
}

inline ImageBuffer read_pfm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("read_pfm: cannot open " + path);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  f >> magic >> w >> h >> scale;
  if (magic != "Pf" || w <= 0 || h <= 0) throw Error("read_pfm: not a grayscale PFM: " + path);
  if (scale > 0) throw Error("read_pfm: big-endian PFM not supported: " + path);
  f.get();  // single whitespace after header
  ImageBuffer img(w, h);
  std::vector<float> row(w);
  for (int y = h - 1; y >= 0; --y) {
    f.read(reinterpret_cast<char*>(row.data()), sizeof(float) * row.size());
    if (!f) throw Error("read_pfm: truncated file: " + path);
    for (int x = 0; x < w; ++x) img.at(x, y) = row[x];
  }
  return img;
}

namespace detail {

inline void append_be32(std::vector<unsigned char>& out, uint32_t v) {
  out.push_back((v >> 24) & 0xff);
  out.push_back((v >> 16) & 0xff);
  out.push_back((v >> 8) & 0xff);
  out.push_back(v & 0xff);
}

inline void append_chunk(std::vector<unsigned char>& out, const char type[4],
                         const std::vector<unsigned char>& payload) {
  append_be32(out, static_cast<uint32_t>(payload.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const uint32_t crc = static_cast<uint32_t>(
      ::crc32(0, out.data() + start, static_cast<uInt>(out.size() - start)));
  append_be32(out, crc);
}

}  // namespace detail

// Grayscale PNG, 8 or 16 bits per sample. Values are clamped to [0,1] before
// quantization.
inline void write_png_gray(const std::string& path, const ImageBuffer& img,
                           int bit_depth = 8) {
  if (bit_depth != 8 && bit_depth != 16)
    throw ValidationError("write_png_gray: bit depth must be 8 or 16");
  const int w = img.width, h = img.height;
  const int bytes_per = bit_depth / 8;
  std::vector<unsigned char> raw;
  raw.reserve(static_cast<size_t>(h) * (1 + static_cast<size_t>(w) * bytes_per));
  const double maxval = bit_depth == 8 ? 255.0 : 65535.0;
  for (int y = 0; y < h; ++y) {
    raw.push_back(0);  // filter: none
    for (int x = 0; x < w; ++x) {
      const double v = std::clamp(img.at(x, y), 0.0, 1.0);
      const uint32_t q = static_cast<uint32_t>(std::lround(v * maxval));
      if (bit_depth == 16) raw.push_back((q >> 8) & 0xff);
      raw.push_back(q & 0xff);
    }
  }
  uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> comp(comp_size);
  if (compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw Error("write_png_gray: zlib compression failed");
  comp.resize(comp_size);

  std::vector<unsigned char> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<unsigned char> ihdr;
  detail::append_be32(ihdr, static_cast<uint32_t>(w));
  detail::append_be32(ihdr, static_cast<uint32_t>(h));
  ihdr.push_back(static_cast<unsigned char>(bit_depth));
  ihdr.push_back(0);  // grayscale
  ihdr.push_back(0);  // deflate
  ihdr.push_back(0);  // filter method 0
  ihdr.push_back(0);  // no interlace
  detail::append_chunk(out, "IHDR", ihdr);
  detail::append_chunk(out, "IDAT", comp);
  detail::append_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("write_png_gray: cannot open " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error("write_png_gray: write failed for " + path);
}

inline uint64_t file_hash(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("file_hash: cannot open " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (f.read(buf, sizeof(buf)) || f.gcount() > 0)
    h = fnv1a(buf, static_cast<size_t>(f.gcount()), h);
  return h;
}

}  // namespace sfmlab::io
