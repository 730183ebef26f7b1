#pragma once

#include <cstring>
#include <fstream>

#include "evio/common.hpp"

namespace evio {

// Single-channel float raster, row-major. Shared by time surfaces, simulated
// intensity images, and the tracker pyramids.
struct Grid {
  int width = 0, height = 0;
  std::vector<float> values;

  Grid() = default;
  Grid(int w, int h, float fill = 0.f)
      : width(w), height(h), values(std::size_t(w) * std::size_t(h), fill) {}

  float& at(int x, int y) { return values[std::size_t(y) * width + x]; }
  float at(int x, int y) const { return values[std::size_t(y) * width + x]; }
  bool inside(double x, double y, double margin = 0.0) const {
    return x >= margin && y >= margin && x <= width - 1 - margin && y <= height - 1 - margin;
  }

  // Bilinear sample; caller guarantees (x, y) within [0, w-1] x [0, h-1].
  float sample(double x, double y) const {
    const int x0 = std::min(int(x), width - 2 >= 0 ? width - 2 : 0);
    const int y0 = std::min(int(y), height - 2 >= 0 ? height - 2 : 0);
    const double fx = x - x0, fy = y - y0;
    const float v00 = at(x0, y0), v10 = at(x0 + 1, y0);
    const float v01 = at(x0, y0 + 1), v11 = at(x0 + 1, y0 + 1);
    return float((1 - fy) * ((1 - fx) * v00 + fx * v10) + fy * ((1 - fx) * v01 + fx * v11));
  }

  float min_value() const {
    float m = values.empty() ? 0.f : values[0];
    for (float v : values) m = std::min(m, v);
    return m;
  }
  float max_value() const {
    float m = values.empty() ? 0.f : values[0];
    for (float v : values) m = std::max(m, v);
    return m;
  }
};

// Binary raster format shared by dataset records and debug dumps:
// u32 H, u32 W (little endian), then H*W little-endian float32 row-major.
inline void save_grid(const Grid& g, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(bool(out), "cannot write grid file: " + path);
  const std::uint32_t h = std::uint32_t(g.height), w = std::uint32_t(g.width);
  auto put_u32 = [&](std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xff);
    out.write(b, 4);
  };
  put_u32(h);
  put_u32(w);
  for (float f : g.values) {
    std::uint32_t u;
    static_assert(sizeof(float) == 4);
    std::memcpy(&u, &f, 4);
    put_u32(u);
  }
  require(bool(out), "grid write failed: " + path);
}

inline Grid load_grid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), "cannot read grid file: " + path);
  auto get_u32 = [&](std::uint32_t& v) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4) return false;
    v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return true;
  };
  std::uint32_t h = 0, w = 0;
  require(get_u32(h) && get_u32(w) && h >= 1 && w >= 1, "bad grid header: " + path);
  Grid g(static_cast<int>(w), static_cast<int>(h));
  for (auto& f : g.values) {
    std::uint32_t u;
    require(get_u32(u), "truncated grid file: " + path);
    std::memcpy(&f, &u, 4);
  }
  return g;
}

}  // namespace evio
