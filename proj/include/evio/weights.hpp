#pragma once

#include <cstring>
#include <fstream>
#include <map>

#include "evio/layers.hpp"

namespace evio {

// Named-tensor container with a fixed binary format:
//   magic "SEIOW1", then per tensor: name length (u16 LE), UTF-8 name,
//   rank (u8), dims (u32 LE each), values as little-endian float32.
// Values quantize to float32 on save; loading widens back to double, so
// save -> load -> save is byte-identical.
class WeightStore {
 public:
  void put(const std::string& name, Tensor t) {
    require(!name.empty() && name.size() < 65536, "weight name length out of range");
    const bool fresh = tensors_.emplace(name, std::move(t)).second;
    require(fresh, "duplicate weight name: " + name);
  }
  bool has(const std::string& name) const { return tensors_.count(name) > 0; }
  const Tensor& get(const std::string& name) const {
    auto it = tensors_.find(name);
    require(it != tensors_.end(), "missing weight: " + name);
    return it->second;
  }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  std::size_t count() const { return tensors_.size(); }

  static WeightStore from_registry(const ParamRegistry& reg) {
    WeightStore ws;
    for (const auto& item : reg.items) ws.put(item.name, *item.tensor);
    return ws;
  }

  // Copies stored tensors into the registry and rounds them through float32,
  // matching what a save/load round trip would produce.
  void apply_to_registry(const ParamRegistry& reg) const {
    for (const auto& item : reg.items) {
      const Tensor& src = get(item.name);
      require(src.shape() == item.tensor->shape(),
              "weight shape mismatch for " + item.name);
      *item.tensor = src;
      quantize_f32(*item.tensor);
    }
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    require(bool(out), "cannot open weight file for writing: " + path);
    out.write(kMagic, 6);
    for (const auto& [name, t] : tensors_) {
      write_u16(out, std::uint16_t(name.size()));
      out.write(name.data(), std::streamsize(name.size()));
      out.put(char(t.rank()));
      for (int d : t.shape()) write_u32(out, std::uint32_t(d));
      for (double v : t.vec()) write_f32(out, float(v));
    }
    require(bool(out), "weight file write failed: " + path);
  }

  static WeightStore load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(bool(in), "cannot open weight file: " + path);
    char magic[6];
    in.read(magic, 6);
    require(in.gcount() == 6 && std::memcmp(magic, kMagic, 6) == 0,
            "bad weight file magic: " + path);
    WeightStore ws;
    while (true) {
      std::uint16_t nlen;
      if (!read_u16(in, nlen)) break;
      std::string name(nlen, '\0');
      in.read(name.data(), nlen);
      require(in.gcount() == nlen, "truncated weight name");
      int rank = in.get();
      require(rank != EOF && rank >= 1, "truncated weight rank");
      std::vector<int> shape(static_cast<std::size_t>(rank), 0);
      for (auto& d : shape) {
        std::uint32_t u;
        require(read_u32(in, u) && u >= 1, "truncated weight dims");
        d = int(u);
      }
      Tensor t(shape);
      for (auto& v : t.vec()) {
        float f;
        require(read_f32(in, f), "truncated weight values");
        v = double(f);
      }
      ws.put(name, std::move(t));
    }
    return ws;
  }

  static void quantize_f32(Tensor& t) {
    for (auto& v : t.vec()) v = double(float(v));
  }

 private:
  static constexpr const char* kMagic = "SEIOW1";

  static void write_u16(std::ostream& os, std::uint16_t v) {
    char b[2] = {char(v & 0xff), char(v >> 8)};
    os.write(b, 2);
  }
  static void write_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xff);
    os.write(b, 4);
  }
  static void write_f32(std::ostream& os, float f) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    write_u32(os, u);
  }
  static bool read_u16(std::istream& is, std::uint16_t& v) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    if (is.gcount() != 2) return false;
    v = std::uint16_t(b[0] | (b[1] << 8));
    return true;
  }
  static bool read_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (is.gcount() != 4) return false;
    v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return true;
  }
  static bool read_f32(std::istream& is, float& f) {
    std::uint32_t u;
    if (!read_u32(is, u)) return false;
    std::memcpy(&f, &u, 4);
    return true;
  }

  std::map<std::string, Tensor> tensors_;
};

}  // namespace evio
