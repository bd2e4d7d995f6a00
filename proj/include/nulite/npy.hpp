#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nulite {

// Minimal .npy reader/writer covering the dtypes the PanNuke distribution
// uses: unsigned/signed ints, f4/f8, and little-endian UCS4 strings (<U#).
struct NpyArray {
  std::string descr;  // e.g. "<f8", "|u1", "<U20"
  std::vector<int64_t> shape;
  std::vector<uint8_t> raw;

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }

  int64_t item_bytes() const {
    char kind = descr[descr.size() >= 2 ? 1 : 0];
    int64_t width = std::stoll(descr.substr(2));
    return kind == 'U' ? width * 4 : width;
  }

  // Numeric read with conversion to double.
  double get(int64_t flat) const {
    const uint8_t* p = raw.data() + flat * item_bytes();
    char kind = descr[1];
    int64_t w = item_bytes();
    switch (kind) {
      case 'u':
        if (w == 1) return *p;
        if (w == 2) { uint16_t v; std::memcpy(&v, p, 2); return v; }
        if (w == 4) { uint32_t v; std::memcpy(&v, p, 4); return v; }
        { uint64_t v; std::memcpy(&v, p, 8); return double(v); }
      case 'i':
        if (w == 1) return *reinterpret_cast<const int8_t*>(p);
        if (w == 2) { int16_t v; std::memcpy(&v, p, 2); return v; }
        if (w == 4) { int32_t v; std::memcpy(&v, p, 4); return v; }
        { int64_t v; std::memcpy(&v, p, 8); return double(v); }
      case 'f':
        if (w == 4) { float v; std::memcpy(&v, p, 4); return v; }
        { double v; std::memcpy(&v, p, 8); return v; }
      default:
        throw std::runtime_error("npy: numeric access on dtype " + descr);
    }
  }

  // UCS4 string element.
  std::string get_string(int64_t flat) const {
    if (descr[1] != 'U') throw std::runtime_error("npy: not a string array");
    int64_t chars = std::stoll(descr.substr(2));
    const uint8_t* p = raw.data() + flat * chars * 4;
    std::string s;
    for (int64_t i = 0; i < chars; ++i) {
      uint32_t cp;
      std::memcpy(&cp, p + i * 4, 4);
      if (cp == 0) break;
      s.push_back(char(cp));  // dataset names are plain ASCII
    }
    return s;
  }
};

inline NpyArray npy_load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  char magic[6];
  is.read(magic, 6);
  if (std::memcmp(magic, "\x93NUMPY", 6) != 0) throw std::runtime_error("not npy: " + path);
  uint8_t ver[2];
  is.read(reinterpret_cast<char*>(ver), 2);
  uint32_t hlen = 0;
  if (ver[0] == 1) {
    uint16_t h;
    is.read(reinterpret_cast<char*>(&h), 2);
    hlen = h;
  } else {
    is.read(reinterpret_cast<char*>(&hlen), 4);
  }
  std::string header(hlen, '\0');
  is.read(header.data(), hlen);

  NpyArray a;
  auto find_value = [&header](const std::string& key) {
    size_t k = header.find("'" + key + "'");
    if (k == std::string::npos) throw std::runtime_error("npy header missing " + key);
    size_t colon = header.find(':', k);
    return colon + 1;
  };
  {
    size_t p = find_value("descr");
    size_t q1 = header.find('\'', p);
    size_t q2 = header.find('\'', q1 + 1);
    a.descr = header.substr(q1 + 1, q2 - q1 - 1);
  }
  {
    size_t p = find_value("fortran_order");
    if (header.find("True", p) < header.find(',', p))
      throw std::runtime_error("npy: fortran order unsupported");
  }
  {
    size_t p = find_value("shape");
    size_t l = header.find('(', p);
    size_t r = header.find(')', l);
    std::string dims = header.substr(l + 1, r - l - 1);
    size_t pos = 0;
    while (pos < dims.size()) {
      while (pos < dims.size() && !isdigit(dims[pos])) ++pos;
      if (pos >= dims.size()) break;
      size_t end = pos;
      while (end < dims.size() && isdigit(dims[end])) ++end;
      a.shape.push_back(std::stoll(dims.substr(pos, end - pos)));
      pos = end;
    }
  }
  if (a.descr[0] == '>')
    throw std::runtime_error("npy: big-endian data unsupported");
  a.raw.resize(size_t(a.numel() * a.item_bytes()));
  is.read(reinterpret_cast<char*>(a.raw.data()), std::streamsize(a.raw.size()));
  if (!is) throw std::runtime_error("npy truncated: " + path);
  return a;
}

inline void npy_save(const std::string& path, const std::string& descr,
                     const std::vector<int64_t>& shape, const void* data, size_t bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path);
  std::string dict = "{'descr': '" + descr + "', 'fortran_order': False, 'shape': (";
  for (size_t i = 0; i < shape.size(); ++i) dict += std::to_string(shape[i]) + ", ";
  dict += "), }";
  size_t total = 6 + 2 + 2 + dict.size() + 1;
  size_t pad = (64 - total % 64) % 64;
  dict += std::string(pad, ' ');
  dict += '\n';
  os.write("\x93NUMPY\x01\x00", 8);
  uint16_t hlen = uint16_t(dict.size());
  os.write(reinterpret_cast<char*>(&hlen), 2);
  os.write(dict.data(), std::streamsize(dict.size()));
  os.write(reinterpret_cast<const char*>(data), std::streamsize(bytes));
}

}  // namespace nulite
