#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace rudd {

// Dense row-major tensor. Scalar type selectable (float for runs, double
// for gradient-check suites).
template <class R>
struct Tensor {
  std::vector<int> shape;
  std::vector<R> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), R(0));
  }
  Tensor(std::vector<int> s, std::vector<R> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape)) throw std::invalid_argument("tensor: element count != product of dims");
  }

  static size_t numel_of(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) {
      if (d <= 0) throw std::invalid_argument("tensor: non-positive dim");
      n *= size_t(d);
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, R v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(R v) { return Tensor({1}, {v}); }

  size_t numel() const { return data.size(); }
  int rank() const { return int(shape.size()); }
  int dim(int i) const { return shape[size_t(i)]; }

  R& operator[](size_t i) { return data[i]; }
  const R& operator[](size_t i) const { return data[i]; }

  // 2-D / 3-D / 4-D row-major accessors
  R& at2(int i, int j) { return data[size_t(i) * shape[1] + j]; }
  const R& at2(int i, int j) const { return data[size_t(i) * shape[1] + j]; }
  R& at3(int i, int j, int k) { return data[(size_t(i) * shape[1] + j) * shape[2] + k]; }
  const R& at3(int i, int j, int k) const { return data[(size_t(i) * shape[1] + j) * shape[2] + k]; }
  R& at4(int i, int j, int k, int l) {
    return data[((size_t(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  const R& at4(int i, int j, int k, int l) const {
    return data[((size_t(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (R v : data)
      if (!std::isfinite(double(v))) return false;
    return true;
  }
};

template <class R>
inline std::string shape_str(const Tensor<R>& t) {
  std::string s = "[";
  for (size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(t.shape[i]);
  }
  return s + "]";
}

// ---------------------------------------------------------------------------
// Portable tensor file: magic "RUT1", u32 rank, u32 dims[], then little-endian
// 32-bit reals row-major.
// ---------------------------------------------------------------------------

namespace detail {
inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("tensor file: truncated");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}
inline void put_f32(std::ostream& os, float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(os, v);
}
inline float get_f32(std::istream& is) {
  uint32_t v = get_u32(is);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}
}  // namespace detail

template <class R>
inline void write_tensor(std::ostream& os, const Tensor<R>& t) {
  os.write("RUT1", 4);
  detail::put_u32(os, uint32_t(t.shape.size()));
  for (int d : t.shape) detail::put_u32(os, uint32_t(d));
  for (R v : t.data) detail::put_f32(os, float(v));
}

template <class R>
inline Tensor<R> read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "RUT1", 4) != 0) throw std::runtime_error("tensor file: bad magic");
  uint32_t rank = detail::get_u32(is);
  if (rank > 8) throw std::runtime_error("tensor file: implausible rank");
  std::vector<int> shape(rank);
  for (auto& d : shape) d = int(detail::get_u32(is));
  Tensor<R> t(shape);
  for (auto& v : t.data) v = R(detail::get_f32(is));
  return t;
}

template <class R>
inline void save_tensor(const std::string& path, const Tensor<R>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path);
  write_tensor(os, t);
}

template <class R>
inline Tensor<R> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_tensor<R>(is);
}

}  // namespace rudd
