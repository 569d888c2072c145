#ifndef TDSA_TENSOR_HPP_
#define TDSA_TENSOR_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tdsa/error.hpp"

namespace tdsa {

// batch x channels x height x width
struct Shape {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  std::size_t numel() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << n << "x" << c << "x" << h << "x" << w;
    return os.str();
  }
};

// Dense NCHW tensor. Plain value type; gradient bookkeeping lives on the Tape.
template <typename T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() = default;
  explicit Tensor4(Shape s, T fill = T(0)) : shape_(s), data_(s.numel(), fill) {}
  Tensor4(Shape s, std::vector<T> data) : shape_(s), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw DimensionError("Tensor4: data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_.str());
    }
  }
  Tensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
      : Tensor4(Shape{n, c, h, w}, fill) {}

  static Tensor4 scalar(T v) { return Tensor4(Shape{1, 1, 1, 1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t n() const { return shape_.n; }
  std::size_t c() const { return shape_.c; }
  std::size_t h() const { return shape_.h; }
  std::size_t w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t index(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) const {
    return ((b * shape_.c + ch) * shape_.h + y) * shape_.w + x;
  }
  T& at(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) {
    return data_[index(b, ch, y, x)];
  }
  const T& at(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) const {
    return data_[index(b, ch, y, x)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // One h*w plane.
  std::span<T> plane(std::size_t b, std::size_t ch) {
    return {data_.data() + index(b, ch, 0, 0), shape_.plane()};
  }
  std::span<const T> plane(std::size_t b, std::size_t ch) const {
    return {data_.data() + index(b, ch, 0, 0), shape_.plane()};
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  T item() const {
    if (data_.size() != 1) throw DimensionError("Tensor4::item on shape " + shape_.str());
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  // Same shape, different value type.
  template <typename U>
  Tensor4<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor4<U>(shape_, std::move(out));
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

// ---------------------------------------------------------------------------
// Binary dump format: magic "T4\0\0", four little-endian u32 dims n, c, h, w
// (20 header bytes in total), then n*c*h*w little-endian float32 values.

namespace detail {

inline void put_u32le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32le(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("T4: truncated stream");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

inline void put_f32le(std::ostream& os, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32le(os, u);
}

inline float get_f32le(std::istream& is) {
  std::uint32_t u = get_u32le(is);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace detail

template <typename T>
void write_t4(std::ostream& os, const Tensor4<T>& t) {
  os.write("T4\0\0", 4);
  const Shape& s = t.shape();
  for (std::size_t d : {s.n, s.c, s.h, s.w}) detail::put_u32le(os, static_cast<std::uint32_t>(d));
  for (T v : t.data()) detail::put_f32le(os, static_cast<float>(v));
}

template <typename T>
Tensor4<T> read_t4(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "T4\0\0", 4) != 0) {
    throw IoError("T4: bad magic");
  }
  Shape s;
  s.n = detail::get_u32le(is);
  s.c = detail::get_u32le(is);
  s.h = detail::get_u32le(is);
  s.w = detail::get_u32le(is);
  Tensor4<T> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(detail::get_f32le(is));
  return t;
}

template <typename T>
void save_t4(const std::string& path, const Tensor4<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_t4(os, t);
  if (!os) throw IoError("write failed: " + path);
}

template <typename T>
Tensor4<T> load_t4(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_t4<T>(is);
}

}  // namespace tdsa

#endif  // TDSA_TENSOR_HPP_
