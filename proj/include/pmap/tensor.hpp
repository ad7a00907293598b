#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "pmap/common.hpp"

namespace pmap {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

// Dense row-major n-dimensional array. T is float or double; all neural
// computation runs on these.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    for (int64_t e : shape_)
      if (e <= 0) throw ShapeError("Tensor: non-positive extent in " + shape_str(shape_));
    data_.assign(shape_numel(shape_), T(0));
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
      throw ShapeError("Tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t extent(int axis) const { return shape_[static_cast<size_t>(axis)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // Rank-specific accessors for the common cases.
  T& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  const T& at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  T& at(int64_t i, int64_t j, int64_t k) {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  const T& at(int64_t i, int64_t j, int64_t k) const {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(s) +
                       " changes element count");
    return Tensor(std::move(s), data_);
  }

  // In-place variant; no data copy.
  void reshape(Shape s) {
    if (shape_numel(s) != numel())
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(s) +
                       " changes element count");
    shape_ = std::move(s);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out = Tensor<U>(shape_);
    for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
    return out;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
inline bool all_finite(const Tensor<T>& t) {
  for (int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(static_cast<double>(t[i]))) return false;
  return true;
}

template <typename T>
inline void require_finite(const Tensor<T>& t, const char* what) {
  if (!all_finite(t)) throw NumericError(std::string("non-finite values in ") + what);
}

// --- Tensor file format ---------------------------------------------------
// Magic "PMTN", u32 LE rank, rank x u32 LE extents, row-major f32 LE data.

namespace detail {
inline void put_u32_le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw ParseError("tensor file truncated");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}
}  // namespace detail

template <typename T>
inline void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write("PMTN", 4);
  detail::put_u32_le(os, static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i)
    detail::put_u32_le(os, static_cast<uint32_t>(t.extent(i)));
  for (int64_t i = 0; i < t.numel(); ++i) {
    float f = static_cast<float>(t[i]);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32_le(os, bits);
  }
}

template <typename T>
inline void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  write_tensor(os, t);
  if (!os) throw DataError("write failed: " + path);
}

template <typename T>
inline Tensor<T> read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PMTN", 4) != 0)
    throw ParseError("bad tensor file magic (expected PMTN)");
  uint32_t rank = detail::get_u32_le(is);
  if (rank > 8) throw ParseError("tensor rank " + std::to_string(rank) + " too large");
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i) shape[i] = detail::get_u32_le(is);
  Tensor<T> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) {
    uint32_t bits = detail::get_u32_le(is);
    float f;
    std::memcpy(&f, &bits, 4);
    t[i] = static_cast<T>(f);
  }
  return t;
}

template <typename T>
inline Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  return read_tensor<T>(is);
}

}  // namespace pmap
