#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <new>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace semiseg {

/// Spatial extent in (depth, height, width) order.
struct Extent3 {
  int d = 0;
  int h = 0;
  int w = 0;

  constexpr std::size_t voxels() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  constexpr int operator[](int axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }
  constexpr int& operator[](int axis) { return axis == 0 ? d : (axis == 1 ? h : w); }
  constexpr bool operator==(const Extent3&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << d << "x" << h << "x" << w;
    return os.str();
  }
};

using Vec3 = std::array<double, 3>;

/// Allocator with a fixed 64-byte alignment. Vectorized reductions pick their
/// peeling split from the buffer address, so a fixed alignment keeps results
/// bit-identical from one allocation to the next.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense channels x depth x height x width grid, row-major with width fastest.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(int channels, Extent3 extent, T fill = T{})
      : channels_(channels), extent_(extent), data_(static_cast<std::size_t>(channels) * extent.voxels(), fill) {
    if (channels < 0 || extent.d < 0 || extent.h < 0 || extent.w < 0) {
      throw std::invalid_argument("Tensor: negative dimension");
    }
  }
  Tensor(int channels, Extent3 extent, AlignedVector<T> data)
      : channels_(channels), extent_(extent), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(channels) * extent.voxels()) {
      throw std::invalid_argument("Tensor: data size does not match shape");
    }
  }

  int channels() const { return channels_; }
  const Extent3& extent() const { return extent_; }
  std::size_t voxels() const { return extent_.voxels(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  AlignedVector<T>& values() { return data_; }
  const AlignedVector<T>& values() const { return data_; }

  std::span<T> channel(int c) { return {data_.data() + static_cast<std::size_t>(c) * voxels(), voxels()}; }
  std::span<const T> channel(int c) const {
    return {data_.data() + static_cast<std::size_t>(c) * voxels(), voxels()};
  }

  std::size_t index(int c, int z, int y, int x) const {
    return ((static_cast<std::size_t>(c) * extent_.d + z) * extent_.h + y) * extent_.w + x;
  }
  T& at(int c, int z, int y, int x) { return data_[index(c, z, y, x)]; }
  const T& at(int c, int z, int y, int x) const { return data_[index(c, z, y, x)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Tensor& o) const { return channels_ == o.channels_ && extent_ == o.extent_; }
  bool operator==(const Tensor&) const = default;

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(channels_, extent_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  int channels_ = 0;
  Extent3 extent_{};
  AlignedVector<T> data_;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw std::invalid_argument(message);
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch (" + std::to_string(a.channels()) + "x" +
                                a.extent().str() + " vs " + std::to_string(b.channels()) + "x" + b.extent().str() +
                                ")");
  }
}

/// Reverses the given spatial axis (0 = depth, 1 = height, 2 = width) of every channel.
template <class T>
Tensor<T> flip(const Tensor<T>& in, int axis) {
  const Extent3 e = in.extent();
  Tensor<T> out(in.channels(), e);
  for (int c = 0; c < in.channels(); ++c)
    for (int z = 0; z < e.d; ++z)
      for (int y = 0; y < e.h; ++y)
        for (int x = 0; x < e.w; ++x) {
          const int sz = axis == 0 ? e.d - 1 - z : z;
          const int sy = axis == 1 ? e.h - 1 - y : y;
          const int sx = axis == 2 ? e.w - 1 - x : x;
          out.at(c, z, y, x) = in.at(c, sz, sy, sx);
        }
  return out;
}

/// Copies a spatial window starting at `offset`; out-of-range voxels become `pad`.
template <class T>
Tensor<T> crop(const Tensor<T>& in, std::array<int, 3> offset, Extent3 size, T pad = T{}) {
  Tensor<T> out(in.channels(), size, pad);
  const Extent3 e = in.extent();
  for (int c = 0; c < in.channels(); ++c)
    for (int z = 0; z < size.d; ++z) {
      const int sz = z + offset[0];
      if (sz < 0 || sz >= e.d) continue;
      for (int y = 0; y < size.h; ++y) {
        const int sy = y + offset[1];
        if (sy < 0 || sy >= e.h) continue;
        for (int x = 0; x < size.w; ++x) {
          const int sx = x + offset[2];
          if (sx < 0 || sx >= e.w) continue;
          out.at(c, z, y, x) = in.at(c, sz, sy, sx);
        }
      }
    }
  return out;
}

/// Concatenates along the channel axis.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.extent() == b.extent(), "concat_channels: spatial extents differ");
  Tensor<T> out(a.channels() + b.channels(), a.extent());
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

}  // namespace semiseg
