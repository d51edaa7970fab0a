#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "cloak/errors.hpp"

namespace cloak {

/// Dense NCHW tensor. Every activation and parameter in the library is a
/// 4-d tensor; flat feature vectors use shape (n, f, 1, 1).
template <typename T>
class TensorT {
 public:
  TensorT() = default;
  TensorT(int n, int c, int h, int w)
      : d_{n, c, h, w},
        v_(static_cast<std::size_t>(n) * c * h * w) {}

  static TensorT zeros_like(const TensorT& o) { return TensorT(o.n(), o.c(), o.h(), o.w()); }

  int n() const { return d_[0]; }
  int c() const { return d_[1]; }
  int h() const { return d_[2]; }
  int w() const { return d_[3]; }
  const std::array<int, 4>& dims() const { return d_; }

  std::int64_t numel() const { return static_cast<std::int64_t>(v_.size()); }
  bool empty() const { return v_.empty(); }

  /// Elements per image (c*h*w).
  std::int64_t image_size() const { return numel() / (d_[0] ? d_[0] : 1); }

  T* data() { return v_.data(); }
  const T* data() const { return v_.data(); }

  T& operator[](std::int64_t i) { return v_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return v_[static_cast<std::size_t>(i)]; }

  T& at(int n, int c, int y, int x) {
    return v_[((static_cast<std::size_t>(n) * d_[1] + c) * d_[2] + y) * d_[3] + x];
  }
  const T& at(int n, int c, int y, int x) const {
    return v_[((static_cast<std::size_t>(n) * d_[1] + c) * d_[2] + y) * d_[3] + x];
  }

  void fill(T v) { std::fill(v_.begin(), v_.end(), v); }

  bool same_shape(const TensorT& o) const { return d_ == o.d_; }

  /// Reinterprets the buffer under a new shape with identical element count.
  TensorT reshaped(int n, int c, int h, int w) const {
    TensorT out = *this;
    if (static_cast<std::int64_t>(n) * c * h * w != numel())
      throw ShapeError("reshape: element count mismatch");
    out.d_ = {n, c, h, w};
    return out;
  }

  /// Copy of images [begin, end) along the batch dimension.
  TensorT slice_batch(int begin, int end) const {
    TensorT out(end - begin, c(), h(), w());
    std::copy(v_.begin() + begin * image_size(), v_.begin() + end * image_size(),
              out.v_.begin());
    return out;
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(n(), c(), h(), w());
    for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(v_[i]);
    return out;
  }

 private:
  template <typename U>
  friend class TensorT;

  std::array<int, 4> d_{0, 0, 0, 0};
  std::vector<T> v_;
};

using Tensor = TensorT<float>;

/// Spatial shape of one image or feature map, batch dimension excluded.
struct Shape3 {
  int c = 0, h = 0, w = 0;
  int features() const { return c * h * w; }
  bool operator==(const Shape3&) const = default;
};

}  // namespace cloak
