#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "dcn2/error.hpp"

namespace dcn2 {

/// Extents of a 4-D tensor in (N, C, H, W) order.
struct Dims {
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  friend bool operator==(const Dims&, const Dims&) = default;

  /// Element count. Throws SizeError if an extent is negative or the product
  /// does not fit in the addressable range.
  std::int64_t numel() const;
  std::string str() const;
};

/// Dense row-major (N, C, H, W) tensor. `float` is the storage type used by
/// files and the CLI; `double` instantiations back the gradient checker.
template <typename T>
class BasicTensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Dims dims, T fill = T(0))
      : dims_(dims), data_(static_cast<std::size_t>(dims.numel()), fill) {}

  const Dims& dims() const noexcept { return dims_; }
  std::int64_t size() const noexcept { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  std::int64_t index(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const noexcept {
    return ((n * dims_.c + c) * dims_.h + h) * dims_.w + w;
  }

  T& operator()(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) noexcept {
    return data_[static_cast<std::size_t>(index(n, c, h, w))];
  }
  const T& operator()(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const noexcept {
    return data_[static_cast<std::size_t>(index(n, c, h, w))];
  }
  T& operator[](std::int64_t i) noexcept { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const noexcept { return data_[static_cast<std::size_t>(i)]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  /// One (H, W) channel plane.
  std::span<T> plane(std::int64_t n, std::int64_t c) noexcept {
    return std::span<T>(data_).subspan(static_cast<std::size_t>(index(n, c, 0, 0)),
                                       static_cast<std::size_t>(dims_.h * dims_.w));
  }
  std::span<const T> plane(std::int64_t n, std::int64_t c) const noexcept {
    return std::span<const T>(data_).subspan(static_cast<std::size_t>(index(n, c, 0, 0)),
                                             static_cast<std::size_t>(dims_.h * dims_.w));
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename U>
  BasicTensor<U> cast() const {
    BasicTensor<U> out(dims_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  Dims dims_{};
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

struct Range {
  std::int64_t begin = 0;
  std::int64_t end = 0;
  std::int64_t size() const noexcept { return end - begin; }
};

/// A channel/spatial window into a tensor, spanning every batch element.
/// Indices passed to `at` are relative to the window origin.
template <typename T>
class TensorView {
  using Parent = std::conditional_t<std::is_const_v<T>, const BasicTensor<std::remove_const_t<T>>,
                                    BasicTensor<std::remove_const_t<T>>>;

 public:
  TensorView(Parent& parent, Range channels, Range rows, Range cols)
      : parent_(&parent), channels_(channels), rows_(rows), cols_(cols) {
    const Dims& d = parent.dims();
    auto inside = [](Range r, std::int64_t extent) {
      return r.begin >= 0 && r.end <= extent && r.begin <= r.end;
    };
    if (!inside(channels, d.c) || !inside(rows, d.h) || !inside(cols, d.w)) {
      throw ShapeError("view window lies outside tensor " + d.str());
    }
  }
  explicit TensorView(Parent& parent)
      : TensorView(parent, {0, parent.dims().c}, {0, parent.dims().h}, {0, parent.dims().w}) {}

  Dims dims() const noexcept { return {parent_->dims().n, channels_.size(), rows_.size(), cols_.size()}; }

  T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const noexcept {
    return (*parent_)(n, channels_.begin + c, rows_.begin + h, cols_.begin + w);
  }

 private:
  Parent* parent_;
  Range channels_, rows_, cols_;
};

Tensor alloc(Dims dims, float fill = 0.0f);

/// dst += scale * src, elementwise. Dims must match.
template <typename T>
void axpy_accumulate(BasicTensor<T>& dst, const BasicTensor<T>& src, double scale);

template <typename T>
void axpy_accumulate(const TensorView<T>& dst, const TensorView<const T>& src, double scale);

/// Sum of all elements with a double accumulator.
template <typename T>
double sum(const BasicTensor<T>& t);

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Binary tensor file (.dcnt): "DCN2TENS", four u32 LE extents, f32 LE payload.
std::vector<std::uint8_t> write_tensor(const Tensor& t);
Tensor read_tensor(std::span<const std::uint8_t> bytes);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace dcn2
