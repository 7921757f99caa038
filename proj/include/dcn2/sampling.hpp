#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>

#include "dcn2/error.hpp"
#include "dcn2/tensor.hpp"

namespace dcn2 {

/// Continuous sampling location in pixel units; integer values are pixel centers.
struct SamplePoint {
  double y = 0.0;
  double x = 0.0;
};

/// Read-only (H, W) channel plane.
template <typename T>
struct PlaneRef {
  std::span<const T> values;
  std::int64_t height = 0;
  std::int64_t width = 0;
};

template <typename T>
PlaneRef<T> plane_of(const BasicTensor<T>& t, std::int64_t n, std::int64_t c) {
  return {t.plane(n, c), t.dims().h, t.dims().w};
}

struct BilinearTap {
  std::int64_t row = 0;
  std::int64_t col = 0;
  double value = 0.0;
};

/// Sparse gradient with respect to plane values (at most four in-bounds
/// neighbors) plus the gradient with respect to the sample coordinate.
struct BilinearGrad {
  std::array<BilinearTap, 4> taps{};
  int count = 0;
  double d_y = 0.0;
  double d_x = 0.0;
};

namespace detail {

// Neighbor cell of a sample point. The cell is chosen by floor(), so an exact
// integer coordinate uses the cell to its lower-right.
struct Cell {
  std::int64_t y0, x0;
  double ly, lx;  // fractional parts
};

inline Cell cell_of(double y, double x) {
  const double fy = std::floor(y);
  const double fx = std::floor(x);
  return {static_cast<std::int64_t>(fy), static_cast<std::int64_t>(fx), y - fy, x - fx};
}

inline bool outside(double y, double x, std::int64_t h, std::int64_t w) {
  return y <= -1.0 || x <= -1.0 || y >= static_cast<double>(h) || x >= static_cast<double>(w);
}

// Zero-padded bilinear sample without argument checks.
template <typename T>
inline double sample(const T* plane, std::int64_t h, std::int64_t w, double y, double x) {
  if (outside(y, x, h, w)) return 0.0;
  const Cell c = cell_of(y, x);
  const double hy = 1.0 - c.ly, hx = 1.0 - c.lx;
  const bool top = c.y0 >= 0, bottom = c.y0 + 1 < h;
  const bool left = c.x0 >= 0, right = c.x0 + 1 < w;
  const T* row0 = plane + c.y0 * w;
  const T* row1 = row0 + w;
  double v = 0.0;
  if (top && left) v += hy * hx * static_cast<double>(row0[c.x0]);
  if (top && right) v += hy * c.lx * static_cast<double>(row0[c.x0 + 1]);
  if (bottom && left) v += c.ly * hx * static_cast<double>(row1[c.x0]);
  if (bottom && right) v += c.ly * c.lx * static_cast<double>(row1[c.x0 + 1]);
  return v;
}

// Value, coordinate gradient and neighbor weights of one sample.
struct SampleGrad {
  double value = 0.0;
  double d_y = 0.0;
  double d_x = 0.0;
  std::array<std::int64_t, 4> index{};  // flat plane indices
  std::array<double, 4> weight{};
  int count = 0;
};

template <typename T>
inline SampleGrad sample_grad(const T* plane, std::int64_t h, std::int64_t w, double y, double x) {
  SampleGrad g;
  if (outside(y, x, h, w)) return g;
  const Cell c = cell_of(y, x);
  const double hy = 1.0 - c.ly, hx = 1.0 - c.lx;
  const bool top = c.y0 >= 0, bottom = c.y0 + 1 < h;
  const bool left = c.x0 >= 0, right = c.x0 + 1 < w;
  const double v00 = top && left ? static_cast<double>(plane[c.y0 * w + c.x0]) : 0.0;
  const double v01 = top && right ? static_cast<double>(plane[c.y0 * w + c.x0 + 1]) : 0.0;
  const double v10 = bottom && left ? static_cast<double>(plane[(c.y0 + 1) * w + c.x0]) : 0.0;
  const double v11 = bottom && right ? static_cast<double>(plane[(c.y0 + 1) * w + c.x0 + 1]) : 0.0;
  g.value = hy * hx * v00 + hy * c.lx * v01 + c.ly * hx * v10 + c.ly * c.lx * v11;
  g.d_y = hx * (v10 - v00) + c.lx * (v11 - v01);
  g.d_x = hy * (v01 - v00) + c.ly * (v11 - v10);
  auto add = [&](bool ok, std::int64_t idx, double wt) {
    if (ok) {
      g.index[g.count] = idx;
      g.weight[g.count] = wt;
      ++g.count;
    }
  };
  add(top && left, c.y0 * w + c.x0, hy * hx);
  add(top && right, c.y0 * w + c.x0 + 1, hy * c.lx);
  add(bottom && left, (c.y0 + 1) * w + c.x0, c.ly * hx);
  add(bottom && right, (c.y0 + 1) * w + c.x0 + 1, c.ly * c.lx);
  return g;
}

inline void check_point(SamplePoint pt) {
  if (!std::isfinite(pt.y) || !std::isfinite(pt.x)) throw ArgumentError("non-finite sample coordinate");
}

template <typename T>
inline void check_plane(const PlaneRef<T>& p) {
  if (p.height < 1 || p.width < 1) throw ShapeError("sample plane must be at least 1x1");
  if (static_cast<std::int64_t>(p.values.size()) != p.height * p.width) {
    throw ShapeError("plane span does not match its extents");
  }
}

}  // namespace detail

/// Zero-padded bilinear interpolation of `plane` at `pt`.
template <typename T>
double bilinear_sample(const PlaneRef<T>& plane, SamplePoint pt) {
  detail::check_plane(plane);
  detail::check_point(pt);
  return detail::sample(plane.values.data(), plane.height, plane.width, pt.y, pt.x);
}

/// Gradient of `upstream * bilinear_sample(plane, pt)` with respect to the
/// plane values and to the coordinate.
template <typename T>
BilinearGrad bilinear_backward(const PlaneRef<T>& plane, SamplePoint pt, double upstream) {
  detail::check_plane(plane);
  detail::check_point(pt);
  const auto g = detail::sample_grad(plane.values.data(), plane.height, plane.width, pt.y, pt.x);
  BilinearGrad out;
  out.count = g.count;
  for (int i = 0; i < g.count; ++i) {
    out.taps[i] = {g.index[i] / plane.width, g.index[i] % plane.width, upstream * g.weight[i]};
  }
  out.d_y = upstream * g.d_y;
  out.d_x = upstream * g.d_x;
  return out;
}

/// Resizes every (H, W) plane with the half-pixel-center mapping
/// y = (i + 0.5) * H / out_h - 0.5. Coordinates are clamped to the source
/// extent so borders replicate instead of fading to zero.
template <typename T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& src, std::int64_t out_h, std::int64_t out_w);

}  // namespace dcn2
