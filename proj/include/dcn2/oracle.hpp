#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dcn2/conv_types.hpp"
#include "dcn2/tensor.hpp"

// Naive reference implementations. These deliberately share no code with the
// kernels they validate (each has its own bilinear interpolation) and use
// only the plain data types.

namespace dcn2::oracle {

/// Textbook zero-padded strided dilated convolution. `w` is
/// (C_out, C_in, kh, kw); `bias` may be empty.
TensorD dense_conv(const TensorD& x, const TensorD& w, std::span<const double> bias, const KernelSpec& spec);

/// Deformable convolution without modulation: every tap k of output (oy, ox)
/// samples x at (oy*sh - ph + ky*dh + dy, ox*sw - pw + kx*dw + dx) where
/// (dy, dx) = offsets(n, 2k, oy, ox), offsets(n, 2k+1, oy, ox).
TensorD dcnv1_conv(const TensorD& x, const TensorD& w, std::span<const double> bias, const KernelSpec& spec,
                   const TensorD& offsets);

struct Box {
  std::int64_t batch = 0;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

/// Aligned average RoI pooling with samples x samples evenly spaced grid
/// points per bin. Output is (R, C, bins_h, bins_w).
TensorD aligned_roi_pool(const TensorD& x, std::span<const Box> boxes, int bins_h, int bins_w, int samples);

/// Zero-padded bilinear interpolation of one plane.
double bilinear(std::span<const double> plane, std::int64_t h, std::int64_t w, double y, double x);

}  // namespace dcn2::oracle
