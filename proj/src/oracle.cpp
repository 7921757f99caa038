#include "dcn2/oracle.hpp"

#include <cmath>

namespace dcn2::oracle {

namespace {

void check_weights(const TensorD& x, const TensorD& w, std::span<const double> bias, const KernelSpec& spec) {
  spec.validate();
  if (w.dims().c != x.dims().c || w.dims().h != spec.kernel_h || w.dims().w != spec.kernel_w) {
    throw ShapeError("oracle weights " + w.dims().str() + " do not fit input " + x.dims().str());
  }
  if (!bias.empty() && static_cast<std::int64_t>(bias.size()) != w.dims().n) {
    throw ShapeError("oracle bias length does not match output channels");
  }
}

}  // namespace

double bilinear(std::span<const double> plane, std::int64_t h, std::int64_t w, double y, double x) {
  if (y <= -1.0 || y >= static_cast<double>(h) || x <= -1.0 || x >= static_cast<double>(w)) return 0.0;
  auto at = [&](std::int64_t r, std::int64_t c) {
    if (r < 0 || r >= h || c < 0 || c >= w) return 0.0;
    return plane[static_cast<std::size_t>(r * w + c)];
  };
  const auto r0 = static_cast<std::int64_t>(std::floor(y));
  const auto c0 = static_cast<std::int64_t>(std::floor(x));
  const double fy = y - static_cast<double>(r0);
  const double fx = x - static_cast<double>(c0);
  const double top = at(r0, c0) + fx * (at(r0, c0 + 1) - at(r0, c0));
  const double bottom = at(r0 + 1, c0) + fx * (at(r0 + 1, c0 + 1) - at(r0 + 1, c0));
  return top + fy * (bottom - top);
}

TensorD dense_conv(const TensorD& x, const TensorD& w, std::span<const double> bias, const KernelSpec& spec) {
  check_weights(x, w, bias, spec);
  const Dims xd = x.dims();
  const std::int64_t oh = spec.out_h(xd.h), ow = spec.out_w(xd.w);
  TensorD y(Dims{xd.n, w.dims().n, oh, ow});
  for (std::int64_t n = 0; n < xd.n; ++n) {
    for (std::int64_t co = 0; co < w.dims().n; ++co) {
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(co)];
          for (std::int64_t ci = 0; ci < xd.c; ++ci) {
            for (std::int64_t ky = 0; ky < spec.kernel_h; ++ky) {
              for (std::int64_t kx = 0; kx < spec.kernel_w; ++kx) {
                const std::int64_t iy = oy * spec.stride_h - spec.pad_h + ky * spec.dilation_h;
                const std::int64_t ix = ox * spec.stride_w - spec.pad_w + kx * spec.dilation_w;
                if (iy < 0 || iy >= xd.h || ix < 0 || ix >= xd.w) continue;
                acc += w(co, ci, ky, kx) * x(n, ci, iy, ix);
              }
            }
          }
          y(n, co, oy, ox) = acc;
        }
      }
    }
  }
  return y;
}

TensorD dcnv1_conv(const TensorD& x, const TensorD& w, std::span<const double> bias, const KernelSpec& spec,
                   const TensorD& offsets) {
  check_weights(x, w, bias, spec);
  const Dims xd = x.dims();
  const std::int64_t oh = spec.out_h(xd.h), ow = spec.out_w(xd.w);
  const std::int64_t taps = static_cast<std::int64_t>(spec.kernel_h) * spec.kernel_w;
  if (offsets.dims() != Dims{xd.n, 2 * taps, oh, ow}) {
    throw ShapeError("oracle offsets " + offsets.dims().str() + " do not match the output grid");
  }
  TensorD y(Dims{xd.n, w.dims().n, oh, ow});
  for (std::int64_t n = 0; n < xd.n; ++n) {
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        // Sample every (tap, input channel) once, then contract.
        std::vector<double> col(static_cast<std::size_t>(xd.c * taps));
        for (std::int64_t ky = 0; ky < spec.kernel_h; ++ky) {
          for (std::int64_t kx = 0; kx < spec.kernel_w; ++kx) {
            const std::int64_t k = ky * spec.kernel_w + kx;
            const double py = static_cast<double>(oy * spec.stride_h - spec.pad_h + ky * spec.dilation_h) +
                              offsets(n, 2 * k, oy, ox);
            const double px = static_cast<double>(ox * spec.stride_w - spec.pad_w + kx * spec.dilation_w) +
                              offsets(n, 2 * k + 1, oy, ox);
            for (std::int64_t ci = 0; ci < xd.c; ++ci) {
              col[static_cast<std::size_t>(ci * taps + k)] = bilinear(x.plane(n, ci), xd.h, xd.w, py, px);
            }
          }
        }
        for (std::int64_t co = 0; co < w.dims().n; ++co) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(co)];
          for (std::int64_t ci = 0; ci < xd.c; ++ci) {
            for (std::int64_t k = 0; k < taps; ++k) {
              acc += w(co, ci, k / spec.kernel_w, k % spec.kernel_w) * col[static_cast<std::size_t>(ci * taps + k)];
            }
          }
          y(n, co, oy, ox) = acc;
        }
      }
    }
  }
  return y;
}

TensorD aligned_roi_pool(const TensorD& x, std::span<const Box> boxes, int bins_h, int bins_w, int samples) {
  if (bins_h < 1 || bins_w < 1 || samples < 1) throw ArgumentError("oracle pooling needs bins and samples >= 1");
  const Dims xd = x.dims();
  TensorD y(Dims{static_cast<std::int64_t>(boxes.size()), xd.c, bins_h, bins_w});
  for (std::size_t r = 0; r < boxes.size(); ++r) {
    const Box& b = boxes[r];
    if (b.batch < 0 || b.batch >= xd.n) throw ArgumentError("oracle box batch out of range");
    const double bh = (b.y2 - b.y1) / bins_h;
    const double bw = (b.x2 - b.x1) / bins_w;
    for (std::int64_t c = 0; c < xd.c; ++c) {
      for (int i = 0; i < bins_h; ++i) {
        for (int j = 0; j < bins_w; ++j) {
          double acc = 0.0;
          for (int sy = 0; sy < samples; ++sy) {
            for (int sx = 0; sx < samples; ++sx) {
              const double py = b.y1 + (i + (sy + 0.5) / samples) * bh;
              const double px = b.x1 + (j + (sx + 0.5) / samples) * bw;
              acc += bilinear(x.plane(b.batch, c), xd.h, xd.w, py, px);
            }
          }
          y(static_cast<std::int64_t>(r), c, i, j) = acc / (samples * samples);
        }
      }
    }
  }
  return y;
}

}  // namespace dcn2::oracle
