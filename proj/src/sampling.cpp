#include "dcn2/sampling.hpp"

#include <algorithm>

namespace dcn2 {

template <typename T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& src, std::int64_t out_h, std::int64_t out_w) {
  const Dims d = src.dims();
  if (d.h < 1 || d.w < 1) throw ShapeError("cannot resize a tensor with empty spatial extent " + d.str());
  if (out_h < 1 || out_w < 1) throw ArgumentError("resize target must be at least 1x1");
  BasicTensor<T> out(Dims{d.n, d.c, out_h, out_w});
  const double sy = static_cast<double>(d.h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(d.w) / static_cast<double>(out_w);
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t c = 0; c < d.c; ++c) {
      const T* plane = src.plane(n, c).data();
      for (std::int64_t i = 0; i < out_h; ++i) {
        const double y = std::clamp((static_cast<double>(i) + 0.5) * sy - 0.5, 0.0, static_cast<double>(d.h - 1));
        for (std::int64_t j = 0; j < out_w; ++j) {
          const double x =
              std::clamp((static_cast<double>(j) + 0.5) * sx - 0.5, 0.0, static_cast<double>(d.w - 1));
          out(n, c, i, j) = static_cast<T>(detail::sample(plane, d.h, d.w, y, x));
        }
      }
    }
  }
  return out;
}

template BasicTensor<float> bilinear_resize<float>(const BasicTensor<float>&, std::int64_t, std::int64_t);
template BasicTensor<double> bilinear_resize<double>(const BasicTensor<double>&, std::int64_t, std::int64_t);

}  // namespace dcn2
