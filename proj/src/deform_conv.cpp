#include "dcn2/deform_conv.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "dcn2/sampling.hpp"

namespace dcn2 {

namespace {

constexpr std::int64_t kTile = 64;
// Fixed number of partial accumulators for weight gradients; independent of
// the thread count so deterministic results do not depend on it either.
constexpr std::int64_t kChunks = 16;

struct Geometry {
  std::int64_t n, c_in, h, w, c_out, out_h, out_w;
  int taps;
  std::int64_t positions() const noexcept { return out_h * out_w; }
  std::int64_t cols() const noexcept { return c_in * taps; }
};

template <typename T>
Geometry check_conv(const BasicTensor<T>& x, const ConvWeights<T>& w, const KernelSpec& spec,
                    const OffsetModulationField<T>* field) {
  spec.validate();
  const Dims xd = x.dims();
  const Dims wd = w.weight.dims();
  if (wd.c != xd.c || wd.h != spec.kernel_h || wd.w != spec.kernel_w) {
    throw ShapeError("weights " + wd.str() + " do not match input " + xd.str() + " and kernel " +
                     std::to_string(spec.kernel_h) + "x" + std::to_string(spec.kernel_w));
  }
  if (w.has_bias() && static_cast<std::int64_t>(w.bias.size()) != wd.n) {
    throw ShapeError("bias length " + std::to_string(w.bias.size()) + " != output channels " + std::to_string(wd.n));
  }
  Geometry g{xd.n, xd.c, xd.h, xd.w, wd.n, spec.out_h(xd.h), spec.out_w(xd.w), spec.taps()};
  if (field) {
    const Dims want_off{g.n, 2 * static_cast<std::int64_t>(g.taps), g.out_h, g.out_w};
    if (field->offsets.dims() != want_off) {
      throw ShapeError("offsets " + field->offsets.dims().str() + " expected " + want_off.str());
    }
    for (T v : field->offsets.data()) {
      if (!std::isfinite(v)) throw ArgumentError("non-finite offset");
    }
    if (field->modulated()) {
      const Dims want_mod{g.n, g.taps, g.out_h, g.out_w};
      if (field->modulation.dims() != want_mod) {
        throw ShapeError("modulation " + field->modulation.dims().str() + " expected " + want_mod.str());
      }
      for (T v : field->modulation.data()) {
        if (!(v >= T(0) && v <= T(1))) throw ArgumentError("modulation outside [0, 1]");
      }
    }
  }
  return g;
}

template <typename T>
void check_upstream(const BasicTensor<T>& up, const Geometry& g) {
  const Dims want{g.n, g.c_out, g.out_h, g.out_w};
  if (up.dims() != want) throw ShapeError("upstream " + up.dims().str() + " expected " + want.str());
}

template <typename T>
BasicTensor<T> to_tensor(const std::vector<double>& v, Dims d) {
  BasicTensor<T> t(d);
  auto out = t.data();
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(v[i]);
  return t;
}

// Sampling positions and modulation for the taps of one tile of output
// positions. Layout [k][j].
template <typename T>
struct TilePositions {
  std::vector<double> ys, xs, ms;
  std::int64_t len = 0;

  explicit TilePositions(int taps)
      : ys(static_cast<std::size_t>(taps * kTile)),
        xs(static_cast<std::size_t>(taps * kTile)),
        ms(static_cast<std::size_t>(taps * kTile)) {}

  void fill(const Geometry& g, const KernelSpec& spec, const OffsetModulationField<T>* field, std::int64_t n,
            std::int64_t p0, std::int64_t count) {
    len = count;
    const std::int64_t positions = g.positions();
    const bool mod = field && field->modulated();
    for (int k = 0; k < g.taps; ++k) {
      const auto [py, px] = spec.tap_offset(k);
      const T* off_y = field ? field->offsets.data().data() + (n * 2 * g.taps + 2 * k) * positions : nullptr;
      const T* off_x = field ? off_y + positions : nullptr;
      const T* mk = mod ? field->modulation.data().data() + (n * g.taps + k) * positions : nullptr;
      for (std::int64_t j = 0; j < count; ++j) {
        const std::int64_t p = p0 + j;
        const std::int64_t oy = p / g.out_w, ox = p % g.out_w;
        double y = static_cast<double>(oy * spec.stride_h - spec.pad_h + (spec.kernel_h / 2) * spec.dilation_h + py);
        double x = static_cast<double>(ox * spec.stride_w - spec.pad_w + (spec.kernel_w / 2) * spec.dilation_w + px);
        if (field) {
          y += static_cast<double>(off_y[p]);
          x += static_cast<double>(off_x[p]);
        }
        ys[k * kTile + j] = y;
        xs[k * kTile + j] = x;
        ms[k * kTile + j] = mk ? static_cast<double>(mk[p]) : 1.0;
      }
    }
  }
};

template <typename T>
inline double lookup(const T* plane, std::int64_t h, std::int64_t w, double y, double x) {
  const auto iy = static_cast<std::int64_t>(y), ix = static_cast<std::int64_t>(x);
  return (y >= 0 && x >= 0 && iy < h && ix < w) ? static_cast<double>(plane[iy * w + ix]) : 0.0;
}

template <typename T>
BasicTensor<T> forward_optimized(const BasicTensor<T>& x, const ConvWeights<T>& w, const KernelSpec& spec,
                                 const OffsetModulationField<T>* field, const Execution& exec) {
  const Geometry g = check_conv(x, w, spec, field);
  BasicTensor<T> y(Dims{g.n, g.c_out, g.out_h, g.out_w});
  const std::int64_t positions = g.positions();
  const std::int64_t ncols = g.cols();
  const std::int64_t tiles = (positions + kTile - 1) / kTile;
  const T* weight = w.weight.data().data();
  for (std::int64_t n = 0; n < g.n; ++n) {
    parallel_for(exec, 0, tiles, [&](std::int64_t t0, std::int64_t t1) {
      TilePositions<T> pos(g.taps);
      std::vector<double> cols(static_cast<std::size_t>(ncols * kTile));
      std::vector<double> acc(static_cast<std::size_t>(g.c_out * kTile));
      for (std::int64_t tile = t0; tile < t1; ++tile) {
        const std::int64_t p0 = tile * kTile;
        const std::int64_t len = std::min(kTile, positions - p0);
        pos.fill(g, spec, field, n, p0, len);
        for (std::int64_t ic = 0; ic < g.c_in; ++ic) {
          const T* plane = x.plane(n, ic).data();
          for (int k = 0; k < g.taps; ++k) {
            double* col = &cols[static_cast<std::size_t>((ic * g.taps + k) * kTile)];
            const double* ys = &pos.ys[static_cast<std::size_t>(k * kTile)];
            const double* xs = &pos.xs[static_cast<std::size_t>(k * kTile)];
            const double* ms = &pos.ms[static_cast<std::size_t>(k * kTile)];
            if (field) {
              for (std::int64_t j = 0; j < len; ++j) col[j] = ms[j] * detail::sample(plane, g.h, g.w, ys[j], xs[j]);
            } else {
              for (std::int64_t j = 0; j < len; ++j) col[j] = lookup(plane, g.h, g.w, ys[j], xs[j]);
            }
          }
        }
        for (std::int64_t oc = 0; oc < g.c_out; ++oc) {
          const double b = w.has_bias() ? static_cast<double>(w.bias[static_cast<std::size_t>(oc)]) : 0.0;
          std::fill_n(&acc[static_cast<std::size_t>(oc * kTile)], kTile, b);
        }
        for (std::int64_t kk = 0; kk < ncols; ++kk) {
          const double* col = &cols[static_cast<std::size_t>(kk * kTile)];
          for (std::int64_t oc = 0; oc < g.c_out; ++oc) {
            const double wv = static_cast<double>(weight[oc * ncols + kk]);
            double* a = &acc[static_cast<std::size_t>(oc * kTile)];
            for (std::int64_t j = 0; j < kTile; ++j) a[j] += wv * col[j];
          }
        }
        for (std::int64_t oc = 0; oc < g.c_out; ++oc) {
          T* out = y.plane(n, oc).data() + p0;
          const double* a = &acc[static_cast<std::size_t>(oc * kTile)];
          for (std::int64_t j = 0; j < len; ++j) out[j] = static_cast<T>(a[j]);
        }
      }
    });
  }
  return y;
}

template <typename T>
ConvGrads<T> backward_optimized(const BasicTensor<T>& x, const ConvWeights<T>& w, const KernelSpec& spec,
                                const OffsetModulationField<T>* field, const BasicTensor<T>& upstream,
                                const Execution& exec) {
  const Geometry g = check_conv(x, w, spec, field);
  check_upstream(upstream, g);
  const bool deform = field != nullptr;
  const bool mod = deform && field->modulated();
  const std::int64_t positions = g.positions();
  const std::int64_t ncols = g.cols();
  const std::int64_t plane_size = g.h * g.w;
  const std::int64_t tiles = (positions + kTile - 1) / kTile;
  const std::int64_t nchunks = std::min(kChunks, tiles);
  const T* weight = w.weight.data().data();

  std::vector<double> gx(static_cast<std::size_t>(g.n * g.c_in * plane_size));
  std::vector<double> goff(deform ? static_cast<std::size_t>(g.n * 2 * g.taps * positions) : 0);
  std::vector<double> gm(mod ? static_cast<std::size_t>(g.n * g.taps * positions) : 0);
  std::vector<double> gw_part(static_cast<std::size_t>(std::max<std::int64_t>(nchunks, 1) * g.c_out * ncols));
  std::vector<double> gb_part(static_cast<std::size_t>(std::max<std::int64_t>(nchunks, 1) * g.c_out));

  auto load_upstream = [&](std::vector<double>& upt, std::int64_t n, std::int64_t p0, std::int64_t len) {
    std::fill(upt.begin(), upt.end(), 0.0);
    for (std::int64_t oc = 0; oc < g.c_out; ++oc) {
      const T* src = upstream.plane(n, oc).data() + p0;
      for (std::int64_t j = 0; j < len; ++j) upt[static_cast<std::size_t>(oc * kTile + j)] = static_cast<double>(src[j]);
    }
  };

  for (std::int64_t n = 0; n < g.n; ++n) {
    // Pass A: weight/bias partials per chunk, offset and modulation gradients
    // per output position (tiles are disjoint in positions).
    parallel_for(exec, 0, nchunks, [&](std::int64_t c0, std::int64_t c1) {
      TilePositions<T> pos(g.taps);
      std::vector<double> upt(static_cast<std::size_t>(g.c_out * kTile));
      std::vector<double> gc(static_cast<std::size_t>(ncols * kTile));
      std::vector<double> cols(static_cast<std::size_t>(ncols * kTile));
      for (std::int64_t chunk = c0; chunk < c1; ++chunk) {
        double* gw_c = &gw_part[static_cast<std::size_t>(chunk * g.c_out * ncols)];
        double* gb_c = &gb_part[static_cast<std::size_t>(chunk * g.c_out)];
        for (std::int64_t tile = tiles * chunk / nchunks; tile < tiles * (chunk + 1) / nchunks; ++tile) {
          const std::int64_t p0 = tile * kTile;
          const std::int64_t len = std::min(kTile, positions - p0);
          pos.fill(g, spec, field, n, p0, len);
          load_upstream(upt, n, p0, len);
          std::fill(gc.begin(), gc.end(), 0.0);
          for (std::int64_t oc = 0; oc < g.c_out; ++oc) {
            const double* u = &upt[static_cast<std::size_t>(oc * kTile)];
            for (std::int64_t kk = 0; kk < ncols; ++kk) {
              const double wv = static_cast<double>(weight[oc * ncols + kk]);
              double* dst = &gc[static_cast<std::size_t>(kk * kTile)];
              for (std::int64_t j = 0; j < kTile; ++j) dst[j] += wv * u[j];
            }
          }
          for (std::int64_t ic = 0; ic < g.c_in; ++ic) {
            const T* plane = x.plane(n, ic).data();
            double* gx_plane = &gx[static_cast<std::size_t>((n * g.c_in + ic) * plane_size)];
            for (int k = 0; k < g.taps; ++k) {
              const std::int64_t kk = ic * g.taps + k;
              const double* ys = &pos.ys[static_cast<std::size_t>(k * kTile)];
              const double* xs = &pos.xs[static_cast<std::size_t>(k * kTile)];
              const double* ms = &pos.ms[static_cast<std::size_t>(k * kTile)];
              const double* gck = &gc[static_cast<std::size_t>(kk * kTile)];
              double* col = &cols[static_cast<std::size_t>(kk * kTile)];
              if (!deform) {
                for (std::int64_t j = 0; j < len; ++j) col[j] = lookup(plane, g.h, g.w, ys[j], xs[j]);
                if (!exec.deterministic) {
                  for (std::int64_t j = 0; j < len; ++j) {
                    const auto iy = static_cast<std::int64_t>(ys[j]), ix = static_cast<std::int64_t>(xs[j]);
                    if (ys[j] >= 0 && xs[j] >= 0 && iy < g.h && ix < g.w) {
                      std::atomic_ref<double>(gx_plane[iy * g.w + ix]).fetch_add(gck[j], std::memory_order_relaxed);
                    }
                  }
                }
                continue;
              }
              double* goff_y = &goff[static_cast<std::size_t>((n * 2 * g.taps + 2 * k) * positions + p0)];
              double* goff_x = goff_y + positions;
              double* gm_k = mod ? &gm[static_cast<std::size_t>((n * g.taps + k) * positions + p0)] : nullptr;
              for (std::int64_t j = 0; j < len; ++j) {
                const auto s = detail::sample_grad(plane, g.h, g.w, ys[j], xs[j]);
                col[j] = ms[j] * s.value;
                const double coef = gck[j] * ms[j];
                goff_y[j] += coef * s.d_y;
                goff_x[j] += coef * s.d_x;
                if (gm_k) gm_k[j] += gck[j] * s.value;
                if (!exec.deterministic) {
                  for (int t = 0; t < s.count; ++t) {
                    std::atomic_ref<double>(gx_plane[s.index[t]]).fetch_add(coef * s.weight[t], std::memory_order_relaxed);
                  }
                }
              }
            }
          }
          for (std::int64_t oc = 0; oc < g.c_out; ++oc) {
            const double* u = &upt[static_cast<std::size_t>(oc * kTile)];
            double bsum = 0.0;
            for (std::int64_t j = 0; j < len; ++j) bsum += u[j];
            gb_c[oc] += bsum;
            for (std::int64_t kk = 0; kk < ncols; ++kk) {
              const double* col = &cols[static_cast<std::size_t>(kk * kTile)];
              double s = 0.0;
              for (std::int64_t j = 0; j < len; ++j) s += u[j] * col[j];
              gw_c[oc * ncols + kk] += s;
            }
          }
        }
      }
    });

    if (!exec.deterministic) continue;

    // Pass B: input gradient, one input channel per task so every plane is
    // accumulated by a single worker in position order.
    parallel_for(exec, 0, g.c_in, [&](std::int64_t i0, std::int64_t i1) {
      TilePositions<T> pos(g.taps);
      std::vector<double> upt(static_cast<std::size_t>(g.c_out * kTile));
      std::vector<double> gck(static_cast<std::size_t>(g.taps * kTile));
      for (std::int64_t ic = i0; ic < i1; ++ic) {
        const T* plane = x.plane(n, ic).data();
        double* gx_plane = &gx[static_cast<std::size_t>((n * g.c_in + ic) * plane_size)];
        for (std::int64_t tile = 0; tile < tiles; ++tile) {
          const std::int64_t p0 = tile * kTile;
          const std::int64_t len = std::min(kTile, positions - p0);
          pos.fill(g, spec, field, n, p0, len);
          load_upstream(upt, n, p0, len);
          std::fill(gck.begin(), gck.end(), 0.0);
          for (std::int64_t oc = 0; oc < g.c_out; ++oc) {
            const double* u = &upt[static_cast<std::size_t>(oc * kTile)];
            for (int k = 0; k < g.taps; ++k) {
              const double wv = static_cast<double>(weight[oc * ncols + ic * g.taps + k]);
              double* dst = &gck[static_cast<std::size_t>(k * kTile)];
              for (std::int64_t j = 0; j < kTile; ++j) dst[j] += wv * u[j];
            }
          }
          for (int k = 0; k < g.taps; ++k) {
            const double* ys = &pos.ys[static_cast<std::size_t>(k * kTile)];
            const double* xs = &pos.xs[static_cast<std::size_t>(k * kTile)];
            const double* ms = &pos.ms[static_cast<std::size_t>(k * kTile)];
            const double* gk = &gck[static_cast<std::size_t>(k * kTile)];
            for (std::int64_t j = 0; j < len; ++j) {
              if (!deform) {
                const auto iy = static_cast<std::int64_t>(ys[j]), ix = static_cast<std::int64_t>(xs[j]);
                if (ys[j] >= 0 && xs[j] >= 0 && iy < g.h && ix < g.w) gx_plane[iy * g.w + ix] += gk[j];
                continue;
              }
              const auto s = detail::sample_grad(plane, g.h, g.w, ys[j], xs[j]);
              const double coef = gk[j] * ms[j];
              for (int t = 0; t < s.count; ++t) gx_plane[s.index[t]] += coef * s.weight[t];
            }
          }
        }
      }
    });
  }

  ConvGrads<T> out;
  out.grad_x = to_tensor<T>(gx, x.dims());
  std::vector<double> gw(static_cast<std::size_t>(g.c_out * ncols), 0.0);
  std::vector<double> gb(static_cast<std::size_t>(g.c_out), 0.0);
  for (std::int64_t chunk = 0; chunk < nchunks; ++chunk) {
    for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += gw_part[static_cast<std::size_t>(chunk) * gw.size() + i];
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gb_part[static_cast<std::size_t>(chunk) * gb.size() + i];
  }
  out.grad_w = to_tensor<T>(gw, w.weight.dims());
  if (w.has_bias()) {
    out.grad_bias.resize(gb.size());
    for (std::size_t i = 0; i < gb.size(); ++i) out.grad_bias[i] = static_cast<T>(gb[i]);
  }
  if (deform) out.grad_offsets = to_tensor<T>(goff, field->offsets.dims());
  if (mod) out.grad_modulation = to_tensor<T>(gm, field->modulation.dims());
  return out;
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

// ---------------------------------------------------------------------------
// Reference path
// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> mdconv_forward(const BasicTensor<T>& x, const ConvWeights<T>& w, const KernelSpec& spec,
                              const OffsetModulationField<T>& field) {
  const Geometry g = check_conv(x, w, spec, &field);
  BasicTensor<T> y(Dims{g.n, g.c_out, g.out_h, g.out_w});
  const bool mod = field.modulated();
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t oc = 0; oc < g.c_out; ++oc) {
      for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
        for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
          double acc = w.has_bias() ? static_cast<double>(w.bias[static_cast<std::size_t>(oc)]) : 0.0;
          const double cy = static_cast<double>(oy * spec.stride_h - spec.pad_h + (spec.kernel_h / 2) * spec.dilation_h);
          const double cx = static_cast<double>(ox * spec.stride_w - spec.pad_w + (spec.kernel_w / 2) * spec.dilation_w);
          for (std::int64_t ic = 0; ic < g.c_in; ++ic) {
            const T* plane = x.plane(n, ic).data();
            for (int k = 0; k < g.taps; ++k) {
              const auto [py, px] = spec.tap_offset(k);
              const double sy = cy + py + static_cast<double>(field.offsets(n, 2 * k, oy, ox));
              const double sx = cx + px + static_cast<double>(field.offsets(n, 2 * k + 1, oy, ox));
              const double m = mod ? static_cast<double>(field.modulation(n, k, oy, ox)) : 1.0;
              const double wk = static_cast<double>(w.weight(oc, ic, k / spec.kernel_w, k % spec.kernel_w));
              acc += wk * detail::sample(plane, g.h, g.w, sy, sx) * m;
            }
          }
          y(n, oc, oy, ox) = static_cast<T>(acc);
        }
      }
    }
  }
  return y;
}

template <typename T>
ConvGrads<T> mdconv_backward(const BasicTensor<T>& x, const ConvWeights<T>& w, const KernelSpec& spec,
                             const OffsetModulationField<T>& field, const BasicTensor<T>& upstream) {
  const Geometry g = check_conv(x, w, spec, &field);
  check_upstream(upstream, g);
  const bool mod = field.modulated();
  const std::int64_t plane_size = g.h * g.w;
  std::vector<double> gx(static_cast<std::size_t>(g.n * g.c_in * plane_size));
  std::vector<double> gw(static_cast<std::size_t>(g.c_out * g.c_in * g.taps));
  std::vector<double> gb(static_cast<std::size_t>(g.c_out));
  std::vector<double> goff(static_cast<std::size_t>(field.offsets.size()));
  std::vector<double> gm(static_cast<std::size_t>(field.modulation.size()));

  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
      for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
        const double cy = static_cast<double>(oy * spec.stride_h - spec.pad_h + (spec.kernel_h / 2) * spec.dilation_h);
        const double cx = static_cast<double>(ox * spec.stride_w - spec.pad_w + (spec.kernel_w / 2) * spec.dilation_w);
        for (std::int64_t oc = 0; oc < g.c_out; ++oc) gb[static_cast<std::size_t>(oc)] += upstream(n, oc, oy, ox);
        for (int k = 0; k < g.taps; ++k) {
          const auto [py, px] = spec.tap_offset(k);
          const double sy = cy + py + static_cast<double>(field.offsets(n, 2 * k, oy, ox));
          const double sx = cx + px + static_cast<double>(field.offsets(n, 2 * k + 1, oy, ox));
          const double m = mod ? static_cast<double>(field.modulation(n, k, oy, ox)) : 1.0;
          double d_y = 0.0, d_x = 0.0, d_m = 0.0;
          for (std::int64_t ic = 0; ic < g.c_in; ++ic) {
            const auto s = detail::sample_grad(x.plane(n, ic).data(), g.h, g.w, sy, sx);
            double* gx_plane = &gx[static_cast<std::size_t>((n * g.c_in + ic) * plane_size)];
            for (std::int64_t oc = 0; oc < g.c_out; ++oc) {
              const double u = static_cast<double>(upstream(n, oc, oy, ox));
              const double wk = static_cast<double>(w.weight(oc, ic, k / spec.kernel_w, k % spec.kernel_w));
              gw[static_cast<std::size_t>((oc * g.c_in + ic) * g.taps + k)] += u * s.value * m;
              const double coef = u * wk * m;
              for (int t = 0; t < s.count; ++t) gx_plane[s.index[t]] += coef * s.weight[t];
              d_y += coef * s.d_y;
              d_x += coef * s.d_x;
              d_m += u * wk * s.value;
            }
          }
          goff[static_cast<std::size_t>(field.offsets.index(n, 2 * k, oy, ox))] += d_y;
          goff[static_cast<std::size_t>(field.offsets.index(n, 2 * k + 1, oy, ox))] += d_x;
          if (mod) gm[static_cast<std::size_t>(field.modulation.index(n, k, oy, ox))] += d_m;
        }
      }
    }
  }

  ConvGrads<T> out;
  out.grad_x = to_tensor<T>(gx, x.dims());
  out.grad_w = to_tensor<T>(gw, w.weight.dims());
  if (w.has_bias()) {
    out.grad_bias.resize(gb.size());
    for (std::size_t i = 0; i < gb.size(); ++i) out.grad_bias[i] = static_cast<T>(gb[i]);
  }
  out.grad_offsets = to_tensor<T>(goff, field.offsets.dims());
  if (mod) out.grad_modulation = to_tensor<T>(gm, field.modulation.dims());
  return out;
}

// ---------------------------------------------------------------------------
// Optimized path
// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> mdconv_forward_optimized(const BasicTensor<T>& x, const ConvWeights<T>& w, const KernelSpec& spec,
                                        const OffsetModulationField<T>& field, const Execution& exec) {
  return forward_optimized(x, w, spec, &field, exec);
}

template <typename T>
ConvGrads<T> mdconv_backward_optimized(const BasicTensor<T>& x, const ConvWeights<T>& w, const KernelSpec& spec,
                                       const OffsetModulationField<T>& field, const BasicTensor<T>& upstream,
                                       const Execution& exec) {
  return backward_optimized(x, w, spec, &field, upstream, exec);
}

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const ConvWeights<T>& w, const KernelSpec& spec,
                              const Execution& exec) {
  return forward_optimized<T>(x, w, spec, nullptr, exec);
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const ConvWeights<T>& w, const KernelSpec& spec,
                             const BasicTensor<T>& upstream, const Execution& exec) {
  return backward_optimized<T>(x, w, spec, nullptr, upstream, exec);
}

// ---------------------------------------------------------------------------
// Offset / modulation branch
// ---------------------------------------------------------------------------

ParamGroup offset_branch_param_group() { return {"offset_branch", 0.1}; }
ParamGroup main_param_group() { return {"main", 1.0}; }

template <typename T>
ConvWeights<T> zero_offset_branch(std::int64_t in_channels, const KernelSpec& spec, bool modulated) {
  ConvWeights<T> b;
  const int out = branch_channels(spec, modulated);
  b.weight = BasicTensor<T>(Dims{out, in_channels, spec.kernel_h, spec.kernel_w});
  b.bias.assign(static_cast<std::size_t>(out), T(0));
  return b;
}

template <typename T>
OffsetModulationField<T> offset_branch_forward(const BasicTensor<T>& x, const ConvWeights<T>& branch_w,
                                               const KernelSpec& spec, bool modulated, const Execution& exec) {
  const int taps = spec.taps();
  const int want = branch_channels(spec, modulated);
  if (branch_w.out_channels() != want) {
    throw ShapeError("offset branch has " + std::to_string(branch_w.out_channels()) + " output channels, expected " +
                     std::to_string(want));
  }
  const BasicTensor<T> raw = conv2d_forward(x, branch_w, spec, exec);
  const Dims d = raw.dims();
  OffsetModulationField<T> f = make_field<T>(d.n, taps, d.h, d.w, T(0), T(1), modulated);
  const std::int64_t plane = d.h * d.w;
  for (std::int64_t n = 0; n < d.n; ++n) {
    std::copy_n(raw.plane(n, 0).data(), 2 * taps * plane, f.offsets.plane(n, 0).data());
    if (!modulated) continue;
    const T* src = raw.plane(n, 2 * taps).data();
    T* dst = f.modulation.plane(n, 0).data();
    for (std::int64_t i = 0; i < taps * plane; ++i) dst[i] = static_cast<T>(sigmoid(static_cast<double>(src[i])));
  }
  return f;
}

template <typename T>
ConvGrads<T> offset_branch_backward(const BasicTensor<T>& x, const ConvWeights<T>& branch_w, const KernelSpec& spec,
                                    const OffsetModulationField<T>& field, const BasicTensor<T>& grad_offsets,
                                    const BasicTensor<T>& grad_modulation, const Execution& exec) {
  const int taps = spec.taps();
  const bool modulated = field.modulated();
  const int want = branch_channels(spec, modulated);
  if (branch_w.out_channels() != want) {
    throw ShapeError("offset branch has " + std::to_string(branch_w.out_channels()) + " output channels, expected " +
                     std::to_string(want));
  }
  if (grad_offsets.dims() != field.offsets.dims()) throw ShapeError("grad_offsets dims mismatch");
  if (modulated && grad_modulation.dims() != field.modulation.dims()) throw ShapeError("grad_modulation dims mismatch");
  const Dims od = field.offsets.dims();
  const std::int64_t plane = od.h * od.w;
  BasicTensor<T> up(Dims{od.n, want, od.h, od.w});
  for (std::int64_t n = 0; n < od.n; ++n) {
    std::copy_n(grad_offsets.plane(n, 0).data(), 2 * taps * plane, up.plane(n, 0).data());
    if (!modulated) continue;
    const T* m = field.modulation.plane(n, 0).data();
    const T* gm = grad_modulation.plane(n, 0).data();
    T* dst = up.plane(n, 2 * taps).data();
    for (std::int64_t i = 0; i < taps * plane; ++i) {
      const double mv = static_cast<double>(m[i]);
      dst[i] = static_cast<T>(static_cast<double>(gm[i]) * mv * (1.0 - mv));
    }
  }
  return conv2d_backward(x, branch_w, spec, up, exec);
}

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

LayerCost layer_cost(LayerKind kind, std::int64_t c_in, std::int64_t c_out, std::int64_t in_h, std::int64_t in_w,
                     const KernelSpec& spec, bool bias) {
  const std::int64_t taps = spec.taps();
  const std::int64_t positions = spec.out_h(in_h) * spec.out_w(in_w);
  LayerCost cost;
  cost.params = c_out * c_in * taps + (bias ? c_out : 0);
  cost.macs = c_out * c_in * taps * positions;
  if (kind != LayerKind::regular) {
    const std::int64_t branch_out = branch_channels(spec, kind == LayerKind::mdconv);
    cost.params += branch_out * c_in * taps + branch_out;
    cost.macs += branch_out * c_in * taps * positions;
  }
  return cost;
}

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::regular: return "regular";
    case LayerKind::dconv: return "dconv";
    case LayerKind::mdconv: return "mdconv";
  }
  return "regular";
}

LayerKind layer_kind_from_string(const std::string& name) {
  if (name == "regular") return LayerKind::regular;
  if (name == "dconv") return LayerKind::dconv;
  if (name == "mdconv") return LayerKind::mdconv;
  throw ConfigError("unknown layer kind '" + name + "' (expected regular, dconv or mdconv)");
}

#define DCN2_INSTANTIATE(T)                                                                                        \
  template BasicTensor<T> mdconv_forward<T>(const BasicTensor<T>&, const ConvWeights<T>&, const KernelSpec&,       \
                                            const OffsetModulationField<T>&);                                      \
  template ConvGrads<T> mdconv_backward<T>(const BasicTensor<T>&, const ConvWeights<T>&, const KernelSpec&,        \
                                           const OffsetModulationField<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> mdconv_forward_optimized<T>(const BasicTensor<T>&, const ConvWeights<T>&,                \
                                                      const KernelSpec&, const OffsetModulationField<T>&,          \
                                                      const Execution&);                                           \
  template ConvGrads<T> mdconv_backward_optimized<T>(const BasicTensor<T>&, const ConvWeights<T>&,                 \
                                                     const KernelSpec&, const OffsetModulationField<T>&,           \
                                                     const BasicTensor<T>&, const Execution&);                     \
  template BasicTensor<T> conv2d_forward<T>(const BasicTensor<T>&, const ConvWeights<T>&, const KernelSpec&,       \
                                            const Execution&);                                                     \
  template ConvGrads<T> conv2d_backward<T>(const BasicTensor<T>&, const ConvWeights<T>&, const KernelSpec&,        \
                                           const BasicTensor<T>&, const Execution&);                               \
  template ConvWeights<T> zero_offset_branch<T>(std::int64_t, const KernelSpec&, bool);                            \
  template OffsetModulationField<T> offset_branch_forward<T>(const BasicTensor<T>&, const ConvWeights<T>&,         \
                                                             const KernelSpec&, bool, const Execution&);           \
  template ConvGrads<T> offset_branch_backward<T>(const BasicTensor<T>&, const ConvWeights<T>&, const KernelSpec&, \
                                                  const OffsetModulationField<T>&, const BasicTensor<T>&,          \
                                                  const BasicTensor<T>&, const Execution&);

DCN2_INSTANTIATE(float)
DCN2_INSTANTIATE(double)

#undef DCN2_INSTANTIATE

}  // namespace dcn2
