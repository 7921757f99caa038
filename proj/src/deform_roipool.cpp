#include "dcn2/deform_roipool.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dcn2/sampling.hpp"

namespace dcn2 {

namespace {

template <typename T>
void check_pool(const BasicTensor<T>& x, std::span<const RoI> rois, const PoolSpec& spec,
                std::span<const BinField<T>> fields) {
  spec.validate();
  if (fields.size() != rois.size()) {
    throw ShapeError("got " + std::to_string(fields.size()) + " bin fields for " + std::to_string(rois.size()) + " RoIs");
  }
  const auto bins = static_cast<std::size_t>(spec.bins());
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const RoI& roi = rois[r];
    if (roi.batch_index < 0 || roi.batch_index >= x.dims().n) {
      throw ArgumentError("RoI " + std::to_string(r) + " batch index " + std::to_string(roi.batch_index) +
                          " outside [0, " + std::to_string(x.dims().n) + ")");
    }
    if (!std::isfinite(roi.x1) || !std::isfinite(roi.y1) || !std::isfinite(roi.x2) || !std::isfinite(roi.y2)) {
      throw ArgumentError("RoI " + std::to_string(r) + " has non-finite coordinates");
    }
    if (roi.x2 < roi.x1 || roi.y2 < roi.y1) throw ArgumentError("RoI " + std::to_string(r) + " has x2 < x1 or y2 < y1");
    const BinField<T>& f = fields[r];
    if (f.offsets.size() != 2 * bins) throw ShapeError("bin field offsets must hold 2K values");
    if (f.modulated() && f.modulation.size() != bins) throw ShapeError("bin field modulation must hold K values");
    for (T v : f.offsets) {
      if (!std::isfinite(v)) throw ArgumentError("non-finite bin offset");
    }
    for (T v : f.modulation) {
      if (!(v >= T(0) && v <= T(1))) throw ArgumentError("bin modulation outside [0, 1]");
    }
  }
}

// Grid point (iy, ix) of bin (by, bx), before the bin offset is applied.
struct BinGrid {
  double y0, x0, step_y, step_x;
};

inline BinGrid bin_grid(const RoI& roi, const PoolSpec& spec, int by, int bx) {
  const double bin_h = roi.height() / spec.bins_h;
  const double bin_w = roi.width() / spec.bins_w;
  const double step_y = bin_h / spec.samples;
  const double step_x = bin_w / spec.samples;
  return {roi.y1 + by * bin_h + 0.5 * step_y, roi.x1 + bx * bin_w + 0.5 * step_x, step_y, step_x};
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

template <typename T>
BasicTensor<T> mdpool_forward(const BasicTensor<T>& x, std::span<const RoI> rois, const PoolSpec& spec,
                              std::span<const BinField<T>> fields, const Execution& exec) {
  check_pool(x, rois, spec, fields);
  const Dims xd = x.dims();
  const auto num_rois = static_cast<std::int64_t>(rois.size());
  BasicTensor<T> y(Dims{num_rois, xd.c, spec.bins_h, spec.bins_w});
  const double inv_n = 1.0 / (spec.samples * spec.samples);
  parallel_for(exec, 0, num_rois, [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r) {
      const RoI& roi = rois[static_cast<std::size_t>(r)];
      const BinField<T>& f = fields[static_cast<std::size_t>(r)];
      for (int by = 0; by < spec.bins_h; ++by) {
        for (int bx = 0; bx < spec.bins_w; ++bx) {
          const int k = by * spec.bins_w + bx;
          const BinGrid grid = bin_grid(roi, spec, by, bx);
          const double dy = static_cast<double>(f.offsets[2 * k]);
          const double dx = static_cast<double>(f.offsets[2 * k + 1]);
          const double m = f.modulated() ? static_cast<double>(f.modulation[k]) : 1.0;
          for (std::int64_t c = 0; c < xd.c; ++c) {
            const T* plane = x.plane(roi.batch_index, c).data();
            double acc = 0.0;
            for (int iy = 0; iy < spec.samples; ++iy) {
              for (int ix = 0; ix < spec.samples; ++ix) {
                acc += detail::sample(plane, xd.h, xd.w, grid.y0 + iy * grid.step_y + dy, grid.x0 + ix * grid.step_x + dx);
              }
            }
            y(r, c, by, bx) = static_cast<T>(acc * inv_n * m);
          }
        }
      }
    }
  });
  return y;
}

template <typename T>
PoolGrads<T> mdpool_backward(const BasicTensor<T>& x, std::span<const RoI> rois, const PoolSpec& spec,
                             std::span<const BinField<T>> fields, const BasicTensor<T>& upstream,
                             const Execution& exec) {
  check_pool(x, rois, spec, fields);
  const Dims xd = x.dims();
  const auto num_rois = static_cast<std::int64_t>(rois.size());
  const Dims want{num_rois, xd.c, spec.bins_h, spec.bins_w};
  if (upstream.dims() != want) throw ShapeError("upstream " + upstream.dims().str() + " expected " + want.str());
  const double inv_n = 1.0 / (spec.samples * spec.samples);

  PoolGrads<T> out;
  out.grad_fields.resize(rois.size());

  // Offsets and modulation: each RoI is independent.
  parallel_for(exec, 0, num_rois, [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r) {
      const RoI& roi = rois[static_cast<std::size_t>(r)];
      const BinField<T>& f = fields[static_cast<std::size_t>(r)];
      BinField<T>& gf = out.grad_fields[static_cast<std::size_t>(r)];
      gf = make_bin_field<T>(spec.bins(), T(0), f.modulated());
      for (int by = 0; by < spec.bins_h; ++by) {
        for (int bx = 0; bx < spec.bins_w; ++bx) {
          const int k = by * spec.bins_w + bx;
          const BinGrid grid = bin_grid(roi, spec, by, bx);
          const double dy = static_cast<double>(f.offsets[2 * k]);
          const double dx = static_cast<double>(f.offsets[2 * k + 1]);
          const double m = f.modulated() ? static_cast<double>(f.modulation[k]) : 1.0;
          double g_y = 0.0, g_x = 0.0, g_m = 0.0;
          for (std::int64_t c = 0; c < xd.c; ++c) {
            const double u = static_cast<double>(upstream(r, c, by, bx)) * inv_n;
            const T* plane = x.plane(roi.batch_index, c).data();
            for (int iy = 0; iy < spec.samples; ++iy) {
              for (int ix = 0; ix < spec.samples; ++ix) {
                const auto s = detail::sample_grad(plane, xd.h, xd.w, grid.y0 + iy * grid.step_y + dy,
                                                   grid.x0 + ix * grid.step_x + dx);
                g_y += u * m * s.d_y;
                g_x += u * m * s.d_x;
                g_m += u * s.value;
              }
            }
          }
          gf.offsets[2 * k] = static_cast<T>(g_y);
          gf.offsets[2 * k + 1] = static_cast<T>(g_x);
          if (f.modulated()) gf.modulation[k] = static_cast<T>(g_m);
        }
      }
    }
  });

  // Input gradient: channel planes are disjoint, RoIs are visited in order.
  std::vector<double> gx(static_cast<std::size_t>(x.size()));
  parallel_for(exec, 0, xd.c, [&](std::int64_t c0, std::int64_t c1) {
    for (std::int64_t c = c0; c < c1; ++c) {
      for (std::int64_t r = 0; r < num_rois; ++r) {
        const RoI& roi = rois[static_cast<std::size_t>(r)];
        const BinField<T>& f = fields[static_cast<std::size_t>(r)];
        const T* plane = x.plane(roi.batch_index, c).data();
        double* gplane = &gx[static_cast<std::size_t>(x.index(roi.batch_index, c, 0, 0))];
        for (int by = 0; by < spec.bins_h; ++by) {
          for (int bx = 0; bx < spec.bins_w; ++bx) {
            const int k = by * spec.bins_w + bx;
            const double m = f.modulated() ? static_cast<double>(f.modulation[k]) : 1.0;
            const double coef = static_cast<double>(upstream(r, c, by, bx)) * inv_n * m;
            if (coef == 0.0) continue;
            const BinGrid grid = bin_grid(roi, spec, by, bx);
            const double dy = static_cast<double>(f.offsets[2 * k]);
            const double dx = static_cast<double>(f.offsets[2 * k + 1]);
            for (int iy = 0; iy < spec.samples; ++iy) {
              for (int ix = 0; ix < spec.samples; ++ix) {
                const auto s = detail::sample_grad(plane, xd.h, xd.w, grid.y0 + iy * grid.step_y + dy,
                                                   grid.x0 + ix * grid.step_x + dx);
                for (int t = 0; t < s.count; ++t) gplane[s.index[t]] += coef * s.weight[t];
              }
            }
          }
        }
      }
    }
  });
  out.grad_x = BasicTensor<T>(xd);
  for (std::size_t i = 0; i < gx.size(); ++i) out.grad_x.data()[i] = static_cast<T>(gx[i]);
  return out;
}

template <typename T>
BasicTensor<T> roi_align_forward(const BasicTensor<T>& x, std::span<const RoI> rois, const PoolSpec& spec) {
  std::vector<BinField<T>> fields(rois.size(), make_bin_field<T>(spec.bins(), T(1), false));
  return mdpool_forward<T>(x, rois, spec, fields);
}

template <typename T>
RoiBranch<T> init_roi_branch(std::int64_t in_features, const PoolSpec& spec, std::mt19937_64& rng,
                             std::int64_t hidden) {
  RoiBranch<T> b;
  b.fc1 = Affine<T>::gaussian(in_features, hidden, 0.01, rng);
  b.fc2 = Affine<T>::gaussian(hidden, hidden, 0.01, rng);
  b.out = Affine<T>::zeros(hidden, 3 * static_cast<std::int64_t>(spec.bins()));
  return b;
}

template <typename T>
BinField<T> roi_branch_forward(std::span<const T> pooled, const RoiBranch<T>& branch, const RoI& roi,
                               const PoolSpec& spec, RoiBranchCache* cache) {
  const int bins = spec.bins();
  if (branch.out.out != 3 * bins) {
    throw ShapeError("RoI branch output has " + std::to_string(branch.out.out) + " channels, expected " +
                     std::to_string(3 * bins));
  }
  if (branch.fc2.in != branch.fc1.out || branch.out.in != branch.fc2.out) {
    throw ShapeError("RoI branch fc layers do not chain");
  }
  std::vector<double> input(pooled.begin(), pooled.end());
  std::vector<double> h1 = branch.fc1.forward(input);
  relu_inplace(h1);
  std::vector<double> h2 = branch.fc2.forward(h1);
  relu_inplace(h2);
  std::vector<double> raw = branch.out.forward(h2);

  BinField<T> f = make_bin_field<T>(bins);
  for (int k = 0; k < bins; ++k) {
    f.offsets[2 * k] = static_cast<T>(raw[2 * k] * roi.height());
    f.offsets[2 * k + 1] = static_cast<T>(raw[2 * k + 1] * roi.width());
    f.modulation[k] = static_cast<T>(sigmoid(raw[2 * bins + k]));
  }
  if (cache) *cache = {std::move(input), std::move(h1), std::move(h2), std::move(raw)};
  return f;
}

template <typename T>
std::vector<double> roi_branch_backward(const RoiBranch<T>& branch, const RoiBranchCache& cache, const RoI& roi,
                                        const PoolSpec& spec, const BinField<T>& grad_field, RoiBranch<T>& grads) {
  const int bins = spec.bins();
  if (grad_field.offsets.size() != static_cast<std::size_t>(2 * bins)) throw ShapeError("grad field offsets size");
  std::vector<double> g_raw(static_cast<std::size_t>(3 * bins));
  for (int k = 0; k < bins; ++k) {
    g_raw[2 * k] = static_cast<double>(grad_field.offsets[2 * k]) * roi.height();
    g_raw[2 * k + 1] = static_cast<double>(grad_field.offsets[2 * k + 1]) * roi.width();
    if (grad_field.modulated()) {
      const double m = sigmoid(cache.raw[2 * bins + k]);
      g_raw[2 * bins + k] = static_cast<double>(grad_field.modulation[k]) * m * (1.0 - m);
    }
  }
  std::vector<double> g_h2 = branch.out.backward(cache.hidden2, g_raw, grads.out);
  relu_backward_inplace(cache.hidden2, g_h2);
  std::vector<double> g_h1 = branch.fc2.backward(cache.hidden1, g_h2, grads.fc2);
  relu_backward_inplace(cache.hidden1, g_h1);
  return branch.fc1.backward(cache.input, g_h1, grads.fc1);
}

std::vector<RoI> parse_roi_list(const std::string& text) {
  std::vector<RoI> rois;
  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    double batch = 0;
    RoI roi;
    if (!(fields >> batch >> roi.x1 >> roi.y1 >> roi.x2 >> roi.y2)) {
      throw FormatError("RoI list line " + std::to_string(lineno) + " is not 'batch x1 y1 x2 y2'", 0);
    }
    std::string extra;
    if (fields >> extra) throw FormatError("RoI list line " + std::to_string(lineno) + " has extra fields", 0);
    if (batch < 0 || std::floor(batch) != batch) {
      throw FormatError("RoI list line " + std::to_string(lineno) + " has a non-integer batch index", 0);
    }
    roi.batch_index = static_cast<std::int64_t>(batch);
    rois.push_back(roi);
  }
  return rois;
}

std::vector<RoI> load_roi_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_roi_list(ss.str());
}

std::string format_roi_list(std::span<const RoI> rois) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (const RoI& r : rois) out << r.batch_index << ' ' << r.x1 << ' ' << r.y1 << ' ' << r.x2 << ' ' << r.y2 << '\n';
  return out.str();
}

#define DCN2_INSTANTIATE(T)                                                                                         \
  template BasicTensor<T> mdpool_forward<T>(const BasicTensor<T>&, std::span<const RoI>, const PoolSpec&,           \
                                            std::span<const BinField<T>>, const Execution&);                        \
  template PoolGrads<T> mdpool_backward<T>(const BasicTensor<T>&, std::span<const RoI>, const PoolSpec&,            \
                                           std::span<const BinField<T>>, const BasicTensor<T>&, const Execution&);  \
  template BasicTensor<T> roi_align_forward<T>(const BasicTensor<T>&, std::span<const RoI>, const PoolSpec&);       \
  template RoiBranch<T> init_roi_branch<T>(std::int64_t, const PoolSpec&, std::mt19937_64&, std::int64_t);          \
  template BinField<T> roi_branch_forward<T>(std::span<const T>, const RoiBranch<T>&, const RoI&, const PoolSpec&,  \
                                             RoiBranchCache*);                                                      \
  template std::vector<double> roi_branch_backward<T>(const RoiBranch<T>&, const RoiBranchCache&, const RoI&,       \
                                                      const PoolSpec&, const BinField<T>&, RoiBranch<T>&);

DCN2_INSTANTIATE(float)
DCN2_INSTANTIATE(double)

#undef DCN2_INSTANTIATE

}  // namespace dcn2
