#include "dcn2/support_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>

#include "dcn2/deform_conv.hpp"

namespace dcn2 {

Tensor effective_receptive_field(const NodeProbe& probe, const Tensor& image) {
  if (!probe.evaluate) throw UsageError("probe has no evaluation function");
  if (!probe.differentiable()) throw CapabilityError("effective receptive field needs a differentiable probe");
  const Dims d = image.dims();
  if (d.n != 1) throw ShapeError("probe images must have batch size 1, got " + d.str());

  const FeatureVec node = probe.evaluate(image);
  FeatureVec upstream(node.size(), 0.0);
  if (node.size() == 1) {
    upstream[0] = 1.0;
  } else {
    double norm = 0.0;
    for (double v : node) norm += v * v;
    norm = std::sqrt(norm);
    // The norm is not differentiable at zero; report a zero map there.
    if (norm > 0.0) {
      for (std::size_t i = 0; i < node.size(); ++i) upstream[i] = node[i] / norm;
    }
  }
  const Tensor grad = probe.vjp(image, upstream);
  if (grad.dims() != d) throw ShapeError("probe gradient " + grad.dims().str() + " does not match image " + d.str());

  Tensor out(Dims{1, 1, d.h, d.w});
  for (std::int64_t c = 0; c < d.c; ++c) {
    for (std::int64_t y = 0; y < d.h; ++y) {
      for (std::int64_t x = 0; x < d.w; ++x) {
        out(0, 0, y, x) = static_cast<float>(static_cast<double>(out(0, 0, y, x)) + std::abs(grad(0, c, y, x)));
      }
    }
  }
  return out;
}

TensorD effective_sampling_locations(const DeformLayerState& state, const TensorD& upstream) {
  if (state.conv) {
    const DeformConvRecord& r = *state.conv;
    const ConvGrads<double> g = mdconv_backward(r.x, r.w, r.spec, r.field, upstream);
    const Dims od = g.grad_offsets.dims();
    TensorD out(Dims{od.n, od.c / 2, od.h, od.w});
    for (std::int64_t n = 0; n < od.n; ++n) {
      for (std::int64_t k = 0; k < od.c / 2; ++k) {
        for (std::int64_t y = 0; y < od.h; ++y) {
          for (std::int64_t x = 0; x < od.w; ++x) {
            out(n, k, y, x) = std::hypot(g.grad_offsets(n, 2 * k, y, x), g.grad_offsets(n, 2 * k + 1, y, x));
          }
        }
      }
    }
    return out;
  }
  if (state.pool) {
    const DeformPoolRecord& r = *state.pool;
    const PoolGrads<double> g =
        mdpool_backward<double>(r.x, r.rois, r.spec, std::span<const BinField<double>>(r.fields), upstream);
    const auto num_rois = static_cast<std::int64_t>(r.rois.size());
    TensorD out(Dims{num_rois, 1, r.spec.bins_h, r.spec.bins_w});
    for (std::int64_t i = 0; i < num_rois; ++i) {
      const auto& off = g.grad_fields[static_cast<std::size_t>(i)].offsets;
      for (int k = 0; k < r.spec.bins(); ++k) {
        out(i, 0, k / r.spec.bins_w, k % r.spec.bins_w) = std::hypot(off[2 * k], off[2 * k + 1]);
      }
    }
    return out;
  }
  throw UsageError("layer has no recorded forward state");
}

std::int64_t SaliencyMask::kept() const {
  return std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; });
}

double reconstruction_error(std::span<const double> masked, std::span<const double> original) {
  if (masked.size() != original.size()) throw ShapeError("node responses differ in length");
  if (masked.empty()) throw ShapeError("empty node response");
  if (original.size() == 1) {
    const double diff = std::abs(masked[0] - original[0]);
    if (original[0] == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return diff / std::abs(original[0]);
  }
  return cosine_mimic_loss(masked, original).loss;
}

Tensor apply_mask(const Tensor& image, std::span<const std::uint8_t> mask) {
  const Dims d = image.dims();
  if (static_cast<std::int64_t>(mask.size()) != d.h * d.w) throw ShapeError("mask does not match image " + d.str());
  Tensor out = image;
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t c = 0; c < d.c; ++c) {
      auto plane = out.plane(n, c);
      for (std::size_t p = 0; p < plane.size(); ++p) {
        if (!mask[p]) plane[p] = 0.0f;
      }
    }
  }
  return out;
}

namespace {

// Centered rectangle of (approximately) the given area and aspect ratio
// w / h, clamped to the image; once one side is full the other keeps growing.
Rect centered_rect(double area, double aspect, std::int64_t height, std::int64_t width) {
  const double hh = static_cast<double>(height), ww = static_cast<double>(width);
  double h = std::sqrt(area / aspect);
  double w = aspect * h;
  if (h > hh) {
    h = hh;
    w = area / hh;
  }
  if (w > ww) {
    w = ww;
    h = std::min(hh, area / ww);
  }
  Rect r;
  r.w = std::clamp<std::int64_t>(std::llround(w), 0, width);
  r.h = std::clamp<std::int64_t>(std::llround(h), 0, height);
  if (r.w == 0 || r.h == 0) r.w = r.h = 0;
  r.x = (width - r.w) / 2;
  r.y = (height - r.h) / 2;
  return r;
}

std::vector<std::uint8_t> rect_mask(const Rect& r, std::int64_t height, std::int64_t width) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(height * width), 0);
  for (std::int64_t y = r.y; y < r.y + r.h; ++y) {
    for (std::int64_t x = r.x; x < r.x + r.w; ++x) m[static_cast<std::size_t>(y * width + x)] = 1;
  }
  return m;
}

}  // namespace

SaliencyResult saliency_region(const NodeProbe& probe, const Tensor& image, const SaliencyOptions& opts) {
  if (!probe.evaluate) throw UsageError("probe has no evaluation function");
  if (!(opts.epsilon > 0.0)) throw ArgumentError("epsilon must be > 0");
  if (!(opts.area_step > 0.0 && opts.area_step <= 1.0)) throw ArgumentError("area step must be in (0, 1]");
  const Dims d = image.dims();
  if (d.n != 1 || d.c < 1 || d.h < 1 || d.w < 1) throw ShapeError("saliency needs a single nonempty image, got " + d.str());
  const std::int64_t height = d.h, width = d.w;

  double aspect = 1.0;
  if (opts.aspect) {
    const RoI& a = *opts.aspect;
    if (!(a.x2 >= a.x1 && a.y2 >= a.y1)) throw ArgumentError("aspect RoI must have x2 >= x1 and y2 >= y1");
    aspect = (a.x2 - a.x1 + 1.0) / (a.y2 - a.y1 + 1.0);
  }

  SaliencyResult res;
  const FeatureVec original = probe.evaluate(image);
  ++res.probe_calls;
  auto error_of = [&](std::span<const std::uint8_t> mask) {
    ++res.probe_calls;
    return reconstruction_error(probe.evaluate(apply_mask(image, mask)), original);
  };

  // Step 1: grow the rectangle.
  const double total = static_cast<double>(height * width);
  bool found = false;
  double err = 0.0;
  std::vector<std::uint8_t> mask;
  std::int64_t last_area = -1;
  for (std::int64_t t = 0;; ++t) {
    const double area = std::min(total, static_cast<double>(t) * opts.area_step * total);
    const Rect r = area >= total ? Rect{0, 0, width, height} : centered_rect(area, aspect, height, width);
    if (r.area() > last_area) {
      last_area = r.area();
      res.growth_areas.push_back(r.area());
      mask = rect_mask(r, height, width);
      err = error_of(mask);
      if (err < opts.epsilon) {
        res.rect = r;
        found = true;
        break;
      }
    }
    if (area >= total) break;
  }
  if (!found) {
    throw ConvergenceError("reconstruction error " + std::to_string(err) + " of the full image is not below epsilon " +
                           std::to_string(opts.epsilon) + "; the probe is not deterministic");
  }

  // Step 2: greedy superpixel removal inside the rectangle.
  const Rect& r = res.rect;
  std::vector<int> seg(static_cast<std::size_t>(height * width), -1);
  int num_segments = 0;
  if (r.area() > 0) {
    Tensor crop(Dims{1, d.c, r.h, r.w});
    for (std::int64_t c = 0; c < d.c; ++c) {
      for (std::int64_t y = 0; y < r.h; ++y) {
        for (std::int64_t x = 0; x < r.w; ++x) crop(0, c, y, x) = image(0, c, r.y + y, r.x + x);
      }
    }
    SlicOptions so = opts.slic;
    so.segments = static_cast<int>(std::min<std::int64_t>(so.segments, r.area()));
    res.segments = slic_segment(crop, so);
    num_segments = res.segments.count;
    for (std::int64_t y = 0; y < r.h; ++y) {
      for (std::int64_t x = 0; x < r.w; ++x) {
        seg[static_cast<std::size_t>((r.y + y) * width + r.x + x)] = res.segments.at(y, x);
      }
    }
  }

  std::vector<char> kept(static_cast<std::size_t>(num_segments), 1);
  auto mask_without = [&](int drop) {
    std::vector<std::uint8_t> m(seg.size(), 0);
    for (std::size_t p = 0; p < seg.size(); ++p) {
      m[p] = seg[p] >= 0 && seg[p] != drop && kept[static_cast<std::size_t>(seg[p])] ? 1 : 0;
    }
    return m;
  };
  auto count_kept = [](const std::vector<std::uint8_t>& m) {
    return static_cast<std::int64_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
  };
  res.mask_sizes.push_back(count_kept(mask));

  for (;;) {
    int best = -1;
    double best_err = std::numeric_limits<double>::infinity();
    for (int s = 0; s < num_segments; ++s) {
      if (!kept[static_cast<std::size_t>(s)]) continue;
      const double e = error_of(mask_without(s));
      if (e < best_err) {
        best_err = e;
        best = s;
      }
    }
    if (best < 0 || !(best_err < opts.epsilon)) break;
    kept[static_cast<std::size_t>(best)] = 0;
    err = best_err;
    mask = mask_without(-1);
    const std::int64_t size = count_kept(mask);
    if (size > res.mask_sizes.back()) throw Error("saliency step 2 grew the mask");
    res.mask_sizes.push_back(size);
  }

  if (!(err < opts.epsilon)) throw Error("saliency result violates the error bound");
  res.segments_kept = static_cast<int>(std::count(kept.begin(), kept.end(), 1));
  res.mask = {height, width, std::move(mask), err, opts.epsilon};
  return res;
}

std::string saliency_report_json(const SaliencyResult& result) {
  nlohmann::json j{
      {"epsilon", result.mask.epsilon},
      {"achieved_error", result.mask.achieved_error},
      {"rect", {result.rect.x, result.rect.y, result.rect.w, result.rect.h}},
      {"segments_kept", result.segments_kept},
      {"probe_calls", result.probe_calls},
      {"mask_sizes", result.mask_sizes},
  };
  return j.dump();
}

}  // namespace dcn2
