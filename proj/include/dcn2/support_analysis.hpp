#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dcn2/conv_types.hpp"
#include "dcn2/deform_roipool.hpp"
#include "dcn2/mimic.hpp"
#include "dcn2/tensor.hpp"

namespace dcn2 {

// ---------------------------------------------------------------------------
// Superpixels
// ---------------------------------------------------------------------------

struct SuperpixelLabeling {
  std::int64_t height = 0;
  std::int64_t width = 0;
  int count = 0;
  std::vector<int> labels;  // row-major, values in [0, count)

  int at(std::int64_t y, std::int64_t x) const { return labels[static_cast<std::size_t>(y * width + x)]; }
};

struct SlicOptions {
  int segments = 100;
  double compactness = 10.0;
  int iterations = 10;
};

/// SLIC clustering of batch element 0 in (color, position) space with
/// d = d_color + (compactness / S) * d_spatial, S = sqrt(H * W / segments).
/// Centers start on an nx x ny grid with nx * ny as close to `segments` as
/// possible (ties go to the most square cells, then to more columns) and are
/// moved to the lowest-gradient pixel of their 3x3 neighbourhood. Fragments
/// disconnected from the main body of their cluster are merged into the
/// largest adjacent segment, so every segment is 4-connected.
SuperpixelLabeling slic_segment(const Tensor& image, const SlicOptions& opts = {});

/// Number of grid columns and rows used to seed `segments` centers.
std::pair<int, int> slic_grid(std::int64_t height, std::int64_t width, int segments);

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

/// A network node as seen by the analysis routines. `evaluate` maps a
/// (1, C, H, W) image to the node response (one value for scalar nodes).
/// `vjp`, when present, returns d<upstream, node>/d(image).
struct NodeProbe {
  std::function<FeatureVec(const Tensor&)> evaluate;
  std::function<Tensor(const Tensor&, std::span<const double>)> vjp;

  bool differentiable() const noexcept { return static_cast<bool>(vjp); }
};

/// Per-pixel sum over channels of |d node / d pixel|, as a (1, 1, H, W)
/// tensor. Vector nodes are reduced through their L2 norm.
Tensor effective_receptive_field(const NodeProbe& probe, const Tensor& image);

// ---------------------------------------------------------------------------
// Effective sampling / bin locations
// ---------------------------------------------------------------------------

/// Forward state recorded by a deformable layer.
struct DeformConvRecord {
  TensorD x;
  ConvWeights<double> w;
  KernelSpec spec;
  OffsetModulationField<double> field;
};

struct DeformPoolRecord {
  TensorD x;
  std::vector<RoI> rois;
  PoolSpec spec;
  std::vector<BinField<double>> fields;
};

struct DeformLayerState {
  std::optional<DeformConvRecord> conv;
  std::optional<DeformPoolRecord> pool;
};

/// Gradient magnitude of the node with respect to every 2-D sampling
/// location. For a conv layer the result is (N, K, H_out, W_out); for a
/// pooling layer it is (R, 1, bins_h, bins_w). `upstream` is dnode/dy of
/// the layer output.
TensorD effective_sampling_locations(const DeformLayerState& state, const TensorD& upstream);

// ---------------------------------------------------------------------------
// Error-bounded saliency region
// ---------------------------------------------------------------------------

struct Rect {
  std::int64_t x = 0;
  std::int64_t y = 0;
  std::int64_t w = 0;
  std::int64_t h = 0;

  std::int64_t area() const noexcept { return w * h; }
  friend bool operator==(const Rect&, const Rect&) = default;
};

struct SaliencyOptions {
  double epsilon = 0.1;
  double area_step = 0.01;  // fraction of the image area added per growth step
  SlicOptions slic{};
  std::optional<RoI> aspect;  // grow with this box's aspect ratio instead of a square
};

struct SaliencyMask {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> mask;  // 1 = kept
  double achieved_error = 0.0;
  double epsilon = 0.0;

  std::int64_t kept() const;
};

struct SaliencyResult {
  SaliencyMask mask;
  Rect rect;
  int segments_kept = 0;
  std::int64_t probe_calls = 0;
  std::vector<std::int64_t> growth_areas;  // rectangle areas tried in step 1
  std::vector<std::int64_t> mask_sizes;    // kept pixels after each step-2 iteration
  SuperpixelLabeling segments;             // labeling of the rectangle interior
};

/// Reconstruction error between node responses: 1 - cos for vector nodes,
/// |a - b| / |b| for scalar nodes (b is the unmasked response).
double reconstruction_error(std::span<const double> masked, std::span<const double> original);

/// Zeroes every pixel outside the mask, in all channels.
Tensor apply_mask(const Tensor& image, std::span<const std::uint8_t> mask);

/// Step 1 grows a centered rectangle from zero area in even increments until
/// the masked response is within epsilon. Step 2 splits the rectangle into
/// superpixels and greedily drops the one whose removal raises the error
/// least, as long as the bound still holds. Throws ConvergenceError when even
/// the full image misses the bound.
SaliencyResult saliency_region(const NodeProbe& probe, const Tensor& image, const SaliencyOptions& opts = {});

/// {epsilon, achieved_error, rect: [x, y, w, h], segments_kept, probe_calls}
std::string saliency_report_json(const SaliencyResult& result);

}  // namespace dcn2
