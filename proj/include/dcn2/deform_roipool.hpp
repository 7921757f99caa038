#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dcn2/affine.hpp"
#include "dcn2/parallel.hpp"
#include "dcn2/tensor.hpp"

namespace dcn2 {

/// Region of interest in continuous feature-map coordinates (integer values
/// are pixel centers). Both edges are inclusive, so the whole of an H x W map
/// is (0, 0, W - 1, H - 1).
struct RoI {
  std::int64_t batch_index = 0;
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const noexcept { return x2 - x1; }
  double height() const noexcept { return y2 - y1; }

  friend bool operator==(const RoI&, const RoI&) = default;
};

struct PoolSpec {
  int bins_h = 7;
  int bins_w = 7;
  int samples = 2;  // grid points per bin axis; n_k = samples^2

  int bins() const noexcept { return bins_h * bins_w; }
  void validate() const {
    if (bins_h < 1 || bins_w < 1) throw ArgumentError("pool bins must be >= 1");
    if (samples < 1) throw ArgumentError("samples per bin axis must be >= 1");
  }
};

/// Per-RoI bin offsets (dy_k, dx_k) in absolute feature-map pixels and bin
/// modulation in [0, 1]. Empty `modulation` disables modulation.
template <typename T>
struct BinField {
  std::vector<T> offsets;
  std::vector<T> modulation;

  bool modulated() const noexcept { return !modulation.empty(); }
};

template <typename T>
BinField<T> make_bin_field(int bins, T modulation = T(1), bool modulated = true) {
  BinField<T> f;
  f.offsets.assign(static_cast<std::size_t>(2 * bins), T(0));
  if (modulated) f.modulation.assign(static_cast<std::size_t>(bins), modulation);
  return f;
}

template <typename T>
struct PoolGrads {
  BasicTensor<T> grad_x;
  std::vector<BinField<T>> grad_fields;
};

/// Modulated deformable RoI pooling. Bin k of each RoI is
///   dm_k / n_k * sum_j x(p_kj + dp_k)
/// where the p_kj sit at fractions (j + 0.5) / samples of the bin rectangle
/// along each axis. Output is (R, C, bins_h, bins_w).
template <typename T>
BasicTensor<T> mdpool_forward(const BasicTensor<T>& x, std::span<const RoI> rois, const PoolSpec& spec,
                              std::span<const BinField<T>> fields, const Execution& exec = {});

template <typename T>
PoolGrads<T> mdpool_backward(const BasicTensor<T>& x, std::span<const RoI> rois, const PoolSpec& spec,
                             std::span<const BinField<T>> fields, const BasicTensor<T>& upstream,
                             const Execution& exec = {});

/// Plain aligned average pooling (dp = 0, dm = 1) on the same grid.
template <typename T>
BasicTensor<T> roi_align_forward(const BasicTensor<T>& x, std::span<const RoI> rois, const PoolSpec& spec);

// ---------------------------------------------------------------------------
// Sibling fc branch producing a BinField for one RoI
// ---------------------------------------------------------------------------

template <typename T>
struct RoiBranch {
  Affine<T> fc1;
  Affine<T> fc2;
  Affine<T> out;  // 3K outputs

  static constexpr std::int64_t kDefaultHidden = 1024;
};

/// Hidden fc layers drawn from N(0, 0.01^2); the output layer starts at zero
/// so the initial field is dp = 0, dm = 0.5.
template <typename T>
RoiBranch<T> init_roi_branch(std::int64_t in_features, const PoolSpec& spec, std::mt19937_64& rng,
                             std::int64_t hidden = RoiBranch<T>::kDefaultHidden);

struct RoiBranchCache {
  std::vector<double> input;
  std::vector<double> hidden1;  // after ReLU
  std::vector<double> hidden2;  // after ReLU
  std::vector<double> raw;      // 3K pre-normalization outputs
};

/// fc1 -> ReLU -> fc2 -> ReLU -> out. The first 2K outputs are offsets
/// normalized by the RoI size: each (dy, dx) pair is scaled by (height,
/// width). The last K outputs go through a sigmoid to become modulation.
/// `pooled` is the aligned pooling of the RoI, flattened (C, bins_h, bins_w).
template <typename T>
BinField<T> roi_branch_forward(std::span<const T> pooled, const RoiBranch<T>& branch, const RoI& roi,
                               const PoolSpec& spec, RoiBranchCache* cache = nullptr);

/// Accumulates parameter gradients into `grads` and returns dL/d(pooled).
template <typename T>
std::vector<double> roi_branch_backward(const RoiBranch<T>& branch, const RoiBranchCache& cache, const RoI& roi,
                                        const PoolSpec& spec, const BinField<T>& grad_field, RoiBranch<T>& grads);

template <typename T>
RoiBranch<T> zeros_like(const RoiBranch<T>& b) {
  return {Affine<T>::zeros(b.fc1.in, b.fc1.out), Affine<T>::zeros(b.fc2.in, b.fc2.out),
          Affine<T>::zeros(b.out.in, b.out.out)};
}

/// Parses a RoI list: one `batch x1 y1 x2 y2` line per RoI. Blank lines and
/// lines starting with '#' are skipped.
std::vector<RoI> parse_roi_list(const std::string& text);
std::vector<RoI> load_roi_list(const std::string& path);
std::string format_roi_list(std::span<const RoI> rois);

}  // namespace dcn2
