#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dcn2/error.hpp"
#include "dcn2/tensor.hpp"

namespace dcn2 {

/// Kernel geometry shared by the regular, deformable and modulated-deformable
/// convolutions. Tap k (row-major over the kernel window) samples input row
///   out_y * stride_h - pad_h + (k / kernel_w) * dilation_h + dy_k
/// which is the window center plus the pre-specified offset p_k plus dy_k.
struct KernelSpec {
  int kernel_h = 3;
  int kernel_w = 3;
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 1;
  int pad_w = 1;
  int dilation_h = 1;
  int dilation_w = 1;

  friend bool operator==(const KernelSpec&, const KernelSpec&) = default;

  int taps() const noexcept { return kernel_h * kernel_w; }

  /// Pre-specified offset p_k = (dy, dx) of tap k relative to the window center.
  std::pair<int, int> tap_offset(int k) const noexcept {
    return {(k / kernel_w - kernel_h / 2) * dilation_h, (k % kernel_w - kernel_w / 2) * dilation_w};
  }

  std::int64_t out_h(std::int64_t in_h) const noexcept {
    return out_extent(in_h, kernel_h, stride_h, pad_h, dilation_h);
  }
  std::int64_t out_w(std::int64_t in_w) const noexcept {
    return out_extent(in_w, kernel_w, stride_w, pad_w, dilation_w);
  }

  void validate() const {
    if (kernel_h < 1 || kernel_w < 1) throw ArgumentError("kernel extent must be >= 1");
    if (stride_h < 1 || stride_w < 1) throw ArgumentError("stride must be >= 1");
    if (dilation_h < 1 || dilation_w < 1) throw ArgumentError("dilation must be >= 1");
    if (pad_h < 0 || pad_w < 0) throw ArgumentError("pad must be >= 0");
  }

 private:
  static std::int64_t out_extent(std::int64_t in, int k, int s, int p, int d) noexcept {
    const std::int64_t span = in + 2 * static_cast<std::int64_t>(p) - static_cast<std::int64_t>(d) * (k - 1) - 1;
    return span < 0 ? 0 : span / s + 1;
  }
};

/// Serialized layer configuration: kernel geometry plus whether the layer
/// applies modulation (false gives the unmodulated deformable layer).
struct LayerConfig {
  KernelSpec kernel;
  bool modulated = true;

  friend bool operator==(const LayerConfig&, const LayerConfig&) = default;
};

std::string layer_config_to_json(const LayerConfig& cfg);
LayerConfig layer_config_from_json(const std::string& text);

/// Weights (C_out, C_in, kernel_h, kernel_w) and an optional per-output bias.
/// An empty `bias` means no bias term.
template <typename T>
struct ConvWeights {
  BasicTensor<T> weight;
  std::vector<T> bias;

  std::int64_t out_channels() const noexcept { return weight.dims().n; }
  std::int64_t in_channels() const noexcept { return weight.dims().c; }
  bool has_bias() const noexcept { return !bias.empty(); }
};

/// Per-output-location offsets and modulation.
///
/// `offsets` is (N, 2K, H_out, W_out) with channel pair (2k, 2k+1) holding
/// (dy_k, dx_k) for tap k in row-major kernel order. `modulation` is
/// (N, K, H_out, W_out) with values in [0, 1]; leaving it empty disables
/// modulation (every factor is 1), which is the unmodulated deformable conv.
template <typename T>
struct OffsetModulationField {
  BasicTensor<T> offsets;
  BasicTensor<T> modulation;

  bool modulated() const noexcept { return modulation.dims() != Dims{}; }
};

template <typename T>
OffsetModulationField<T> make_field(std::int64_t n, int taps, std::int64_t out_h, std::int64_t out_w,
                                    T offset = T(0), T modulation = T(1), bool modulated = true) {
  OffsetModulationField<T> f;
  f.offsets = BasicTensor<T>(Dims{n, 2 * static_cast<std::int64_t>(taps), out_h, out_w}, offset);
  if (modulated) f.modulation = BasicTensor<T>(Dims{n, taps, out_h, out_w}, modulation);
  return f;
}

}  // namespace dcn2
