#pragma once

#include <string>
#include <vector>

#include "dcn2/conv_types.hpp"
#include "dcn2/parallel.hpp"
#include "dcn2/tensor.hpp"

namespace dcn2 {

/// Gradients of a (modulated deformable) convolution. `grad_bias` is empty
/// when the layer has no bias; `grad_offsets` / `grad_modulation` are empty
/// for regular convolutions and `grad_modulation` is empty when the field is
/// unmodulated.
template <typename T>
struct ConvGrads {
  BasicTensor<T> grad_x;
  BasicTensor<T> grad_w;
  std::vector<T> grad_bias;
  BasicTensor<T> grad_offsets;
  BasicTensor<T> grad_modulation;
};

/// Modulated deformable convolution, computed directly from its definition:
///   y(p) = bias + sum_k sum_c w_k * x_c(p + p_k + dp_k) * dm_k
/// Offsets and modulation are shared by all input and output channels.
/// This is the readable reference path; see mdconv_forward_optimized.
template <typename T>
BasicTensor<T> mdconv_forward(const BasicTensor<T>& x, const ConvWeights<T>& w, const KernelSpec& spec,
                              const OffsetModulationField<T>& field);

/// Analytic gradients of mdconv_forward against `upstream` (dL/dy).
template <typename T>
ConvGrads<T> mdconv_backward(const BasicTensor<T>& x, const ConvWeights<T>& w, const KernelSpec& spec,
                             const OffsetModulationField<T>& field, const BasicTensor<T>& upstream);

/// Same contract as mdconv_forward. Samples are gathered into column tiles
/// and contracted against the weights; parallel over output positions.
template <typename T>
BasicTensor<T> mdconv_forward_optimized(const BasicTensor<T>& x, const ConvWeights<T>& w,
                                        const KernelSpec& spec, const OffsetModulationField<T>& field,
                                        const Execution& exec = {});

/// Same contract as mdconv_backward. In deterministic mode the result does
/// not depend on the thread count.
template <typename T>
ConvGrads<T> mdconv_backward_optimized(const BasicTensor<T>& x, const ConvWeights<T>& w,
                                       const KernelSpec& spec, const OffsetModulationField<T>& field,
                                       const BasicTensor<T>& upstream, const Execution& exec = {});

/// Regular zero-padded convolution (no offsets, no modulation).
template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const ConvWeights<T>& w, const KernelSpec& spec,
                              const Execution& exec = {});

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const ConvWeights<T>& w, const KernelSpec& spec,
                             const BasicTensor<T>& upstream, const Execution& exec = {});

// ---------------------------------------------------------------------------
// Offset / modulation branch
// ---------------------------------------------------------------------------

/// Optimizer parameter-group descriptor.
struct ParamGroup {
  std::string name;
  double lr_multiplier = 1.0;
};

/// Weights of the conv branch that predicts offsets and modulation.
ParamGroup offset_branch_param_group();  // lr multiplier 0.1
ParamGroup main_param_group();           // lr multiplier 1.0

/// Channels produced by the branch: 3K when modulated, 2K otherwise.
inline int branch_channels(const KernelSpec& spec, bool modulated) {
  return (modulated ? 3 : 2) * spec.taps();
}

/// Zero-initialized branch weights (with zero bias), giving dp = 0 and
/// dm = sigmoid(0) = 0.5 everywhere.
template <typename T>
ConvWeights<T> zero_offset_branch(std::int64_t in_channels, const KernelSpec& spec, bool modulated = true);

/// Runs the branch as a regular convolution with the main layer's geometry.
/// Channels [0, 2K) are the offsets verbatim; channels [2K, 3K) go through
/// the logistic sigmoid to become the modulation.
template <typename T>
OffsetModulationField<T> offset_branch_forward(const BasicTensor<T>& x, const ConvWeights<T>& branch_w,
                                               const KernelSpec& spec, bool modulated = true,
                                               const Execution& exec = {});

/// Backpropagates field gradients through the sigmoid and the branch conv.
/// `field` must be the output of offset_branch_forward for the same inputs.
template <typename T>
ConvGrads<T> offset_branch_backward(const BasicTensor<T>& x, const ConvWeights<T>& branch_w,
                                    const KernelSpec& spec, const OffsetModulationField<T>& field,
                                    const BasicTensor<T>& grad_offsets, const BasicTensor<T>& grad_modulation,
                                    const Execution& exec = {});

/// Parameter and multiply-accumulate counts for one layer on an input of the
/// given spatial size.
struct LayerCost {
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::int64_t flops() const noexcept { return 2 * macs; }
};

enum class LayerKind { regular, dconv, mdconv };

/// Main-conv cost plus, for deformable kinds, the offset branch (a regular
/// conv with 2K or 3K outputs). Bias is counted in params, not in MACs.
LayerCost layer_cost(LayerKind kind, std::int64_t c_in, std::int64_t c_out, std::int64_t in_h,
                     std::int64_t in_w, const KernelSpec& spec, bool bias = true);

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

}  // namespace dcn2
