#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dcn2/affine.hpp"
#include "dcn2/conv_types.hpp"
#include "dcn2/deform_conv.hpp"
#include "dcn2/deform_roipool.hpp"
#include "dcn2/mimic.hpp"
#include "dcn2/parallel.hpp"

namespace dcn2 {

struct ToyLayerConfig {
  LayerKind kind = LayerKind::regular;
  int channels = 8;
  KernelSpec kernel{};

  friend bool operator==(const ToyLayerConfig&, const ToyLayerConfig&) = default;
};

struct ToyPoolConfig {
  bool deformable = true;
  PoolSpec spec{3, 3, 2};
  int branch_hidden = 64;

  friend bool operator==(const ToyPoolConfig& a, const ToyPoolConfig& b) {
    return a.deformable == b.deformable && a.spec.bins_h == b.spec.bins_h && a.spec.bins_w == b.spec.bins_w &&
           a.spec.samples == b.spec.samples && a.branch_hidden == b.branch_hidden;
  }
};

struct OptimizerConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double branch_lr_mult = 0.1;  // offset / modulation branches

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct ToyNetConfig {
  int in_channels = 1;
  std::vector<ToyLayerConfig> layers{{LayerKind::mdconv, 8, {}}};
  bool relu = false;  // ReLU after every conv layer
  int out_channels = 1;  // dense regression head (1x1 conv)
  ToyPoolConfig pool{};  // RoI head
  int feature_dim = 32;
  int num_classes = 2;  // plus background
  bool mimic = false;
  MimicConfig mimic_cfg{};
  OptimizerConfig optim{};
  int batch = 8;

  void validate() const;
  friend bool operator==(const ToyNetConfig&, const ToyNetConfig&) = default;
};

std::string toy_config_to_json(const ToyNetConfig& cfg);
ToyNetConfig toy_config_from_json(const std::string& text);

/// Built-in configurations: "rigid", "dconv", "mdconv" and "mimic".
ToyNetConfig toy_preset(const std::string& name);

/// A trainable parameter block seen by the optimizer.
struct ParamRef {
  std::string name;
  std::span<double> value;
  std::span<double> grad;
  double lr_mult = 1.0;
};

struct ConvLayer {
  ToyLayerConfig cfg;
  ConvWeights<double> w, grad_w;
  ConvWeights<double> branch, grad_branch;  // empty for regular layers

  bool deformable() const noexcept { return cfg.kind != LayerKind::regular; }
  bool modulated() const noexcept { return cfg.kind == LayerKind::mdconv; }
};

struct StackTape {
  std::vector<TensorD> inputs;  // input of every layer
  std::vector<OffsetModulationField<double>> fields;
  std::vector<TensorD> outputs;  // pre-activation output of every layer
};

/// Conv layers with optional ReLU in between; offset branches are
/// zero-initialized and carry the branch learning-rate multiplier.
class ConvStack {
 public:
  ConvStack() = default;
  ConvStack(const ToyNetConfig& cfg, std::mt19937_64& rng);

  TensorD forward(const TensorD& x, StackTape* tape, const Execution& exec) const;
  /// Accumulates parameter gradients; returns dL/dx. With `depth` below the
  /// layer count, `grad_out` is taken at the (activated) output of layer
  /// depth - 1 and only the first `depth` layers are visited.
  TensorD backward(const StackTape& tape, const TensorD& grad_out, const Execution& exec,
                   std::size_t depth = SIZE_MAX);

  void collect(std::vector<ParamRef>& out, double branch_mult);
  void zero_grad();
  std::int64_t out_channels() const;
  const std::vector<ConvLayer>& layers() const noexcept { return layers_; }
  std::vector<ConvLayer>& layers() noexcept { return layers_; }

 private:
  std::vector<ConvLayer> layers_;
  bool relu_ = false;
};

/// Mean |dp| of each deformable layer in a tape.
std::vector<double> mean_abs_offsets(const ConvStack& stack, const StackTape& tape);

/// Conv stack followed by a 1x1 regression head.
class DenseNet {
 public:
  DenseNet(const ToyNetConfig& cfg, std::mt19937_64& rng);

  TensorD forward(const TensorD& x, StackTape* tape, const Execution& exec) const;
  /// Mean squared error against `target`, with gradients accumulated.
  double loss_and_backward(const TensorD& x, const TensorD& target, const Execution& exec,
                           std::vector<double>* offsets_out = nullptr);
  double loss(const TensorD& x, const TensorD& target, const Execution& exec,
              std::vector<double>* offsets_out = nullptr) const;

  std::vector<ParamRef> params();
  void zero_grad();
  ConvStack& stack() noexcept { return stack_; }
  const ToyNetConfig& config() const noexcept { return cfg_; }

  /// Response at pixel (y, x) of conv layer `layer` (all channels, after
  /// activation); layer == number of conv layers selects the head output.
  FeatureVec node(const TensorD& x, std::size_t layer, std::int64_t y, std::int64_t xx, const Execution& exec) const;
  /// d<upstream, node>/dx. Leaves parameter gradients dirty.
  TensorD node_vjp(const TensorD& x, std::size_t layer, std::int64_t y, std::int64_t xx,
                   std::span<const double> upstream, const Execution& exec);

 private:
  ToyNetConfig cfg_;
  ConvStack stack_;
  ConvWeights<double> head_, grad_head_;
};

/// Trained dense model: {"config": {...}, "params": {name: [values]}}.
std::string dense_model_to_json(DenseNet& net);
std::unique_ptr<DenseNet> dense_model_from_json(const std::string& text);

/// Shared trunk of the RoI head: conv stack, (deformable) RoI pooling with
/// its fc offset branch, then one fc layer with ReLU producing the feature.
class RoiTrunk : public FeatureTrunk {
 public:
  RoiTrunk(const ToyNetConfig& cfg, std::mt19937_64& rng, const Execution& exec);

  std::unique_ptr<TrunkPass> forward(const Tensor& images, std::span<const RoI> rois) const override;
  void backward(const TrunkPass& pass, std::span<const FeatureVec> grad_features) override;

  void collect(std::vector<ParamRef>& out);
  void zero_grad();
  /// Mean |dp| of every deformable conv layer, then of the RoI bins (in
  /// feature-map pixels) when pooling is deformable.
  std::vector<double> offset_stats(const Tensor& images, std::span<const RoI> rois) const;
  std::int64_t feature_dim() const noexcept { return fc_.out; }
  ConvStack& stack() noexcept { return stack_; }

 private:
  ToyNetConfig cfg_;
  Execution exec_;
  ConvStack stack_;
  RoiBranch<double> branch_, grad_branch_;
  Affine<double> fc_, grad_fc_;
};

}  // namespace dcn2
