#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dcn2/affine.hpp"
#include "dcn2/deform_roipool.hpp"
#include "dcn2/tensor.hpp"

namespace dcn2 {

using FeatureVec = std::vector<double>;

/// 1 - cos(a, b). When either vector has zero norm the loss is defined as 1
/// and `degenerate` is set; such pairs get zero gradient on both sides.
struct CosineLoss {
  double loss = 1.0;
  bool degenerate = false;
};

CosineLoss cosine_mimic_loss(std::span<const double> a, std::span<const double> b);

struct CosineGrad {
  FeatureVec grad_a;
  FeatureVec grad_b;
  bool degenerate = false;
};

/// Gradient of upstream * (1 - cos(a, b)).
CosineGrad cosine_mimic_backward(std::span<const double> a, std::span<const double> b, double upstream = 1.0);

/// Sum of per-pair losses, reduced in pair order. `zero_norm_pairs`, when
/// given, is incremented once per degenerate pair.
double cosine_mimic_batch_loss(std::span<const FeatureVec> a, std::span<const FeatureVec> b,
                               std::int64_t* zero_norm_pairs = nullptr);

/// Softmax cross-entropy over C + 1 classes (background = C). When `grad` is
/// given it receives dL/dlogits.
double softmax_cross_entropy(std::span<const double> logits, int label, FeatureVec* grad = nullptr);

/// Intersection over union of two continuous boxes (area = width * height).
double iou(const RoI& a, const RoI& b);

/// Crops `roi` (inclusive pixel-center box, clipped to the image) out of batch
/// element roi.batch_index and resizes it to out_h x out_w with bilinear
/// sampling. Output pixel i samples row y1 - 0.5 + (i + 0.5) * (y2 - y1 + 1) / out_h,
/// clamped to the crop. Result is (1, C, out_h, out_w).
Tensor crop_resize_patch(const Tensor& image, const RoI& roi, std::int64_t out_h, std::int64_t out_w);

struct MimicConfig {
  double mimic_weight = 0.1;
  double rcnn_cls_weight = 0.1;
  double positive_iou = 0.5;
  int omega_size = 32;  // positives kept per image
  std::int64_t patch_h = 32;
  std::int64_t patch_w = 32;
  bool stop_teacher = false;  // block mimic gradients into the R-CNN side

  void validate() const;
  friend bool operator==(const MimicConfig&, const MimicConfig&) = default;
};

std::string mimic_config_to_json(const MimicConfig& cfg);
MimicConfig mimic_config_from_json(const std::string& text);

struct GtBox {
  RoI box;
  int label = 0;
};

/// The positive RoIs Omega with their cropped patches.
struct MimicBatch {
  std::vector<RoI> rois;
  std::vector<std::int64_t> roi_index;  // position in the proposal list
  std::vector<int> labels;
  std::vector<double> ious;  // best overlap, always >= positive_iou
  Tensor patches;            // (|Omega|, C, patch_h, patch_w)
};

/// Keeps, per image and in proposal order, up to omega_size proposals whose
/// best IoU with a ground-truth box of the same image reaches positive_iou.
MimicBatch make_mimic_batch(const Tensor& images, std::span<const RoI> proposals, std::span<const GtBox> gt,
                            const MimicConfig& cfg);

/// Shared part of both branches: images and RoIs in, one feature vector per
/// RoI out. A pass object keeps whatever the backward step needs.
struct TrunkPass {
  virtual ~TrunkPass() = default;
  std::vector<FeatureVec> features;
};

class FeatureTrunk {
 public:
  virtual ~FeatureTrunk() = default;
  virtual std::unique_ptr<TrunkPass> forward(const Tensor& images, std::span<const RoI> rois) const = 0;
  /// Accumulates parameter gradients into the trunk's own gradient buffers.
  virtual void backward(const TrunkPass& pass, std::span<const FeatureVec> grad_features) = 0;
};

/// One branch as wired by the caller. Both branches must reference the same
/// trunk object and different heads.
struct MimicBranch {
  FeatureTrunk* trunk = nullptr;
  const Affine<double>* head = nullptr;
  Affine<double>* head_grad = nullptr;
};

struct MimicInput {
  const Tensor* images = nullptr;
  std::span<const RoI> rois;  // sampled RoIs for the detector head
  std::span<const int> labels;
  const MimicBatch* batch = nullptr;
};

struct MimicStepResult {
  double total = 0.0;
  double task_loss = 0.0;   // mean detector cross-entropy
  double mimic_loss = 0.0;  // sum over Omega of 1 - cos
  double rcnn_loss = 0.0;   // mean R-CNN cross-entropy over Omega
  std::int64_t zero_norm_pairs = 0;
};

/// total = task + mimic_weight * mimic + rcnn_cls_weight * rcnn, with
/// gradients accumulated into the trunk and both head-gradient buffers.
/// The R-CNN branch is not evaluated at all when both weights are zero.
/// Throws ConfigError if the branches do not share the trunk or do share
/// a classification head.
MimicStepResult mimic_step(const MimicBranch& frcnn, const MimicBranch& rcnn, const MimicInput& input,
                           const MimicConfig& cfg);

}  // namespace dcn2
