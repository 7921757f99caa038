#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcn2/deform_roipool.hpp"
#include "dcn2/mimic.hpp"
#include "dcn2/tensor.hpp"

namespace dcn2 {

enum class TaskMode { translate, dilate, scale_jitter };
enum class TaskTarget { regression, detection };

std::string to_string(TaskMode mode);
TaskMode task_mode_from_string(const std::string& name);
std::string to_string(TaskTarget target);
TaskTarget task_target_from_string(const std::string& name);

/// Images are sums of gaussian blobs on a size x size canvas.
///
/// Regression targets:
///   dilate        the image convolved with a plus-shaped stencil (weight 0.5
///                 per arm) whose arms sit `factor` pixels from the center
///   translate     the image shifted right and down by `factor` pixels
///   scale_jitter  per image s in [1, factor]: blobs of width sigma (1 + s) / 2
///                 and the dilate target at dilation s
///
/// Detection: one object per image, a "+" (class 0) or "x" (class 1) of five
/// blobs whose arm length is 2 s, where s = factor, or uniform in [1, factor]
/// for scale_jitter.
struct TaskConfig {
  TaskMode mode = TaskMode::dilate;
  TaskTarget target = TaskTarget::regression;
  int size = 32;
  int factor = 3;
  int blobs = 4;
  double sigma = 2.0;
  int proposals = 8;  // per image, detection only

  void validate() const;
};

struct DenseBatch {
  TensorD x;
  TensorD target;
};

struct RoiBatch {
  Tensor images;  // (B, 1, size, size)
  std::vector<GtBox> gt;  // one per image
  std::vector<RoI> proposals;
  std::vector<int> labels;  // class of the best-overlapping box, or background
};

/// Generation is a pure function of (seed, stream, cfg, batch).
DenseBatch make_dense_batch(const TaskConfig& cfg, std::uint64_t seed, std::uint64_t stream, int batch);
RoiBatch make_roi_batch(const TaskConfig& cfg, std::uint64_t seed, std::uint64_t stream, int batch, int num_classes,
                        double positive_iou);

}  // namespace dcn2
