#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcn2/parallel.hpp"
#include "dcn2/synthetic_task.hpp"
#include "dcn2/toy_net.hpp"

namespace dcn2 {

/// SGD with momentum, PyTorch-style: g += wd w; v = mu v + g; w -= lr mult v.
class Sgd {
 public:
  explicit Sgd(OptimizerConfig cfg) : cfg_(cfg) {}
  void step(const std::vector<ParamRef>& params);

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> velocity_;
};

struct TrainOptions {
  TaskConfig task{};
  int steps = 500;
  std::uint64_t seed = 0;
  int eval_batch = 16;
  Execution exec{};
};

struct TrainMetrics {
  std::vector<double> loss;        // training loss before each update
  std::vector<double> mimic_loss;  // detection target only
  std::vector<double> rcnn_loss;   // detection target only
  double final_eval = 0.0;         // MSE, or detector cross-entropy, on a fixed held-out batch
  double eval_accuracy = 0.0;      // detection target only
  std::vector<double> mean_abs_offset;  // per deformable layer on the eval batch
  std::string model_json;               // trained weights, regression target only

  /// Deterministic serialization; `cfg` and `opts` are echoed for provenance.
  std::string to_json(const ToyNetConfig& cfg, const TrainOptions& opts) const;
};

/// Trains a toy net from scratch. The regression target uses DenseNet; the
/// detection target uses RoiTrunk with the two-branch mimic step (the
/// auxiliary branch is simply left out when mimic is off). Throws
/// DivergenceError on a non-finite loss.
TrainMetrics train(const ToyNetConfig& cfg, const TrainOptions& opts);

}  // namespace dcn2
