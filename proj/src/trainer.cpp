#include "dcn2/trainer.hpp"

#include <cmath>
#include <json.hpp>
#include <random>

namespace dcn2 {

void Sgd::step(const std::vector<ParamRef>& params) {
  if (velocity_.empty()) {
    for (const ParamRef& p : params) velocity_.emplace_back(p.value.size(), 0.0);
  }
  if (velocity_.size() != params.size()) throw ArgumentError("parameter list changed between optimizer steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ParamRef& p = params[i];
    std::vector<double>& v = velocity_[i];
    const double rate = cfg_.lr * p.lr_mult;
    for (std::size_t e = 0; e < p.value.size(); ++e) {
      const double g = p.grad[e] + cfg_.weight_decay * p.value[e];
      v[e] = cfg_.momentum * v[e] + g;
      p.value[e] -= rate * v[e];
    }
  }
}

namespace {

constexpr std::uint64_t kEvalStream = std::uint64_t{1} << 62;

std::mt19937_64 init_rng(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x1a17u};
  return std::mt19937_64(seq);
}

void check_finite(double loss, int step) {
  if (!std::isfinite(loss)) {
    throw DivergenceError("training diverged: non-finite loss at step " + std::to_string(step), step);
  }
}

TrainMetrics train_dense(const ToyNetConfig& cfg, const TrainOptions& opts) {
  std::mt19937_64 rng = init_rng(opts.seed);
  DenseNet net(cfg, rng);
  Sgd sgd(cfg.optim);
  TrainMetrics m;
  for (int step = 0; step < opts.steps; ++step) {
    const DenseBatch b = make_dense_batch(opts.task, opts.seed, static_cast<std::uint64_t>(step), cfg.batch);
    net.zero_grad();
    const double loss = net.loss_and_backward(b.x, b.target, opts.exec);
    check_finite(loss, step);
    m.loss.push_back(loss);
    sgd.step(net.params());
  }
  const DenseBatch eval = make_dense_batch(opts.task, opts.seed, kEvalStream, opts.eval_batch);
  m.final_eval = net.loss(eval.x, eval.target, opts.exec, &m.mean_abs_offset);
  check_finite(m.final_eval, opts.steps);
  m.model_json = dense_model_to_json(net);
  return m;
}

TrainMetrics train_detection(const ToyNetConfig& cfg, const TrainOptions& opts) {
  std::mt19937_64 rng = init_rng(opts.seed);
  RoiTrunk trunk(cfg, rng, opts.exec);
  const std::int64_t fd = trunk.feature_dim();
  const double head_std = std::sqrt(1.0 / static_cast<double>(fd));
  // Both heads are always drawn so enabling mimic does not shift the init.
  Affine<double> head = Affine<double>::gaussian(fd, cfg.num_classes + 1, head_std, rng);
  Affine<double> rcnn_head = Affine<double>::gaussian(fd, cfg.num_classes + 1, head_std, rng);
  Affine<double> grad_head = Affine<double>::zeros(fd, cfg.num_classes + 1);
  Affine<double> grad_rcnn = Affine<double>::zeros(fd, cfg.num_classes + 1);

  std::vector<ParamRef> params;
  trunk.collect(params);
  params.push_back({"head.weight", head.weight, grad_head.weight, 1.0});
  params.push_back({"head.bias", head.bias, grad_head.bias, 1.0});
  params.push_back({"rcnn_head.weight", rcnn_head.weight, grad_rcnn.weight, 1.0});
  params.push_back({"rcnn_head.bias", rcnn_head.bias, grad_rcnn.bias, 1.0});

  const MimicBranch frcnn{&trunk, &head, &grad_head};
  const MimicBranch rcnn{&trunk, &rcnn_head, &grad_rcnn};
  MimicConfig mcfg = cfg.mimic_cfg;
  if (!cfg.mimic) mcfg.mimic_weight = mcfg.rcnn_cls_weight = 0.0;

  Sgd sgd(cfg.optim);
  TrainMetrics m;
  for (int step = 0; step < opts.steps; ++step) {
    const RoiBatch b = make_roi_batch(opts.task, opts.seed, static_cast<std::uint64_t>(step), cfg.batch,
                                      cfg.num_classes, mcfg.positive_iou);
    const MimicBatch omega =
        cfg.mimic ? make_mimic_batch(b.images, b.proposals, b.gt, mcfg) : MimicBatch{};
    trunk.zero_grad();
    std::fill(grad_head.weight.begin(), grad_head.weight.end(), 0.0);
    std::fill(grad_head.bias.begin(), grad_head.bias.end(), 0.0);
    std::fill(grad_rcnn.weight.begin(), grad_rcnn.weight.end(), 0.0);
    std::fill(grad_rcnn.bias.begin(), grad_rcnn.bias.end(), 0.0);
    const MimicStepResult r = mimic_step(frcnn, rcnn, {&b.images, b.proposals, b.labels, &omega}, mcfg);
    check_finite(r.total, step);
    m.loss.push_back(r.total);
    m.mimic_loss.push_back(r.mimic_loss);
    m.rcnn_loss.push_back(r.rcnn_loss);
    sgd.step(params);
  }

  const RoiBatch eval = make_roi_batch(opts.task, opts.seed, kEvalStream, opts.eval_batch, cfg.num_classes,
                                       mcfg.positive_iou);
  const auto pass = trunk.forward(eval.images, eval.proposals);
  std::size_t correct = 0;
  double ce = 0.0;
  for (std::size_t r = 0; r < eval.proposals.size(); ++r) {
    const FeatureVec logits = head.forward(pass->features[r]);
    ce += softmax_cross_entropy(logits, eval.labels[r]);
    const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
    if (best == eval.labels[r]) ++correct;
  }
  const auto n = static_cast<double>(eval.proposals.size());
  m.final_eval = ce / n;
  m.eval_accuracy = static_cast<double>(correct) / n;
  check_finite(m.final_eval, opts.steps);
  m.mean_abs_offset = trunk.offset_stats(eval.images, eval.proposals);
  return m;
}

}  // namespace

TrainMetrics train(const ToyNetConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  opts.task.validate();
  if (opts.steps < 0) throw ArgumentError("steps must be >= 0");
  if (opts.eval_batch < 1) throw ArgumentError("eval batch must be >= 1");
  if (cfg.mimic && opts.task.target != TaskTarget::detection) {
    throw ConfigError("mimic training needs the detection target");
  }
  if (cfg.in_channels != 1) throw ConfigError("synthetic task images have one channel");
  if (opts.task.target == TaskTarget::regression && cfg.out_channels != 1) {
    throw ConfigError("the regression target has one channel");
  }
  return opts.task.target == TaskTarget::regression ? train_dense(cfg, opts) : train_detection(cfg, opts);
}

std::string TrainMetrics::to_json(const ToyNetConfig& cfg, const TrainOptions& opts) const {
  using nlohmann::ordered_json;
  ordered_json j;
  j["task"] = {{"mode", to_string(opts.task.mode)},
               {"target", to_string(opts.task.target)},
               {"size", opts.task.size},
               {"factor", opts.task.factor}};
  j["seed"] = opts.seed;
  j["steps"] = opts.steps;
  j["config"] = ordered_json::parse(toy_config_to_json(cfg));
  j["loss"] = loss;
  if (opts.task.target == TaskTarget::detection) {
    j["mimic_loss"] = mimic_loss;
    j["rcnn_loss"] = rcnn_loss;
    j["eval_accuracy"] = eval_accuracy;
  }
  j["final_eval"] = final_eval;
  j["mean_abs_offset"] = mean_abs_offset;
  return j.dump(2) + "\n";
}

}  // namespace dcn2
