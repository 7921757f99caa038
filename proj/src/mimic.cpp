#include "dcn2/mimic.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "dcn2/sampling.hpp"

namespace dcn2 {

namespace {

struct Moments {
  double dot = 0.0, na = 0.0, nb = 0.0;
};

Moments moments(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("feature vectors differ in length: " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  Moments m;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) throw ArgumentError("non-finite feature value");
    m.dot += a[i] * b[i];
    m.na += a[i] * a[i];
    m.nb += b[i] * b[i];
  }
  return m;
}

}  // namespace

CosineLoss cosine_mimic_loss(std::span<const double> a, std::span<const double> b) {
  const Moments m = moments(a, b);
  if (m.na == 0.0 || m.nb == 0.0) return {1.0, true};
  // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): for a == b this is exactly
  // na, so identical features give a loss of exactly zero.
  return {1.0 - m.dot / std::sqrt(m.na * m.nb), false};
}

CosineGrad cosine_mimic_backward(std::span<const double> a, std::span<const double> b, double upstream) {
  const Moments m = moments(a, b);
  CosineGrad g{FeatureVec(a.size()), FeatureVec(b.size()), false};
  if (m.na == 0.0 || m.nb == 0.0) {
    g.degenerate = true;
    return g;
  }
  const double denom = std::sqrt(m.na * m.nb);
  const double ka = m.dot / m.na, kb = m.dot / m.nb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    g.grad_a[i] = -upstream * (b[i] - ka * a[i]) / denom;
    g.grad_b[i] = -upstream * (a[i] - kb * b[i]) / denom;
  }
  return g;
}

double cosine_mimic_batch_loss(std::span<const FeatureVec> a, std::span<const FeatureVec> b,
                               std::int64_t* zero_norm_pairs) {
  if (a.size() != b.size()) throw ShapeError("mimic batch sides differ in size");
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const CosineLoss l = cosine_mimic_loss(a[i], b[i]);
    total += l.loss;
    if (l.degenerate && zero_norm_pairs) ++*zero_norm_pairs;
  }
  return total;
}

double softmax_cross_entropy(std::span<const double> logits, int label, FeatureVec* grad) {
  if (logits.empty()) throw ShapeError("cross-entropy needs at least one logit");
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw ArgumentError("class label " + std::to_string(label) + " outside [0, " + std::to_string(logits.size()) +
                        ")");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double log_z = std::log(z) + mx;
  if (grad) {
    grad->resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) (*grad)[i] = std::exp(logits[i] - log_z);
    (*grad)[static_cast<std::size_t>(label)] -= 1.0;
  }
  return log_z - logits[static_cast<std::size_t>(label)];
}

double iou(const RoI& a, const RoI& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.width() * a.height() + b.width() * b.height() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

Tensor crop_resize_patch(const Tensor& image, const RoI& roi, std::int64_t out_h, std::int64_t out_w) {
  const Dims d = image.dims();
  if (out_h < 1 || out_w < 1) throw ArgumentError("patch size must be at least 1x1");
  if (roi.batch_index < 0 || roi.batch_index >= d.n) throw ArgumentError("RoI batch index out of range");
  if (d.h < 1 || d.w < 1) throw ShapeError("cannot crop from an empty image");
  const double x1 = std::max(roi.x1, 0.0), y1 = std::max(roi.y1, 0.0);
  const double x2 = std::min(roi.x2, static_cast<double>(d.w - 1));
  const double y2 = std::min(roi.y2, static_cast<double>(d.h - 1));
  if (!(x2 >= x1) || !(y2 >= y1)) throw ArgumentError("RoI has zero area after clipping to the image");

  Tensor out(Dims{1, d.c, out_h, out_w});
  const double sy = (y2 - y1 + 1.0) / static_cast<double>(out_h);
  const double sx = (x2 - x1 + 1.0) / static_cast<double>(out_w);
  for (std::int64_t c = 0; c < d.c; ++c) {
    const float* plane = image.plane(roi.batch_index, c).data();
    for (std::int64_t i = 0; i < out_h; ++i) {
      const double y = std::clamp(y1 - 0.5 + (static_cast<double>(i) + 0.5) * sy, y1, y2);
      for (std::int64_t j = 0; j < out_w; ++j) {
        const double x = std::clamp(x1 - 0.5 + (static_cast<double>(j) + 0.5) * sx, x1, x2);
        out(0, c, i, j) = static_cast<float>(detail::sample(plane, d.h, d.w, y, x));
      }
    }
  }
  return out;
}

void MimicConfig::validate() const {
  if (!(mimic_weight >= 0.0) || !(rcnn_cls_weight >= 0.0)) throw ConfigError("loss weights must be >= 0");
  if (!(positive_iou > 0.0 && positive_iou <= 1.0)) throw ConfigError("positive_iou must be in (0, 1]");
  if (omega_size < 0) throw ConfigError("omega_size must be >= 0");
  if (patch_h < 1 || patch_w < 1) throw ConfigError("patch_size must be at least 1x1");
}

std::string mimic_config_to_json(const MimicConfig& cfg) {
  nlohmann::json j{
      {"mimic_weight", cfg.mimic_weight},
      {"rcnn_cls_weight", cfg.rcnn_cls_weight},
      {"positive_iou", cfg.positive_iou},
      {"omega_size", cfg.omega_size},
      {"patch_size", {cfg.patch_h, cfg.patch_w}},
      {"stop_teacher", cfg.stop_teacher},
  };
  return j.dump();
}

MimicConfig mimic_config_from_json(const std::string& text) {
  MimicConfig cfg;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_object()) throw ConfigError("mimic config must be a JSON object");
    cfg.mimic_weight = j.value("mimic_weight", cfg.mimic_weight);
    cfg.rcnn_cls_weight = j.value("rcnn_cls_weight", cfg.rcnn_cls_weight);
    cfg.positive_iou = j.value("positive_iou", cfg.positive_iou);
    cfg.omega_size = j.value("omega_size", cfg.omega_size);
    cfg.stop_teacher = j.value("stop_teacher", cfg.stop_teacher);
    if (j.contains("patch_size")) {
      const auto& p = j["patch_size"];
      if (!p.is_array() || p.size() != 2) throw ConfigError("patch_size must be [h, w]");
      cfg.patch_h = p[0].get<std::int64_t>();
      cfg.patch_w = p[1].get<std::int64_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad mimic config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

MimicBatch make_mimic_batch(const Tensor& images, std::span<const RoI> proposals, std::span<const GtBox> gt,
                            const MimicConfig& cfg) {
  cfg.validate();
  MimicBatch batch;
  std::vector<int> taken(static_cast<std::size_t>(std::max<std::int64_t>(images.dims().n, 0)), 0);
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const RoI& p = proposals[i];
    if (p.batch_index < 0 || p.batch_index >= images.dims().n) throw ArgumentError("proposal batch index out of range");
    double best = 0.0;
    int label = -1;
    for (const GtBox& g : gt) {
      if (g.box.batch_index != p.batch_index) continue;
      const double o = iou(p, g.box);
      if (o > best) {
        best = o;
        label = g.label;
      }
    }
    if (label < 0 || best < cfg.positive_iou) continue;
    int& count = taken[static_cast<std::size_t>(p.batch_index)];
    if (count >= cfg.omega_size) continue;
    ++count;
    batch.rois.push_back(p);
    batch.roi_index.push_back(static_cast<std::int64_t>(i));
    batch.labels.push_back(label);
    batch.ious.push_back(best);
  }
  const auto omega = static_cast<std::int64_t>(batch.rois.size());
  batch.patches = Tensor(Dims{omega, images.dims().c, cfg.patch_h, cfg.patch_w});
  for (std::int64_t r = 0; r < omega; ++r) {
    const Tensor patch = crop_resize_patch(images, batch.rois[static_cast<std::size_t>(r)], cfg.patch_h, cfg.patch_w);
    std::copy(patch.data().begin(), patch.data().end(),
              batch.patches.data().begin() + batch.patches.index(r, 0, 0, 0));
  }
  return batch;
}

MimicStepResult mimic_step(const MimicBranch& frcnn, const MimicBranch& rcnn, const MimicInput& input,
                           const MimicConfig& cfg) {
  if (!frcnn.trunk || !rcnn.trunk || !frcnn.head || !rcnn.head || !frcnn.head_grad || !rcnn.head_grad) {
    throw ConfigError("mimic branch is missing a trunk or head");
  }
  if (frcnn.trunk != rcnn.trunk) throw ConfigError("the two branches must share one trunk");
  if (frcnn.head == rcnn.head || frcnn.head_grad == rcnn.head_grad) {
    throw ConfigError("the two branches must use separate classification heads");
  }
  if (!input.images || !input.batch) throw ArgumentError("mimic step needs images and a mimic batch");
  if (input.labels.size() != input.rois.size()) throw ShapeError("one label per RoI required");
  cfg.validate();

  FeatureTrunk& trunk = *frcnn.trunk;
  MimicStepResult res;

  // Detector branch.
  const auto pass = trunk.forward(*input.images, input.rois);
  const std::size_t num_rois = input.rois.size();
  std::vector<FeatureVec> grad_f(num_rois);
  const double inv_r = num_rois ? 1.0 / static_cast<double>(num_rois) : 0.0;
  for (std::size_t r = 0; r < num_rois; ++r) {
    const FeatureVec logits = frcnn.head->forward(pass->features[r]);
    FeatureVec g;
    res.task_loss += softmax_cross_entropy(logits, input.labels[r], &g) * inv_r;
    for (double& v : g) v *= inv_r;
    grad_f[r] = frcnn.head->backward(pass->features[r], g, *frcnn.head_grad);
  }

  const MimicBatch& batch = *input.batch;
  const std::size_t omega = batch.rois.size();
  const bool use_rcnn = (cfg.mimic_weight != 0.0 || cfg.rcnn_cls_weight != 0.0) && omega > 0;
  if (use_rcnn) {
    std::vector<RoI> whole(omega);
    for (std::size_t i = 0; i < omega; ++i) {
      whole[i] = {static_cast<std::int64_t>(i), 0.0, 0.0, static_cast<double>(cfg.patch_w - 1),
                  static_cast<double>(cfg.patch_h - 1)};
    }
    const auto rpass = trunk.forward(batch.patches, whole);
    std::vector<FeatureVec> grad_r(omega);
    const double inv_o = 1.0 / static_cast<double>(omega);
    for (std::size_t i = 0; i < omega; ++i) {
      const FeatureVec& fr = rpass->features[i];
      const auto ri = static_cast<std::size_t>(batch.roi_index[i]);
      if (ri >= num_rois) throw ArgumentError("mimic batch refers to a RoI outside the sampled set");
      const FeatureVec& ff = pass->features[ri];

      const FeatureVec logits = rcnn.head->forward(fr);
      FeatureVec g;
      res.rcnn_loss += softmax_cross_entropy(logits, batch.labels[i], &g) * inv_o;
      for (double& v : g) v *= inv_o * cfg.rcnn_cls_weight;
      grad_r[i] = rcnn.head->backward(fr, g, *rcnn.head_grad);

      const CosineLoss l = cosine_mimic_loss(ff, fr);
      res.mimic_loss += l.loss;
      if (l.degenerate) ++res.zero_norm_pairs;
      const CosineGrad cg = cosine_mimic_backward(ff, fr, cfg.mimic_weight);
      for (std::size_t k = 0; k < ff.size(); ++k) {
        grad_f[ri][k] += cg.grad_a[k];
        if (!cfg.stop_teacher) grad_r[i][k] += cg.grad_b[k];
      }
    }
    trunk.backward(*rpass, grad_r);
  }
  trunk.backward(*pass, grad_f);

  res.total = res.task_loss + cfg.mimic_weight * res.mimic_loss + cfg.rcnn_cls_weight * res.rcnn_loss;
  return res;
}

}  // namespace dcn2
