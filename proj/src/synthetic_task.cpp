#include "dcn2/synthetic_task.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace dcn2 {

std::string to_string(TaskMode mode) {
  switch (mode) {
    case TaskMode::translate: return "translate";
    case TaskMode::dilate: return "dilate";
    case TaskMode::scale_jitter: return "scale-jitter";
  }
  return "?";
}

TaskMode task_mode_from_string(const std::string& name) {
  if (name == "translate") return TaskMode::translate;
  if (name == "dilate") return TaskMode::dilate;
  if (name == "scale-jitter") return TaskMode::scale_jitter;
  throw ConfigError("unknown task '" + name + "' (expected translate, dilate or scale-jitter)");
}

std::string to_string(TaskTarget target) {
  return target == TaskTarget::regression ? "regression" : "detection";
}

TaskTarget task_target_from_string(const std::string& name) {
  if (name == "regression") return TaskTarget::regression;
  if (name == "detection") return TaskTarget::detection;
  throw ConfigError("unknown target '" + name + "' (expected regression or detection)");
}

void TaskConfig::validate() const {
  if (size < 8) throw ConfigError("task images must be at least 8x8");
  if (factor < 1) throw ConfigError("task factor must be >= 1");
  if (blobs < 1 || !(sigma > 0.0)) throw ConfigError("need at least one blob of positive width");
  if (proposals < 1) throw ConfigError("need at least one proposal per image");
  if (target == TaskTarget::detection && size < 4 * factor + 2 * static_cast<int>(std::ceil(3 * sigma)) + 2) {
    throw ConfigError("image too small for the detection object at this factor");
  }
}

namespace {

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

template <typename T>
void add_blob(std::span<T> plane, int size, double cy, double cx, double amp, double sigma) {
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
      plane[static_cast<std::size_t>(y * size + x)] += static_cast<T>(amp * std::exp(-d2 * inv));
    }
  }
}

double at(std::span<const double> plane, int size, int y, int x) {
  if (y < 0 || y >= size || x < 0 || x >= size) return 0.0;
  return plane[static_cast<std::size_t>(y * size + x)];
}

void plus_stencil(std::span<const double> in, std::span<double> out, int size, int d) {
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      out[static_cast<std::size_t>(y * size + x)] =
          0.5 * (at(in, size, y, x - d) + at(in, size, y, x + d) + at(in, size, y - d, x) + at(in, size, y + d, x));
    }
  }
}

int draw_scale(const TaskConfig& cfg, std::mt19937_64& rng) {
  if (cfg.mode != TaskMode::scale_jitter) return cfg.factor;
  return std::uniform_int_distribution<int>(1, cfg.factor)(rng);
}

RoI clip_box(RoI b, int size) {
  const double hi = size - 1;
  b.x1 = std::clamp(b.x1, 0.0, hi - 1.0);
  b.y1 = std::clamp(b.y1, 0.0, hi - 1.0);
  b.x2 = std::clamp(b.x2, b.x1 + 1.0, hi);
  b.y2 = std::clamp(b.y2, b.y1 + 1.0, hi);
  return b;
}

}  // namespace

DenseBatch make_dense_batch(const TaskConfig& cfg, std::uint64_t seed, std::uint64_t stream, int batch) {
  cfg.validate();
  if (batch < 1) throw ArgumentError("batch must be >= 1");
  std::mt19937_64 rng = stream_rng(seed, stream);
  const int s = cfg.size;
  DenseBatch out{TensorD(Dims{batch, 1, s, s}), TensorD(Dims{batch, 1, s, s})};
  for (int b = 0; b < batch; ++b) {
    const int scale = draw_scale(cfg, rng);
    const double sigma = cfg.mode == TaskMode::scale_jitter ? cfg.sigma * (1.0 + scale) / 2.0 : cfg.sigma;
    auto x = out.x.plane(b, 0);
    for (int i = 0; i < cfg.blobs; ++i) {
      const double cy = uniform(rng, 0.0, s);
      const double cx = uniform(rng, 0.0, s);
      const double amp = uniform(rng, 0.5, 1.5);
      add_blob(x, s, cy, cx, amp, sigma);
    }
    auto t = out.target.plane(b, 0);
    if (cfg.mode == TaskMode::translate) {
      for (int y = 0; y < s; ++y) {
        for (int xx = 0; xx < s; ++xx) t[static_cast<std::size_t>(y * s + xx)] = at(x, s, y - cfg.factor, xx - cfg.factor);
      }
    } else {
      plus_stencil(x, t, s, scale);
    }
  }
  return out;
}

RoiBatch make_roi_batch(const TaskConfig& cfg, std::uint64_t seed, std::uint64_t stream, int batch, int num_classes,
                        double positive_iou) {
  cfg.validate();
  if (batch < 1) throw ArgumentError("batch must be >= 1");
  if (num_classes < 2) throw ArgumentError("the detection task has two object classes");
  std::mt19937_64 rng = stream_rng(seed, stream);
  const int s = cfg.size;
  RoiBatch out;
  out.images = Tensor(Dims{batch, 1, s, s});
  const double pad = 2.0 * cfg.sigma;
  for (int b = 0; b < batch; ++b) {
    const int scale = draw_scale(cfg, rng);
    const double arm = 2.0 * scale;
    const int label = std::uniform_int_distribution<int>(0, 1)(rng);
    const double lo = arm + pad + 1.0;
    const double hi = s - 1 - arm - pad - 1.0;
    const double cy = uniform(rng, lo, std::max(lo, hi));
    const double cx = uniform(rng, lo, std::max(lo, hi));
    auto plane = out.images.plane(b, 0);
    add_blob(plane, s, cy, cx, 1.0, cfg.sigma);
    const double a = label == 0 ? arm : arm * std::sqrt(0.5);
    for (int k = 0; k < 4; ++k) {
      const double sy = (k & 1) ? 1.0 : -1.0;
      const double sx = (k & 2) ? 1.0 : -1.0;
      if (label == 0) {
        // plus: one blob on each axis arm
        const bool vertical = k < 2;
        add_blob(plane, s, cy + (vertical ? sy * a : 0.0), cx + (vertical ? 0.0 : sx * a), 1.0, cfg.sigma);
      } else {
        add_blob(plane, s, cy + sy * a, cx + sx * a, 1.0, cfg.sigma);
      }
    }
    const RoI gt = clip_box({b, cx - a - pad, cy - a - pad, cx + a + pad, cy + a + pad}, s);
    out.gt.push_back({gt, label});

    const int jittered = (cfg.proposals + 1) / 2;
    for (int p = 0; p < cfg.proposals; ++p) {
      RoI r{b, 0, 0, 0, 0};
      if (p < jittered) {
        const double w = gt.width();
        const double h = gt.height();
        r = {b, gt.x1 + uniform(rng, -0.15, 0.15) * w, gt.y1 + uniform(rng, -0.15, 0.15) * h,
             gt.x2 + uniform(rng, -0.15, 0.15) * w, gt.y2 + uniform(rng, -0.15, 0.15) * h};
      } else {
        const double w = uniform(rng, 4.0, s / 2.0);
        const double h = uniform(rng, 4.0, s / 2.0);
        const double x1 = uniform(rng, 0.0, s - 1 - w);
        const double y1 = uniform(rng, 0.0, s - 1 - h);
        r = {b, x1, y1, x1 + w, y1 + h};
      }
      r = clip_box(r, s);
      out.proposals.push_back(r);
      out.labels.push_back(iou(r, gt) >= positive_iou ? label : num_classes);
    }
  }
  return out;
}

}  // namespace dcn2
