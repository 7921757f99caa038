#include "dcn2/gradcheck_targets.hpp"

#include <cmath>
#include <memory>

#include "dcn2/deform_conv.hpp"
#include "dcn2/deform_roipool.hpp"
#include "dcn2/mimic.hpp"
#include "dcn2/sampling.hpp"

namespace dcn2 {

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

template <typename C>
void fill_normal(C&& values, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : values) v = dist(rng);
}

bool near_lattice(double v) {
  const double frac = v - std::floor(v);
  return frac < kLatticeMargin || frac > 1.0 - kLatticeMargin;
}

std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

KernelSpec random_spec(Rng& rng) {
  KernelSpec s;
  const int kernels[][2] = {{3, 3}, {3, 3}, {1, 3}, {2, 2}};
  const auto& k = kernels[rng() % 4];
  s.kernel_h = k[0];
  s.kernel_w = k[1];
  s.stride_h = s.stride_w = 1 + static_cast<int>(rng() % 2);
  s.pad_h = s.pad_w = static_cast<int>(rng() % 3);
  s.dilation_h = s.dilation_w = 1 + static_cast<int>(rng() % 2);
  return s;
}

// ---------------------------------------------------------------------------

struct ConvInstance {
  TensorD x;
  ConvWeights<double> w;
  KernelSpec spec;
  OffsetModulationField<double> field;
  TensorD r;  // loss = <r, y>
};

enum class ConvVariant { reference, optimized, unmodulated, regular };

GradInstance conv_instance(Rng& rng, ConvVariant variant) {
  auto st = std::make_shared<ConvInstance>();
  for (;;) {
    st->spec = variant == ConvVariant::reference ? KernelSpec{} : random_spec(rng);
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng() % 2);
    st->x = TensorD(Dims{n, 2, 5 + static_cast<std::int64_t>(rng() % 2), 5});
    if (st->spec.out_h(st->x.dims().h) >= 1 && st->spec.out_w(st->x.dims().w) >= 1) break;
  }
  const KernelSpec& spec = st->spec;
  const Dims xd = st->x.dims();
  const std::int64_t oh = spec.out_h(xd.h), ow = spec.out_w(xd.w);
  fill_normal(st->x.data(), rng);
  st->w.weight = TensorD(Dims{2, xd.c, spec.kernel_h, spec.kernel_w});
  fill_normal(st->w.weight.data(), rng, 0.5);
  st->w.bias.resize(2);
  fill_normal(st->w.bias, rng);

  const bool deform = variant != ConvVariant::regular;
  const bool modulated = variant == ConvVariant::reference || variant == ConvVariant::optimized;
  if (deform) {
    st->field = make_field<double>(xd.n, spec.taps(), oh, ow, 0.0, 1.0, modulated);
    // Base sampling coordinates are integers, so only the offset's fractional
    // part decides the distance to the lattice.
    for (double& v : st->field.offsets.data()) {
      do v = uniform(rng, -2.0, 2.0);
      while (near_lattice(v));
    }
    if (modulated) {
      for (double& v : st->field.modulation.data()) v = uniform(rng, 0.05, 0.95);
    }
  }
  st->r = TensorD(Dims{xd.n, 2, oh, ow});
  fill_normal(st->r.data(), rng);

  GradInstance inst;
  inst.loss = [st, variant] {
    TensorD y;
    switch (variant) {
      case ConvVariant::optimized:
        y = mdconv_forward_optimized(st->x, st->w, st->spec, st->field);
        break;
      case ConvVariant::regular:
        y = conv2d_forward(st->x, st->w, st->spec);
        break;
      default:
        y = mdconv_forward(st->x, st->w, st->spec, st->field);
    }
    return dot(y.data(), st->r.data());
  };
  ConvGrads<double> g;
  switch (variant) {
    case ConvVariant::optimized:
      g = mdconv_backward_optimized(st->x, st->w, st->spec, st->field, st->r);
      break;
    case ConvVariant::regular:
      g = conv2d_backward(st->x, st->w, st->spec, st->r);
      break;
    default:
      g = mdconv_backward(st->x, st->w, st->spec, st->field, st->r);
  }
  inst.blocks.push_back({"x", st->x.data(), to_vec(g.grad_x.data())});
  inst.blocks.push_back({"weight", st->w.weight.data(), to_vec(g.grad_w.data())});
  inst.blocks.push_back({"bias", st->w.bias, g.grad_bias});
  if (deform) inst.blocks.push_back({"offsets", st->field.offsets.data(), to_vec(g.grad_offsets.data())});
  if (modulated) inst.blocks.push_back({"modulation", st->field.modulation.data(), to_vec(g.grad_modulation.data())});
  return inst;
}

// ---------------------------------------------------------------------------

struct PoolInstance {
  TensorD x;
  std::vector<RoI> rois;
  PoolSpec spec;
  std::vector<double> offsets;     // R * 2K
  std::vector<double> modulation;  // R * K
  TensorD r;

  std::vector<BinField<double>> fields() const {
    const auto k = static_cast<std::size_t>(spec.bins());
    std::vector<BinField<double>> out(rois.size());
    for (std::size_t i = 0; i < rois.size(); ++i) {
      out[i].offsets.assign(offsets.begin() + 2 * k * i, offsets.begin() + 2 * k * (i + 1));
      out[i].modulation.assign(modulation.begin() + k * i, modulation.begin() + k * (i + 1));
    }
    return out;
  }
};

GradInstance pool_instance(Rng& rng) {
  auto st = std::make_shared<PoolInstance>();
  st->x = TensorD(Dims{2, 2, 7, 6});
  fill_normal(st->x.data(), rng);
  st->spec = PoolSpec{2, 3, 2};
  const PoolSpec& spec = st->spec;
  const int bins = spec.bins();
  for (int i = 0; i < 3; ++i) {
    RoI roi;
    roi.batch_index = static_cast<std::int64_t>(rng() % 2);
    roi.x1 = uniform(rng, -0.5, 3.0);
    roi.x2 = roi.x1 + uniform(rng, 0.5, 3.0);
    roi.y1 = uniform(rng, -0.5, 3.5);
    roi.y2 = roi.y1 + uniform(rng, 0.5, 3.0);
    st->rois.push_back(roi);
    // Every grid point of the bin moves with the bin offset; draw offsets
    // until all of them avoid the lattice.
    for (int k = 0; k < bins; ++k) {
      const int by = k / spec.bins_w, bx = k % spec.bins_w;
      const double bin_h = roi.height() / spec.bins_h, bin_w = roi.width() / spec.bins_w;
      auto axis_ok = [&](double start, double bin, double d) {
        for (int j = 0; j < spec.samples; ++j) {
          if (near_lattice(start + bin * (j + 0.5) / spec.samples + d)) return false;
        }
        return true;
      };
      double dy, dx;
      do dy = uniform(rng, -1.5, 1.5);
      while (!axis_ok(roi.y1 + by * bin_h, bin_h, dy));
      do dx = uniform(rng, -1.5, 1.5);
      while (!axis_ok(roi.x1 + bx * bin_w, bin_w, dx));
      st->offsets.push_back(dy);
      st->offsets.push_back(dx);
      st->modulation.push_back(uniform(rng, 0.05, 0.95));
    }
  }
  st->r = TensorD(Dims{static_cast<std::int64_t>(st->rois.size()), 2, spec.bins_h, spec.bins_w});
  fill_normal(st->r.data(), rng);

  GradInstance inst;
  inst.loss = [st] {
    const auto f = st->fields();
    return dot(mdpool_forward<double>(st->x, st->rois, st->spec, f).data(), st->r.data());
  };
  const auto f = st->fields();
  const PoolGrads<double> g = mdpool_backward<double>(st->x, st->rois, st->spec, f, st->r);
  std::vector<double> go, gm;
  for (const auto& bf : g.grad_fields) {
    go.insert(go.end(), bf.offsets.begin(), bf.offsets.end());
    gm.insert(gm.end(), bf.modulation.begin(), bf.modulation.end());
  }
  inst.blocks.push_back({"x", st->x.data(), to_vec(g.grad_x.data())});
  inst.blocks.push_back({"offsets", st->offsets, go});
  inst.blocks.push_back({"modulation", st->modulation, gm});
  return inst;
}

// ---------------------------------------------------------------------------

GradInstance bilinear_instance(Rng& rng) {
  struct State {
    TensorD plane{Dims{1, 1, 4, 5}};
    std::vector<double> point;  // (y, x)
    double upstream = 1.0;
  };
  auto st = std::make_shared<State>();
  fill_normal(st->plane.data(), rng);
  double y, x;
  do y = uniform(rng, -1.5, 4.5);
  while (near_lattice(y));
  do x = uniform(rng, -1.5, 5.5);
  while (near_lattice(x));
  st->point = {y, x};
  st->upstream = uniform(rng, 0.5, 2.0);

  GradInstance inst;
  inst.loss = [st] {
    return st->upstream * bilinear_sample(plane_of(st->plane, 0, 0), {st->point[0], st->point[1]});
  };
  const BilinearGrad g = bilinear_backward(plane_of(st->plane, 0, 0), {y, x}, st->upstream);
  std::vector<double> gp(static_cast<std::size_t>(st->plane.size()), 0.0);
  for (int i = 0; i < g.count; ++i) gp[static_cast<std::size_t>(g.taps[i].row * 5 + g.taps[i].col)] += g.taps[i].value;
  inst.blocks.push_back({"plane", st->plane.data(), gp});
  inst.blocks.push_back({"point", st->point, {g.d_y, g.d_x}});
  return inst;
}

GradInstance cosine_instance(Rng& rng) {
  struct State {
    std::vector<double> a, b;
    double upstream = 1.0;
  };
  auto st = std::make_shared<State>();
  const auto dim = static_cast<std::size_t>(4 + rng() % 29);
  st->a.resize(dim);
  st->b.resize(dim);
  // Cosine is scale invariant; fixing the norms in [4, 8] keeps the curvature
  // (and the central-difference truncation error) bounded.
  for (auto* v : {&st->a, &st->b}) {
    fill_normal(*v, rng);
    const double norm = std::sqrt(dot(*v, *v));
    const double target = uniform(rng, 4.0, 8.0);
    for (double& e : *v) e *= target / norm;
  }
  st->upstream = uniform(rng, 0.5, 2.0);
  GradInstance inst;
  inst.loss = [st] { return st->upstream * cosine_mimic_loss(st->a, st->b).loss; };
  const CosineGrad g = cosine_mimic_backward(st->a, st->b, st->upstream);
  inst.blocks.push_back({"a", st->a, g.grad_a});
  inst.blocks.push_back({"b", st->b, g.grad_b});
  return inst;
}

GradInstance cross_entropy_instance(Rng& rng) {
  struct State {
    std::vector<double> logits;
    int label = 0;
  };
  auto st = std::make_shared<State>();
  st->logits.resize(2 + rng() % 6);
  fill_normal(st->logits, rng, 2.0);
  st->label = static_cast<int>(rng() % st->logits.size());
  GradInstance inst;
  inst.loss = [st] { return softmax_cross_entropy(st->logits, st->label); };
  FeatureVec g;
  softmax_cross_entropy(st->logits, st->label, &g);
  inst.blocks.push_back({"logits", st->logits, g});
  return inst;
}

GradInstance offset_branch_instance(Rng& rng) {
  struct State {
    TensorD x;
    ConvWeights<double> bw;
    KernelSpec spec;
    bool modulated = true;
    TensorD r_off, r_mod;
  };
  auto st = std::make_shared<State>();
  st->spec = KernelSpec{};
  st->spec.dilation_h = st->spec.dilation_w = st->spec.pad_h = st->spec.pad_w = 1 + static_cast<int>(rng() % 2);
  st->modulated = rng() % 4 != 0;
  st->x = TensorD(Dims{1, 2, 5, 6});
  // Unit-range inputs: the sigmoid's third derivative scales with |x|^3 and
  // would otherwise dominate the central-difference truncation error.
  for (double& v : st->x.data()) v = uniform(rng, -1.0, 1.0);
  st->bw.weight = TensorD(Dims{branch_channels(st->spec, st->modulated), 2, 3, 3});
  fill_normal(st->bw.weight.data(), rng, 0.3);
  st->bw.bias.resize(static_cast<std::size_t>(st->bw.weight.dims().n));
  fill_normal(st->bw.bias, rng, 0.3);
  const auto f0 = offset_branch_forward(st->x, st->bw, st->spec, st->modulated);
  st->r_off = TensorD(f0.offsets.dims());
  fill_normal(st->r_off.data(), rng);
  if (st->modulated) {
    st->r_mod = TensorD(f0.modulation.dims());
    fill_normal(st->r_mod.data(), rng);
  }

  GradInstance inst;
  inst.loss = [st] {
    const auto f = offset_branch_forward(st->x, st->bw, st->spec, st->modulated);
    double l = dot(f.offsets.data(), st->r_off.data());
    if (st->modulated) l += dot(f.modulation.data(), st->r_mod.data());
    return l;
  };
  const ConvGrads<double> g = offset_branch_backward(st->x, st->bw, st->spec, f0, st->r_off, st->r_mod);
  inst.blocks.push_back({"x", st->x.data(), to_vec(g.grad_x.data())});
  inst.blocks.push_back({"weight", st->bw.weight.data(), to_vec(g.grad_w.data())});
  inst.blocks.push_back({"bias", st->bw.bias, g.grad_bias});
  return inst;
}

GradInstance roi_branch_instance(Rng& rng) {
  struct State {
    std::vector<double> pooled;
    RoiBranch<double> branch;
    RoI roi;
    PoolSpec spec{2, 2, 2};
    std::vector<double> r_off, r_mod;
  };
  auto st = std::make_shared<State>();
  const std::int64_t in = 2 * st->spec.bins(), hidden = 6;
  st->roi = {0, 1.0, 2.0, 1.0 + uniform(rng, 2.0, 12.0), 2.0 + uniform(rng, 2.0, 12.0)};
  st->pooled.resize(static_cast<std::size_t>(in));
  // Keep every hidden pre-activation clear of the ReLU kink.
  for (;;) {
    for (double& v : st->pooled) v = uniform(rng, -1.0, 1.0);
    st->branch.fc1 = Affine<double>::gaussian(in, hidden, 0.5, rng);
    st->branch.fc2 = Affine<double>::gaussian(hidden, hidden, 0.5, rng);
    st->branch.out = Affine<double>::gaussian(hidden, 3 * st->spec.bins(), 0.5, rng);
    fill_normal(st->branch.fc1.bias, rng, 0.3);
    fill_normal(st->branch.fc2.bias, rng, 0.3);
    fill_normal(st->branch.out.bias, rng, 0.3);
    const auto z1 = st->branch.fc1.forward(st->pooled);
    auto h1 = z1;
    relu_inplace(h1);
    const auto z2 = st->branch.fc2.forward(h1);
    auto clear = [](const std::vector<double>& z) {
      return std::all_of(z.begin(), z.end(), [](double v) { return std::abs(v) > 0.05; });
    };
    if (clear(z1) && clear(z2)) break;
  }
  st->r_off.resize(static_cast<std::size_t>(2 * st->spec.bins()));
  st->r_mod.resize(static_cast<std::size_t>(st->spec.bins()));
  fill_normal(st->r_off, rng);
  fill_normal(st->r_mod, rng);

  GradInstance inst;
  inst.loss = [st] {
    const auto f = roi_branch_forward<double>(st->pooled, st->branch, st->roi, st->spec);
    return dot(f.offsets, st->r_off) + dot(f.modulation, st->r_mod);
  };
  RoiBranchCache cache;
  roi_branch_forward<double>(st->pooled, st->branch, st->roi, st->spec, &cache);
  BinField<double> gf{st->r_off, st->r_mod};
  RoiBranch<double> grads = zeros_like(st->branch);
  const std::vector<double> gp = roi_branch_backward(st->branch, cache, st->roi, st->spec, gf, grads);
  inst.blocks.push_back({"pooled", st->pooled, gp});
  inst.blocks.push_back({"fc1.weight", st->branch.fc1.weight, grads.fc1.weight});
  inst.blocks.push_back({"fc1.bias", st->branch.fc1.bias, grads.fc1.bias});
  inst.blocks.push_back({"fc2.weight", st->branch.fc2.weight, grads.fc2.weight});
  inst.blocks.push_back({"fc2.bias", st->branch.fc2.bias, grads.fc2.bias});
  inst.blocks.push_back({"out.weight", st->branch.out.weight, grads.out.weight});
  inst.blocks.push_back({"out.bias", st->branch.out.bias, grads.out.bias});
  return inst;
}

}  // namespace

const std::vector<GradcheckTarget>& gradcheck_registry() {
  static const std::vector<GradcheckTarget> registry = {
      {"bilinear", {"plane", "point"}, bilinear_instance},
      {"conv2d", {"x", "weight", "bias"}, [](Rng& r) { return conv_instance(r, ConvVariant::regular); }},
      {"mdconv",
       {"x", "weight", "bias", "offsets", "modulation"},
       [](Rng& r) { return conv_instance(r, ConvVariant::reference); }},
      {"mdconv_optimized",
       {"x", "weight", "bias", "offsets", "modulation"},
       [](Rng& r) { return conv_instance(r, ConvVariant::optimized); }},
      {"dconv", {"x", "weight", "bias", "offsets"}, [](Rng& r) { return conv_instance(r, ConvVariant::unmodulated); }},
      {"mdpool", {"x", "offsets", "modulation"}, pool_instance},
      {"offset_branch", {"x", "weight", "bias"}, offset_branch_instance},
      {"roi_branch",
       {"pooled", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "out.weight", "out.bias"},
       roi_branch_instance},
      {"cosine_mimic", {"a", "b"}, cosine_instance},
      {"cross_entropy", {"logits"}, cross_entropy_instance},
  };
  return registry;
}

std::vector<const GradcheckTarget*> match_targets(const std::string& pattern) {
  std::vector<const GradcheckTarget*> out;
  const bool prefix = !pattern.empty() && pattern.back() == '*';
  const std::string stem = prefix ? pattern.substr(0, pattern.size() - 1) : pattern;
  for (const GradcheckTarget& t : gradcheck_registry()) {
    if (pattern == "all" || (prefix && t.name.starts_with(stem)) || (!prefix && t.name == pattern)) out.push_back(&t);
  }
  if (out.empty()) throw UsageError("no gradcheck target matches '" + pattern + "'");
  return out;
}

}  // namespace dcn2
