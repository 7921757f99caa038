// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// Usage: dcn2_acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dcn2/bench.hpp"
#include "dcn2/deform_conv.hpp"
#include "dcn2/deform_roipool.hpp"
#include "dcn2/gradcheck_targets.hpp"
#include "dcn2/mimic.hpp"
#include "dcn2/oracle.hpp"
#include "dcn2/probes.hpp"
#include "dcn2/support_analysis.hpp"
#include "dcn2/toy_net.hpp"
#include "dcn2/trainer.hpp"

using namespace dcn2;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

template <typename T>
BasicTensor<T> uniform(Dims d, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  BasicTensor<T> t(d);
  for (T& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

std::vector<double> random_bias(std::int64_t n, std::mt19937_64& rng) {
  const TensorD b = uniform<double>({1, 1, 1, n}, rng, -0.2, 0.2);
  return {b.data().begin(), b.data().end()};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct FuzzConfig {
  Dims input;
  std::int64_t cout;
  KernelSpec spec;
};

FuzzConfig fuzz_config(std::mt19937_64& rng) {
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  for (;;) {
    FuzzConfig f;
    f.input = {pick(1, 2), pick(1, 4), pick(3, 10), pick(3, 10)};
    f.cout = pick(1, 4);
    KernelSpec& k = f.spec;
    k.kernel_h = 2 * pick(0, 2) + 1;
    k.kernel_w = 2 * pick(0, 2) + 1;
    k.stride_h = pick(1, 2);
    k.stride_w = pick(1, 2);
    k.pad_h = pick(0, 2);
    k.pad_w = pick(0, 2);
    k.dilation_h = pick(1, 2);
    k.dilation_w = pick(1, 2);
    if (k.out_h(f.input.h) >= 1 && k.out_w(f.input.w) >= 1) return f;
  }
}

// 1 ---------------------------------------------------------------------------

Outcome degeneration() {
  std::mt19937_64 rng(101);
  double worst_dense = 0.0, worst_dcn1 = 0.0;
  const int configs = 240;
  for (int i = 0; i < configs; ++i) {
    const FuzzConfig f = fuzz_config(rng);
    const KernelSpec& k = f.spec;
    const TensorD x = uniform<double>(f.input, rng, -1, 1);
    const TensorD w = uniform<double>({f.cout, f.input.c, k.kernel_h, k.kernel_w}, rng, -0.5, 0.5);
    const std::vector<double> bias = random_bias(f.cout, rng);
    const std::int64_t oh = k.out_h(f.input.h), ow = k.out_w(f.input.w);

    const Tensor xf = x.cast<float>();
    const ConvWeights<float> wf{w.cast<float>(), std::vector<float>(bias.begin(), bias.end())};
    const ConvWeights<double> wd{w, bias};

    auto rigid = make_field<float>(f.input.n, k.taps(), oh, ow, 0.0f, 1.0f);
    const TensorD dense = oracle::dense_conv(x, w, bias, k);
    worst_dense = std::max({worst_dense, max_abs_diff(mdconv_forward(xf, wf, k, rigid).cast<double>(), dense),
                            max_abs_diff(mdconv_forward_optimized(xf, wf, k, rigid).cast<double>(), dense),
                            max_abs_diff(mdconv_forward(x, wd, k, make_field<double>(f.input.n, k.taps(), oh, ow)),
                                         dense)});

    auto field = make_field<double>(f.input.n, k.taps(), oh, ow, 0.0, 1.0);
    field.offsets = uniform<double>(field.offsets.dims(), rng, -2.5, 2.5);
    const TensorD dcn1 = oracle::dcnv1_conv(x, w, bias, k, field.offsets);
    OffsetModulationField<float> ff{field.offsets.cast<float>(), field.modulation.cast<float>()};
    worst_dcn1 = std::max({worst_dcn1, max_abs_diff(mdconv_forward(x, wd, k, field), dcn1),
                           max_abs_diff(mdconv_forward(xf, wf, k, ff).cast<double>(), dcn1),
                           max_abs_diff(mdconv_forward_optimized(xf, wf, k, ff).cast<double>(), dcn1)});
  }
  return {worst_dense <= 1e-5 && worst_dcn1 <= 1e-5,
          fmt("%d configs, max |err| dense %.2e, dcnv1 %.2e (tol 1e-5)", configs, worst_dense, worst_dcn1)};
}

// 2 ---------------------------------------------------------------------------

Outcome gradients() {
  const std::vector<std::string> required{"mdconv", "mdconv_optimized", "mdpool", "bilinear", "cosine_mimic",
                                          "offset_branch", "roi_branch"};
  std::vector<std::uint64_t> seeds(50);
  for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = 1000 + i;
  std::set<std::string> seen;
  double worst = 0.0;
  int failures = 0, checks = 0;
  std::string first_failure;
  for (const GradcheckTarget& t : gradcheck_registry()) {
    seen.insert(t.name);
    for (const GradCheckReport& r : gradcheck_seeds(t.name, t.generate, seeds)) {
      ++checks;
      for (const BlockReport& b : r.blocks) worst = std::max(worst, b.max_rel);
      if (!r.pass || r.blocks.size() != t.blocks.size()) {
        ++failures;
        if (first_failure.empty()) first_failure = r.json_line();
      }
    }
  }
  bool covered = true;
  for (const std::string& name : required) covered = covered && seen.contains(name);
  std::string detail = fmt("%d ops x %zu seeds, %d failures, max rel err %.2e (tol 1e-3)",
                           static_cast<int>(gradcheck_registry().size()), seeds.size(), failures, worst);
  if (!covered) detail += "; registry is missing a required op";
  if (!first_failure.empty()) detail += "; first failure " + first_failure;
  return {covered && failures == 0 && checks > 0, detail};
}

// 3 ---------------------------------------------------------------------------

Outcome initialization() {
  std::mt19937_64 rng(303);
  bool exact = true;
  double worst = 0.0;
  for (int i = 0; i < 30; ++i) {
    const FuzzConfig f = fuzz_config(rng);
    const Tensor x = uniform<float>(f.input, rng, -1, 1);
    const ConvWeights<float> w{uniform<float>({f.cout, f.input.c, f.spec.kernel_h, f.spec.kernel_w}, rng, -0.5, 0.5),
                               std::vector<float>(static_cast<std::size_t>(f.cout), 0.0f)};
    const auto branch = zero_offset_branch<float>(f.input.c, f.spec);
    const auto field = offset_branch_forward(x, branch, f.spec);
    for (float v : field.offsets.data()) exact = exact && v == 0.0f;
    for (float v : field.modulation.data()) exact = exact && v == 0.5f;
    Tensor half = conv2d_forward(x, w, f.spec);
    for (float& v : half.data()) v *= 0.5f;
    worst = std::max({worst, max_abs_diff(mdconv_forward(x, w, f.spec, field), half),
                      max_abs_diff(mdconv_forward_optimized(x, w, f.spec, field), half)});
  }
  // Same contract through a whole toy layer stack.
  ToyNetConfig cfg = toy_preset("mdconv");
  cfg.layers.push_back({LayerKind::mdconv, 4, {}});
  std::mt19937_64 init(7);
  ConvStack stack(cfg, init);
  StackTape tape;
  stack.forward(uniform<double>({2, 1, 12, 12}, rng, 0, 1), &tape, {});
  for (const auto& fld : tape.fields) {
    for (double v : fld.offsets.data()) exact = exact && v == 0.0;
    for (double v : fld.modulation.data()) exact = exact && v == 0.5;
  }
  return {exact && worst <= 1e-5,
          fmt("offsets exactly 0 and modulation exactly 0.5: %s; max |y - 0.5 rigid| %.2e (tol 1e-5)",
              exact ? "yes" : "no", worst)};
}

// 4 ---------------------------------------------------------------------------

Outcome optimized_kernel() {
  std::mt19937_64 rng(404);
  double fwd = 0.0, bwd = 0.0;
  const Execution det{1, true};
  for (int i = 0; i < 60; ++i) {
    const FuzzConfig f = fuzz_config(rng);
    const KernelSpec& k = f.spec;
    const std::int64_t oh = k.out_h(f.input.h), ow = k.out_w(f.input.w);
    const TensorD x = uniform<double>(f.input, rng, -1, 1);
    const ConvWeights<double> w{uniform<double>({f.cout, f.input.c, k.kernel_h, k.kernel_w}, rng, -0.5, 0.5),
                                random_bias(f.cout, rng)};
    auto field = make_field<double>(f.input.n, k.taps(), oh, ow);
    field.offsets = uniform<double>(field.offsets.dims(), rng, -2, 2);
    field.modulation = uniform<double>(field.modulation.dims(), rng, 0, 1);
    const TensorD up = uniform<double>({f.input.n, f.cout, oh, ow}, rng, -1, 1);

    // Forward against the independent oracle (modulation 1) and the reference.
    auto unmod = field;
    for (double& v : unmod.modulation.data()) v = 1.0;
    fwd = std::max({fwd, max_abs_diff(mdconv_forward_optimized(x, w, k, unmod, det),
                                      oracle::dcnv1_conv(x, w.weight, w.bias, k, field.offsets)),
                    max_abs_diff(mdconv_forward_optimized(x, w, k, field, det), mdconv_forward(x, w, k, field))});

    const auto ref = mdconv_backward(x, w, k, field, up);
    const auto opt = mdconv_backward_optimized(x, w, k, field, up, det);
    bwd = std::max({bwd, max_abs_diff(ref.grad_x, opt.grad_x), max_abs_diff(ref.grad_w, opt.grad_w),
                    max_abs_diff(ref.grad_offsets, opt.grad_offsets),
                    max_abs_diff(ref.grad_modulation, opt.grad_modulation)});
    for (std::size_t o = 0; o < ref.grad_bias.size(); ++o) bwd = std::max(bwd, std::abs(ref.grad_bias[o] - opt.grad_bias[o]));
  }

  BenchOptions bo;
  bo.exec = det;
  const BenchReport rep = run_bench(bo);
  const bool pass = fwd <= 1e-5 && bwd <= 1e-5 && rep.max_abs_diff <= 1e-5 && rep.speedup() >= 3.0;
  return {pass, fmt("fuzz fwd %.2e, bwd %.2e; bench 1x64x128x128 -> 64: ref %.0f ms, opt %.0f ms, speedup %.2fx "
                    "(need >= 3), max |diff| %.2e",
                    fwd, bwd, rep.reference_ms, rep.optimized_ms, rep.speedup(), rep.max_abs_diff)};
}

// 5 ---------------------------------------------------------------------------

Tensor textured_image(std::int64_t h, std::int64_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(-0.05, 0.05);
  Tensor t({1, 3, h, w});
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        t(0, c, y, x) = static_cast<float>(0.5 + 0.25 * std::sin(0.37 * x + c) * std::cos(0.29 * y - c) + noise(rng));
      }
    }
  }
  return t;
}

Outcome saliency() {
  struct Case {
    std::int64_t x, y;
  };
  const std::int64_t size = 64;
  const std::vector<Case> cases{{28, 28}, {10, 40}, {44, 6}, {0, 0}};
  bool pass = true;
  std::string detail;
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    const Case& wc = cases[ci];
    const Tensor img = textured_image(size, size, 500 + ci);
    const SaliencyResult r = saliency_region(window_mean_probe(wc.x, wc.y, 8, 8), img);

    bool sizes_ok = true;
    for (std::size_t i = 1; i < r.mask_sizes.size(); ++i) sizes_ok = sizes_ok && r.mask_sizes[i] <= r.mask_sizes[i - 1];

    // Segments touching the window, then those plus their 4-neighbours.
    const SuperpixelLabeling& seg = r.segments;
    auto in_window = [&](std::int64_t y, std::int64_t x) {
      return x >= wc.x && x < wc.x + 8 && y >= wc.y && y < wc.y + 8;
    };
    std::set<int> touching;
    for (std::int64_t y = 0; y < seg.height; ++y) {
      for (std::int64_t x = 0; x < seg.width; ++x) {
        if (in_window(y + r.rect.y, x + r.rect.x)) touching.insert(seg.at(y, x));
      }
    }
    std::set<int> allowed = touching;
    for (std::int64_t y = 0; y < seg.height; ++y) {
      for (std::int64_t x = 0; x < seg.width; ++x) {
        if (!touching.contains(seg.at(y, x))) continue;
        if (y > 0) allowed.insert(seg.at(y - 1, x));
        if (y + 1 < seg.height) allowed.insert(seg.at(y + 1, x));
        if (x > 0) allowed.insert(seg.at(y, x - 1));
        if (x + 1 < seg.width) allowed.insert(seg.at(y, x + 1));
      }
    }
    std::int64_t stray = 0;
    for (std::int64_t y = 0; y < size; ++y) {
      for (std::int64_t x = 0; x < size; ++x) {
        if (!r.mask.mask[static_cast<std::size_t>(y * size + x)] || in_window(y, x)) continue;
        const std::int64_t ry = y - r.rect.y, rx = x - r.rect.x;
        const bool inside = ry >= 0 && rx >= 0 && ry < seg.height && rx < seg.width;
        if (!inside || !allowed.contains(seg.at(ry, rx))) ++stray;
      }
    }
    const bool ok = r.mask.achieved_error < 0.1 && sizes_ok && stray == 0;
    pass = pass && ok;
    detail += fmt("%swindow@(%lld,%lld): err %.3f, kept %lld px, %zu removal steps%s, stray %lld", ci ? "; " : "",
                  static_cast<long long>(wc.x), static_cast<long long>(wc.y), r.mask.achieved_error,
                  static_cast<long long>(r.mask.kept()), r.mask_sizes.size() - 1,
                  sizes_ok ? "" : " (sizes grew)", static_cast<long long>(stray));
  }
  return {pass, detail};
}

// 6 ---------------------------------------------------------------------------

Outcome mechanism() {
  const int seeds = 5;
  auto run = [&](const std::string& preset, int factor, std::vector<double>& losses, std::vector<double>* offsets) {
    const ToyNetConfig cfg = toy_preset(preset);
    for (int s = 0; s < seeds; ++s) {
      TrainOptions o;
      o.task.factor = factor;
      o.steps = 500;
      o.seed = static_cast<std::uint64_t>(s);
      o.exec = {1, true};
      const TrainMetrics m = train(cfg, o);
      losses.push_back(m.final_eval);
      if (offsets) offsets->push_back(m.mean_abs_offset.back());
    }
  };
  const int default_factor = TaskConfig{}.factor;
  std::vector<double> rigid;
  run("rigid", default_factor, rigid, nullptr);
  std::vector<double> md_loss_default, offset_median;
  for (int d : {1, 2, 3}) {
    std::vector<double> losses, offsets;
    run("mdconv", d, losses, &offsets);
    if (d == default_factor) md_loss_default = losses;
    offset_median.push_back(median(offsets));
  }
  const double r = median(rigid), m = median(md_loss_default);
  const bool monotone = offset_median[0] < offset_median[1] && offset_median[1] < offset_median[2];
  return {m < r && monotone,
          fmt("dilate d=%d median eval loss: rigid %.4e, mdconv %.4e; median mean|dp| d=1,2,3: %.4f, %.4f, %.4f",
              default_factor, r, m, offset_median[0], offset_median[1], offset_median[2])};
}

// 7 ---------------------------------------------------------------------------

ToyNetConfig small_detector(bool mimic) {
  ToyNetConfig c = toy_preset(mimic ? "mimic" : "mdconv");
  c.layers[0].channels = 4;
  c.pool.branch_hidden = 16;
  c.feature_dim = 8;
  c.batch = 2;
  c.mimic_cfg.patch_h = c.mimic_cfg.patch_w = 16;
  return c;
}

Outcome mimic_wiring() {
  TrainOptions o;
  o.task.target = TaskTarget::detection;
  o.task.size = 24;
  o.task.factor = 2;
  o.task.proposals = 4;
  o.steps = 20;
  o.eval_batch = 4;
  o.exec = {1, true};
  ToyNetConfig zero = small_detector(true);
  zero.mimic_cfg.mimic_weight = 0.0;
  zero.mimic_cfg.rcnn_cls_weight = 0.0;
  const TrainMetrics a = train(small_detector(false), o), b = train(zero, o);
  const bool identical = a.loss == b.loss && a.final_eval == b.final_eval && a.eval_accuracy == b.eval_accuracy &&
                         a.mean_abs_offset == b.mean_abs_offset;

  // Shared trunk, the detector RoI covering the whole image and the patch
  // being that same image.
  ToyNetConfig cfg = small_detector(true);
  cfg.mimic_cfg.patch_h = cfg.mimic_cfg.patch_w = 12;
  std::mt19937_64 rng(77);
  RoiTrunk trunk(cfg, rng, {});
  auto h1 = Affine<double>::gaussian(trunk.feature_dim(), 3, 0.2, rng);
  auto h2 = Affine<double>::gaussian(trunk.feature_dim(), 3, 0.2, rng);
  auto g1 = Affine<double>::zeros(trunk.feature_dim(), 3), g2 = g1;
  const Tensor img = uniform<float>({1, 1, 12, 12}, rng, 0, 1);
  const std::vector<RoI> rois{{0, 0, 0, 11, 11}};
  const std::vector<int> labels{1};
  MimicBatch omega;
  omega.rois = rois;
  omega.roi_index = {0};
  omega.labels = {1};
  omega.ious = {1.0};
  omega.patches = img;
  const MimicStepResult res = mimic_step({&trunk, &h1, &g1}, {&trunk, &h2, &g2}, {&img, rois, labels, &omega},
                                         cfg.mimic_cfg);
  return {identical && res.mimic_loss == 0.0,
          fmt("weight-0 trajectory over %d steps bit-identical: %s; identical-input mimic loss %.3g",
              o.steps, identical ? "yes" : "no", res.mimic_loss)};
}

// 8 ---------------------------------------------------------------------------

Outcome constant_input() {
  std::mt19937_64 rng(808);
  std::uniform_real_distribution<double> u(0, 1);
  double worst = 0.0;
  int bins_checked = 0;
  for (int t = 0; t < 200; ++t) {
    const double c = 4.0 * u(rng) - 2.0;
    const std::int64_t h = 16 + static_cast<std::int64_t>(u(rng) * 16), w = 16 + static_cast<std::int64_t>(u(rng) * 16);
    const PoolSpec spec{1 + static_cast<int>(u(rng) * 4), 1 + static_cast<int>(u(rng) * 4), 1 + static_cast<int>(u(rng) * 3)};
    // RoI and offsets are drawn so every sample stays inside the map.
    const double margin = 3.0;
    const double x1 = margin + u(rng) * (static_cast<double>(w) - 2 * margin - 2);
    const double y1 = margin + u(rng) * (static_cast<double>(h) - 2 * margin - 2);
    const RoI roi{0, x1, y1, x1 + 1 + u(rng) * (static_cast<double>(w) - margin - 1 - x1 - 1),
                  y1 + 1 + u(rng) * (static_cast<double>(h) - margin - 1 - y1 - 1)};
    auto field = make_bin_field<double>(spec.bins());
    for (double& v : field.offsets) v = (2 * u(rng) - 1) * (margin - 0.5);
    for (double& v : field.modulation) v = u(rng);
    const std::vector<RoI> rois{roi};
    const std::vector<BinField<double>> fields{field};

    const TensorD yd = mdpool_forward<double>(TensorD({1, 2, h, w}, c), rois, spec, fields);
    BinField<float> ff;
    ff.offsets.assign(field.offsets.begin(), field.offsets.end());
    ff.modulation.assign(field.modulation.begin(), field.modulation.end());
    const std::vector<BinField<float>> ffields{ff};
    const Tensor yf = mdpool_forward<float>(Tensor({1, 2, h, w}, static_cast<float>(c)), rois, spec, ffields);
    for (std::int64_t ch = 0; ch < 2; ++ch) {
      for (int k = 0; k < spec.bins(); ++k) {
        const double want = c * field.modulation[static_cast<std::size_t>(k)];
        const std::int64_t by = k / spec.bins_w, bx = k % spec.bins_w;
        worst = std::max({worst, std::abs(yd(0, ch, by, bx) - want),
                          std::abs(static_cast<double>(yf(0, ch, by, bx)) - static_cast<double>(static_cast<float>(c) * ff.modulation[static_cast<std::size_t>(k)]))});
        ++bins_checked;
      }
    }
  }
  return {worst <= 1e-6, fmt("%d bins over 200 RoIs, max |bin - c dm| %.2e (tol 1e-6)", bins_checked, worst)};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;  // 0: no runtime bound
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "degeneration identity", 60, degeneration},
      {2, "gradient fidelity", 300, gradients},
      {3, "initialization contract", 0, initialization},
      {4, "optimized kernel equivalence and speed", 0, optimized_kernel},
      {5, "saliency optimizer", 120, saliency},
      {6, "mechanism demonstration", 900, mechanism},
      {7, "mimic loss wiring", 0, mimic_wiring},
      {8, "constant-input pooling law", 0, constant_input},
  };
  std::set<int> chosen;
  for (int i = 1; i < argc; ++i) chosen.insert(std::stoi(argv[i]));

  int failed = 0;
  for (const Criterion& c : all) {
    if (!chosen.empty() && !chosen.contains(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.budget_s > 0 && secs > c.budget_s) {
      out.pass = false;
      out.detail += fmt("; over the %.0f s budget", c.budget_s);
    }
    std::printf("[%s] %d %s: %s (%.1f s)\n", out.pass ? "PASS" : "FAIL", c.id, c.name, out.detail.c_str(), secs);
    std::fflush(stdout);
    if (!out.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
