#include <gtest/gtest.h>

#include <random>

#include "dcn2/deform_conv.hpp"
#include "dcn2/oracle.hpp"
#include "test_util.hpp"

using namespace dcn2;
using dcn2::test::random_tensor;
using dcn2::test::random_weights;

namespace {

KernelSpec spec3(int stride = 1, int pad = 1, int dil = 1) {
  KernelSpec k;
  k.stride_h = k.stride_w = stride;
  k.pad_h = k.pad_w = pad;
  k.dilation_h = k.dilation_w = dil;
  return k;
}

}  // namespace

TEST(MdConv, DegeneratesToDenseConv) {
  std::mt19937_64 rng(1);
  const TensorD x = random_tensor({2, 3, 7, 6}, rng);
  const auto w = random_weights(4, 3, 3, 3, rng);
  for (const KernelSpec& k : {spec3(), spec3(2, 1, 1), spec3(1, 2, 2), spec3(1, 0, 1)}) {
    const auto f = make_field<double>(2, 9, k.out_h(7), k.out_w(6), 0.0, 1.0);
    const TensorD got = mdconv_forward(x, w, k, f);
    const TensorD want = oracle::dense_conv(x, w.weight, w.bias, k);
    EXPECT_LT(max_abs_diff(got, want), 1e-12);
  }
}

TEST(MdConv, ZeroModulationGivesBias) {
  std::mt19937_64 rng(2);
  const TensorD x = random_tensor({1, 2, 5, 5}, rng);
  const auto w = random_weights(3, 2, 3, 3, rng);
  const KernelSpec k = spec3();
  auto f = make_field<double>(1, 9, 5, 5, 0.0, 0.0);
  f.offsets = random_tensor(f.offsets.dims(), rng);
  const TensorD y = mdconv_forward(x, w, k, f);
  for (std::int64_t o = 0; o < 3; ++o) {
    for (double v : y.plane(0, o)) EXPECT_EQ(v, w.bias[static_cast<std::size_t>(o)]);
  }
}

TEST(MdConv, HalfModulationHalvesRigidOutput) {
  std::mt19937_64 rng(3);
  const TensorD x = random_tensor({1, 2, 6, 6}, rng);
  auto w = random_weights(3, 2, 3, 3, rng);
  std::fill(w.bias.begin(), w.bias.end(), 0.0);
  const KernelSpec k = spec3();
  const TensorD y = mdconv_forward(x, w, k, make_field<double>(1, 9, 6, 6, 0.0, 0.5));
  const TensorD rigid = conv2d_forward(x, w, k);
  for (std::int64_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], 0.5 * rigid[i], 1e-12);
}

TEST(MdConv, UnmodulatedFieldMatchesDcnv1Oracle) {
  std::mt19937_64 rng(4);
  const TensorD x = random_tensor({1, 2, 6, 5}, rng);
  const auto w = random_weights(2, 2, 3, 3, rng);
  const KernelSpec k = spec3(1, 1, 2);
  auto f = make_field<double>(1, 9, k.out_h(6), k.out_w(5), 0.0, 1.0, false);
  f.offsets = random_tensor(f.offsets.dims(), rng, 1.5);
  EXPECT_LT(max_abs_diff(mdconv_forward(x, w, k, f), oracle::dcnv1_conv(x, w.weight, w.bias, k, f.offsets)), 1e-12);
}

TEST(MdConv, BackwardExamples) {
  std::mt19937_64 rng(5);
  const KernelSpec k = spec3();
  const auto w = random_weights(2, 2, 3, 3, rng);
  auto f = make_field<double>(1, 9, 5, 5, 0.0, 0.7);
  f.offsets = random_tensor(f.offsets.dims(), rng, 0.4);
  const TensorD up = random_tensor({1, 2, 5, 5}, rng);

  // Constant input, every sample inside the map: the bilinear surface is flat.
  TensorD c({1, 2, 6, 6}, 2.0);
  const auto gc = mdconv_backward(c, w, spec3(2, 0, 1), make_field<double>(1, 9, 2, 2, 0.3, 0.7),
                                  random_tensor({1, 2, 2, 2}, rng));
  for (double v : gc.grad_offsets.data()) EXPECT_NEAR(v, 0.0, 1e-12);

  auto zero = f;
  zero.modulation.fill(0.0);
  const TensorD x = random_tensor({1, 2, 5, 5}, rng);
  const auto g = mdconv_backward(x, w, k, zero, up);
  for (double v : g.grad_x.data()) EXPECT_EQ(v, 0.0);
  for (double v : g.grad_w.data()) EXPECT_EQ(v, 0.0);
  double mod_mag = 0.0;
  for (double v : g.grad_modulation.data()) mod_mag += std::abs(v);
  EXPECT_GT(mod_mag, 0.0);
}

TEST(MdConv, LinearInInputAndWeights) {
  std::mt19937_64 rng(6);
  const KernelSpec k = spec3();
  auto w = random_weights(2, 2, 3, 3, rng);
  std::fill(w.bias.begin(), w.bias.end(), 0.0);
  auto w2 = random_weights(2, 2, 3, 3, rng);
  std::fill(w2.bias.begin(), w2.bias.end(), 0.0);
  auto f = make_field<double>(1, 9, 5, 5, 0.0, 0.6);
  f.offsets = random_tensor(f.offsets.dims(), rng, 0.8);
  const TensorD a = random_tensor({1, 2, 5, 5}, rng);
  const TensorD b = random_tensor({1, 2, 5, 5}, rng);
  TensorD ab = a;
  axpy_accumulate(ab, b, 2.0);
  TensorD want = mdconv_forward(a, w, k, f);
  axpy_accumulate(want, mdconv_forward(b, w, k, f), 2.0);
  EXPECT_LT(max_abs_diff(mdconv_forward(ab, w, k, f), want), 1e-12);

  ConvWeights<double> ws{w.weight, w.bias};
  axpy_accumulate(ws.weight, w2.weight, 1.0);
  TensorD want_w = mdconv_forward(a, w, k, f);
  axpy_accumulate(want_w, mdconv_forward(a, w2, k, f), 1.0);
  EXPECT_LT(max_abs_diff(mdconv_forward(a, ws, k, f), want_w), 1e-12);
}

TEST(MdConv, OptimizedMatchesReference) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> small(1, 3);
  for (int trial = 0; trial < 40; ++trial) {
    KernelSpec k;
    k.kernel_h = 2 * small(rng) - 1;
    k.kernel_w = 2 * small(rng) - 1;
    k.stride_h = small(rng);
    k.stride_w = small(rng);
    k.pad_h = small(rng) - 1;
    k.pad_w = small(rng) - 1;
    k.dilation_h = small(rng);
    k.dilation_w = small(rng);
    const Dims d{small(rng), small(rng), 6 + small(rng), 6 + small(rng)};
    if (k.out_h(d.h) < 1 || k.out_w(d.w) < 1) continue;
    const TensorD x = random_tensor(d, rng);
    const auto w = random_weights(small(rng), d.c, k.kernel_h, k.kernel_w, rng);
    auto f = make_field<double>(d.n, k.taps(), k.out_h(d.h), k.out_w(d.w), 0.0, 1.0);
    f.offsets = random_tensor(f.offsets.dims(), rng, 2.0);
    f.modulation = random_tensor(f.modulation.dims(), rng, 0.5, 0.5);
    const TensorD up = random_tensor({d.n, w.out_channels(), k.out_h(d.h), k.out_w(d.w)}, rng);
    const Execution exec{3, true};
    EXPECT_LT(max_abs_diff(mdconv_forward_optimized(x, w, k, f, exec), mdconv_forward(x, w, k, f)), 1e-10);
    const auto ga = mdconv_backward_optimized(x, w, k, f, up, exec);
    const auto gb = mdconv_backward(x, w, k, f, up);
    EXPECT_LT(max_abs_diff(ga.grad_x, gb.grad_x), 1e-10);
    EXPECT_LT(max_abs_diff(ga.grad_w, gb.grad_w), 1e-10);
    EXPECT_LT(max_abs_diff(ga.grad_offsets, gb.grad_offsets), 1e-10);
    EXPECT_LT(max_abs_diff(ga.grad_modulation, gb.grad_modulation), 1e-10);
  }
}

TEST(MdConv, DeterministicBackwardIgnoresThreadCount) {
  std::mt19937_64 rng(8);
  const KernelSpec k = spec3();
  const TensorD x = random_tensor({2, 4, 9, 9}, rng);
  const auto w = random_weights(5, 4, 3, 3, rng);
  auto f = make_field<double>(2, 9, 9, 9, 0.0, 1.0);
  f.offsets = random_tensor(f.offsets.dims(), rng, 1.5);
  const TensorD up = random_tensor({2, 5, 9, 9}, rng);
  const auto a = mdconv_backward_optimized(x, w, k, f, up, {1, true});
  const auto b = mdconv_backward_optimized(x, w, k, f, up, {4, true});
  EXPECT_EQ(a.grad_x, b.grad_x);
  EXPECT_EQ(a.grad_w, b.grad_w);
  EXPECT_EQ(a.grad_offsets, b.grad_offsets);
}

TEST(MdConv, EmptyBatchAndShapeErrors) {
  std::mt19937_64 rng(9);
  const KernelSpec k = spec3();
  const auto w = random_weights(2, 2, 3, 3, rng);
  const TensorD x({0, 2, 5, 5});
  const TensorD y = mdconv_forward_optimized(x, w, k, make_field<double>(0, 9, 5, 5));
  EXPECT_EQ(y.size(), 0);
  const TensorD bad = random_tensor({1, 3, 5, 5}, rng);
  EXPECT_THROW(mdconv_forward(bad, w, k, make_field<double>(1, 9, 5, 5)), ShapeError);
  EXPECT_THROW(mdconv_forward(random_tensor({1, 2, 5, 5}, rng), w, k, make_field<double>(1, 9, 4, 5)), ShapeError);
}

TEST(OffsetBranch, ZeroInitAndSaturation) {
  std::mt19937_64 rng(10);
  const KernelSpec k = spec3();
  const TensorD x = random_tensor({2, 3, 5, 4}, rng);
  const auto branch = zero_offset_branch<double>(3, k);
  EXPECT_EQ(branch.out_channels(), 27);
  const auto f = offset_branch_forward(x, branch, k);
  EXPECT_EQ(f.offsets.dims(), (Dims{2, 18, 5, 4}));
  EXPECT_EQ(f.modulation.dims(), (Dims{2, 9, 5, 4}));
  for (double v : f.offsets.data()) EXPECT_EQ(v, 0.0);
  for (double v : f.modulation.data()) EXPECT_EQ(v, 0.5);

  auto hot = branch;
  for (std::size_t c = 18; c < 27; ++c) hot.bias[c] = 20.0;
  const auto saturated = offset_branch_forward(x, hot, k);
  for (double v : saturated.modulation.data()) EXPECT_NEAR(v, 1.0, 1e-8);

  const auto unmod = offset_branch_forward(x, zero_offset_branch<double>(3, k, false), k, false);
  EXPECT_FALSE(unmod.modulated());
  EXPECT_THROW(offset_branch_forward(x, zero_offset_branch<double>(3, k, false), k, true), ShapeError);
  EXPECT_EQ(offset_branch_param_group().lr_multiplier, 0.1);
}

TEST(LayerCost, MatchesLoopCounter) {
  const std::int64_t cin = 64, cout = 64, h = 128, w = 128;
  const KernelSpec k = spec3();
  std::int64_t counted = 0;
  for (std::int64_t oy = 0; oy < k.out_h(h); ++oy) {
    for (std::int64_t ox = 0; ox < k.out_w(w); ++ox) counted += cout * cin * k.taps();
  }
  const LayerCost dense = layer_cost(LayerKind::regular, cin, cout, h, w, k);
  EXPECT_EQ(dense.macs, counted);
  EXPECT_EQ(dense.flops(), 2 * 64 * 64 * 9 * 128 * 128);
  EXPECT_EQ(dense.params, 64 * 64 * 9 + 64);
  const LayerCost md = layer_cost(LayerKind::mdconv, cin, cout, h, w, k);
  const LayerCost branch = layer_cost(LayerKind::regular, cin, 27, h, w, k);
  EXPECT_EQ(md.macs, dense.macs + branch.macs);
  EXPECT_EQ(md.params, dense.params + branch.params);
  const LayerCost dc = layer_cost(LayerKind::dconv, cin, cout, h, w, k);
  EXPECT_EQ(dc.macs, dense.macs + layer_cost(LayerKind::regular, cin, 18, h, w, k).macs);
}

TEST(LayerConfig, JsonRoundTrip) {
  LayerConfig c;
  c.kernel = spec3(2, 2, 2);
  c.kernel.kernel_w = 5;
  c.modulated = false;
  const LayerConfig back = layer_config_from_json(layer_config_to_json(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(layer_config_to_json(back), layer_config_to_json(c));
  EXPECT_THROW(layer_config_from_json("{\"modulated\": 3}"), ConfigError);
  EXPECT_THROW(layer_kind_from_string("deformable"), ConfigError);
}
