#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "dcn2/sampling.hpp"
#include "dcn2/tensor.hpp"

using namespace dcn2;

TEST(Tensor, AllocFillsAndSums) {
  const Tensor z = alloc({1, 1, 2, 2}, 0.0f);
  EXPECT_EQ(z.size(), 4);
  for (float v : z.data()) EXPECT_EQ(v, 0.0f);
  const Tensor e = alloc({1, 3, 0, 5}, 7.0f);
  EXPECT_TRUE(e.empty());
  EXPECT_EQ(sum(alloc({2, 2, 2, 2}, 1.0f)), 16.0);
}

TEST(Tensor, FlatIndexStaysInBounds) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> ext(1, 6);
  for (int trial = 0; trial < 200; ++trial) {
    const Dims d{ext(rng), ext(rng), ext(rng), ext(rng)};
    const Tensor t(d);
    EXPECT_EQ(t.index(d.n - 1, d.c - 1, d.h - 1, d.w - 1), t.size() - 1);
    EXPECT_EQ(t.index(0, 0, 0, 0), 0);
  }
}

TEST(Tensor, WriteLayout) {
  const std::vector<std::uint8_t> bytes = write_tensor(alloc({1, 1, 1, 1}, 2.5f));
  ASSERT_EQ(bytes.size(), 28u);
  EXPECT_EQ(std::memcmp(bytes.data(), "DCN2TENS", 8), 0);
  const std::uint8_t tail[4] = {0x00, 0x00, 0x20, 0x40};
  EXPECT_EQ(std::memcmp(bytes.data() + 24, tail, 4), 0);
}

TEST(Tensor, TruncatedPayloadReportsOffset) {
  std::vector<std::uint8_t> bytes = write_tensor(alloc({1, 1, 1, 1}, 2.5f));
  bytes.pop_back();
  try {
    read_tensor(bytes);
    FAIL() << "truncated payload accepted";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 27u);
  }
}

TEST(Tensor, BadMagicRejected) {
  std::vector<std::uint8_t> bytes = write_tensor(alloc({1, 1, 1, 1}, 1.0f));
  bytes[0] = 'X';
  EXPECT_THROW(read_tensor(bytes), FormatError);
}

TEST(Tensor, RoundTripIsBitExactIncludingNaN) {
  std::mt19937_64 rng(11);
  std::normal_distribution<float> nd;
  Tensor t({2, 3, 4, 5});
  for (float& v : t.data()) v = nd(rng);
  std::uint32_t payload = 0x7fc01234u;
  std::memcpy(&t.data()[7], &payload, 4);
  t.data()[8] = std::numeric_limits<float>::infinity();
  const auto bytes = write_tensor(t);
  const Tensor back = read_tensor(bytes);
  EXPECT_EQ(write_tensor(back), bytes);
  std::uint32_t got = 0;
  std::memcpy(&got, &back.data()[7], 4);
  EXPECT_EQ(got, payload);
}

TEST(Tensor, Axpy) {
  Tensor x({1, 2, 3, 3});
  for (std::int64_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(i) * 0.5f;
  Tensor dst({1, 2, 3, 3});
  axpy_accumulate(dst, x, 1.0);
  EXPECT_EQ(dst, x);
  const Tensor before = dst;
  axpy_accumulate(dst, x, 0.0);
  EXPECT_EQ(dst, before);
  axpy_accumulate(dst, x, -1.0);
  for (float v : dst.data()) EXPECT_EQ(v, 0.0f);
  Tensor wrong({1, 1, 3, 3});
  EXPECT_THROW(axpy_accumulate(dst, wrong, 1.0), ShapeError);
}

TEST(Tensor, AxpyOnDisjointViewsMatchesSequential) {
  Tensor a({1, 4, 4, 4});
  for (std::int64_t i = 0; i < a.size(); ++i) a[i] = static_cast<float>(i % 7);
  Tensor expect = a;
  for (std::int64_t c = 0; c < 2; ++c) {
    for (std::int64_t h = 0; h < 4; ++h) {
      for (std::int64_t w = 0; w < 4; ++w) expect(0, c, h, w) += 2.0f * a(0, c + 2, h, w);
    }
  }
  const Tensor src = a;
  axpy_accumulate(TensorView<float>(a, {0, 2}, {0, 4}, {0, 4}), TensorView<const float>(src, {2, 4}, {0, 4}, {0, 4}),
                  2.0);
  EXPECT_EQ(a, expect);
}

// --- bilinear ---

namespace {
const std::vector<double> kPlane{1.0, 2.0, 3.0, 4.0};
PlaneRef<double> plane2x2() { return {kPlane, 2, 2}; }
}  // namespace

TEST(Bilinear, Examples) {
  EXPECT_DOUBLE_EQ(bilinear_sample(plane2x2(), {0.0, 1.0}), 2.0);
  EXPECT_DOUBLE_EQ(bilinear_sample(plane2x2(), {0.5, 0.5}), 2.5);
  EXPECT_DOUBLE_EQ(bilinear_sample(plane2x2(), {-5.0, -5.0}), 0.0);
}

TEST(Bilinear, BackwardExample) {
  const BilinearGrad g = bilinear_backward(plane2x2(), {0.5, 0.5}, 1.0);
  EXPECT_NEAR(g.d_y, 2.0, 1e-12);
  EXPECT_NEAR(g.d_x, 1.0, 1e-12);
  double wsum = 0.0;
  for (int i = 0; i < g.count; ++i) wsum += g.taps[i].value;
  EXPECT_NEAR(wsum, 1.0, 1e-12);
}

TEST(Bilinear, FlatAndOutside) {
  const std::vector<double> flat(9, 3.0);
  const PlaneRef<double> p{flat, 3, 3};
  const BilinearGrad g = bilinear_backward(p, {0.7, 1.3}, 1.0);
  EXPECT_EQ(g.d_y, 0.0);
  EXPECT_EQ(g.d_x, 0.0);
  const BilinearGrad o = bilinear_backward(p, {-2.5, 1.0}, 1.0);
  EXPECT_EQ(o.count, 0);
  EXPECT_EQ(o.d_y, 0.0);
  EXPECT_EQ(o.d_x, 0.0);
}

TEST(Bilinear, WeightsSumToOneInside) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  const std::vector<double> v(16, 0.0);
  const PlaneRef<double> p{v, 4, 4};
  for (int i = 0; i < 100; ++i) {
    const BilinearGrad g = bilinear_backward(p, {u(rng), u(rng)}, 1.0);
    double s = 0.0;
    for (int k = 0; k < g.count; ++k) s += g.taps[k].value;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Bilinear, CoordinateGradientMatchesDifferences) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> u(-0.9, 4.9);
  std::vector<double> v(25);
  for (double& e : v) e = nd(rng);
  const PlaneRef<double> p{v, 5, 5};
  int checked = 0;
  while (checked < 200) {
    const double y = u(rng), x = u(rng);
    auto far = [](double c) { return std::abs(c - std::round(c)) >= 1e-2; };
    if (!far(y) || !far(x)) continue;
    const double h = 1e-4;
    const double ny = (bilinear_sample(p, {y + h, x}) - bilinear_sample(p, {y - h, x})) / (2 * h);
    const double nx = (bilinear_sample(p, {y, x + h}) - bilinear_sample(p, {y, x - h})) / (2 * h);
    const BilinearGrad g = bilinear_backward(p, {y, x}, 1.0);
    auto rel = [](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}); };
    EXPECT_LT(rel(g.d_y, ny), 1e-4);
    EXPECT_LT(rel(g.d_x, nx), 1e-4);
    ++checked;
  }
}

TEST(Bilinear, RejectsNonFinitePoint) {
  EXPECT_ANY_THROW(bilinear_sample(plane2x2(), {std::nan(""), 0.0}));
}

TEST(Resize, Examples) {
  TensorD t({1, 1, 2, 2});
  t.data()[0] = 1;
  t.data()[1] = 2;
  t.data()[2] = 3;
  t.data()[3] = 4;
  EXPECT_DOUBLE_EQ(bilinear_resize(t, 1, 1)[0], 2.5);
  EXPECT_EQ(bilinear_resize(t, 2, 2), t);
  const TensorD c = bilinear_resize(TensorD({1, 2, 3, 3}, 1.5), 5, 4);
  EXPECT_EQ(c.dims(), (Dims{1, 2, 5, 4}));
  for (double v : c.data()) EXPECT_DOUBLE_EQ(v, 1.5);
  EXPECT_THROW(bilinear_resize(TensorD({1, 1, 0, 3}), 2, 2), ShapeError);
}
