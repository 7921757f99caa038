#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <memory>

#include "dcn2/error.hpp"
#include "dcn2/finite_diff.hpp"
#include "dcn2/gradcheck_targets.hpp"
#include "dcn2/oracle.hpp"

using namespace dcn2;

TEST(FiniteDiff, QuadraticIsExact) {
  std::vector<double> t{1.0, -2.0, 0.5};
  auto f = [&] { return 3.0 * t[0] * t[0] + t[1] * t[2]; };
  const auto g = finite_diff(f, t);
  EXPECT_NEAR(g[0], 6.0, 1e-9);
  EXPECT_NEAR(g[1], 0.5, 1e-9);
  EXPECT_NEAR(g[2], -2.0, 1e-9);
  EXPECT_EQ(t, (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(FiniteDiff, NonFiniteLossThrows) {
  std::vector<double> t{1.0};
  EXPECT_THROW(finite_diff([] { return std::nan(""); }, t), OracleError);
}

TEST(FiniteDiff, RelativeError) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-9), 1e-9 / 1e-6);
}

TEST(FiniteDiff, CompareBlockSkipsTinyPairs) {
  const std::vector<double> a{1.0, 1e-10, 2.0}, n{1.0005, 0.0, 2.0};
  const BlockReport r = compare_block("w", a, n);
  EXPECT_EQ(r.compared, 2);
  EXPECT_EQ(r.skipped, 1);
  EXPECT_TRUE(r.pass);
  EXPECT_FALSE(compare_block("w", std::vector<double>{1.0}, std::vector<double>{1.01}).pass);
}

TEST(Gradcheck, WrongGradientFailsWithoutThrowing) {
  auto gen = [](std::mt19937_64&) {
    auto w = std::make_shared<std::vector<double>>(std::vector<double>{0.3, 0.7});
    GradInstance inst;
    inst.loss = [w] { return (*w)[0] * (*w)[1]; };
    inst.blocks.push_back({"w", *w, {(*w)[1], 2.0 * (*w)[0]}});
    return inst;
  };
  const GradCheckReport r = gradcheck("toy", gen, 4);
  EXPECT_FALSE(r.pass);
  ASSERT_EQ(r.blocks.size(), 1u);
  const std::string line = r.json_line();
  EXPECT_EQ(line.find('\n'), std::string::npos);
  EXPECT_NE(line.find("\"op\":\"toy\""), std::string::npos);
  EXPECT_NE(line.find("\"seed\":4"), std::string::npos);
  EXPECT_NE(line.find("\"pass\":false"), std::string::npos);

  const GradCheckReport broken = gradcheck("toy", [](std::mt19937_64&) -> GradInstance { throw Error("boom"); }, 1);
  EXPECT_FALSE(broken.pass);
  EXPECT_FALSE(broken.error.empty());
}

TEST(Registry, CoversEveryDifferentiableOp) {
  std::map<std::string, std::size_t> blocks;
  for (const GradcheckTarget& t : gradcheck_registry()) blocks[t.name] = t.blocks.size();
  EXPECT_EQ(blocks.at("mdconv"), 5u);
  EXPECT_EQ(blocks.at("mdconv_optimized"), 5u);
  EXPECT_EQ(blocks.at("mdpool"), 3u);
  EXPECT_EQ(blocks.at("bilinear"), 2u);
  EXPECT_EQ(blocks.at("cosine_mimic"), 2u);
  EXPECT_TRUE(blocks.contains("offset_branch"));
  EXPECT_TRUE(blocks.contains("roi_branch"));
}

TEST(Registry, EveryTargetPassesOneSeed) {
  for (const GradcheckTarget& t : gradcheck_registry()) {
    const GradCheckReport r = gradcheck(t.name, t.generate, 11);
    EXPECT_TRUE(r.pass) << r.json_line();
    ASSERT_EQ(r.blocks.size(), t.blocks.size()) << t.name;
    for (std::size_t i = 0; i < t.blocks.size(); ++i) EXPECT_EQ(r.blocks[i].name, t.blocks[i]);
  }
}

TEST(Registry, Matching) {
  EXPECT_EQ(match_targets("all").size(), gradcheck_registry().size());
  EXPECT_EQ(match_targets("mdconv").size(), 1u);
  EXPECT_EQ(match_targets("mdconv*").size(), 2u);
  EXPECT_THROW(match_targets("nosuch"), UsageError);
}

TEST(DenseOracle, Examples) {
  TensorD x({1, 1, 3, 3}, 1.0);
  const TensorD w({1, 1, 3, 3}, 1.0 / 9.0);
  const TensorD y = oracle::dense_conv(x, w, {}, KernelSpec{});
  EXPECT_NEAR(y(0, 0, 1, 1), 1.0, 1e-15);
  EXPECT_NEAR(y(0, 0, 0, 0), 4.0 / 9.0, 1e-15);

  for (std::int64_t i = 0; i < 9; ++i) x[i] = static_cast<double>(i);
  KernelSpec one{1, 1, 1, 1, 0, 0, 1, 1};
  const std::vector<double> bias{0.5};
  const TensorD id = oracle::dense_conv(x, TensorD({1, 1, 1, 1}, 1.0), bias, one);
  for (std::int64_t i = 0; i < 9; ++i) EXPECT_EQ(id[i], x[i] + 0.5);
}

TEST(DenseOracle, Dcnv1ZeroOffsetsIsDense) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  TensorD x({2, 2, 5, 6}), w({3, 2, 3, 3});
  for (double& v : x.data()) v = u(rng);
  for (double& v : w.data()) v = u(rng);
  KernelSpec k;
  k.dilation_h = 2;
  k.pad_h = 2;
  const TensorD off({2, 18, k.out_h(5), k.out_w(6)}, 0.0);
  const TensorD a = oracle::dense_conv(x, w, {}, k), b = oracle::dcnv1_conv(x, w, {}, k, off);
  EXPECT_LT(max_abs_diff(a, b), 1e-14);
}

TEST(DenseOracle, BilinearValues) {
  const std::vector<double> plane{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(oracle::bilinear(plane, 2, 2, 0.5, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(oracle::bilinear(plane, 2, 2, -1.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(oracle::bilinear(plane, 2, 2, 1.5, 0.0), 1.5);
}
