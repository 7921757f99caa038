#include <gtest/gtest.h>
#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "dcn2/image_io.hpp"
#include "dcn2/tensor.hpp"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(DCN2_BIN) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("dcn2_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string out(const std::string& sub = "") const { return "--out " + (dir_ / sub).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("gradcheck --op nosuch"), 2);
  EXPECT_EQ(run("gradcheck --seeds -1"), 2);
  EXPECT_EQ(run("demo-train --preset resnet"), 2);
  EXPECT_EQ(run("bench --shape 1,2,3"), 2);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(Cli, GradcheckReports) {
  EXPECT_EQ(run("gradcheck --op mdpool --seeds 0 " + out()), 0);
  EXPECT_EQ(slurp(dir_ / "gradcheck.jsonl"), "");
  EXPECT_EQ(run("gradcheck --op mdpool --seeds 2 " + out()), 0);
  const std::string lines = slurp(dir_ / "gradcheck.jsonl");
  EXPECT_EQ(std::count(lines.begin(), lines.end(), '\n'), 2);
  EXPECT_NE(lines.find("\"op\":\"mdpool\""), std::string::npos);
}

TEST_F(Cli, DemoTrainIsDeterministic) {
  const std::string args = "demo-train --preset mdconv --size 16 --steps 3 --seed 5 ";
  ASSERT_EQ(run(args + out("a")), 0);
  ASSERT_EQ(run(args + "--threads 2 " + out("b")), 0);
  const std::string a = slurp(dir_ / "a" / "metrics.json");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(dir_ / "b" / "metrics.json"));
  EXPECT_TRUE(fs::exists(dir_ / "a" / "model.json"));
}

TEST_F(Cli, DemoTrainDivergenceAndConfig) {
  std::ofstream(dir_ / "bad.json") << R"({"optimizer": {"lr": 1000000.0}, "layers": [{"kind": "regular", "channels": 4}]})";
  EXPECT_EQ(run("demo-train --size 16 --steps 40 --config " + (dir_ / "bad.json").string() + " " + out("x")), 3);
  std::ofstream(dir_ / "typo.json") << R"({"lyers": []})";
  EXPECT_EQ(run("demo-train --config " + (dir_ / "typo.json").string() + " " + out("y")), 2);
  EXPECT_EQ(run("demo-train --config " + (dir_ / "missing.json").string() + " " + out("z")), 4);
}

TEST_F(Cli, ErfAndSaliency) {
  dcn2::Tensor img({1, 1, 24, 24});
  for (std::int64_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(0.3 + 0.4 * ((i * 7919) % 13) / 13.0);
  const fs::path image = dir_ / "in.pgm";
  dcn2::save_image(image.string(), img);

  ASSERT_EQ(run("erf --image " + image.string() + " --node constant:2 " + out("erf")), 0);
  const std::string report = slurp(dir_ / "erf" / "erf.json");
  EXPECT_NE(report.find("\"nonzero\": 0"), std::string::npos) << report;
  EXPECT_TRUE(fs::exists(dir_ / "erf" / "erf.pgm"));

  ASSERT_EQ(run("saliency --image " + image.string() + " --node window:8,8,8,8 " + out("sal")), 0);
  EXPECT_TRUE(fs::exists(dir_ / "sal" / "saliency_mask.pgm"));
  EXPECT_NE(slurp(dir_ / "sal" / "saliency.json").find("\"achieved_error\""), std::string::npos);

  EXPECT_EQ(run("saliency --image " + (dir_ / "nope.pgm").string() + " --node window:0,0,2,2 " + out("n")), 4);
  EXPECT_EQ(run("saliency --image " + image.string() + " --node bogus " + out("n")), 2);
}

TEST_F(Cli, SmallBench) {
  ASSERT_EQ(run("bench --shape 1,4,16,16 --out-channels 4 --repeats 1 " + out()), 0);
  const std::string j = slurp(dir_ / "bench.json");
  EXPECT_NE(j.find("speedup"), std::string::npos) << j;
  EXPECT_EQ(run("bench --kernel 4"), 2);
}
