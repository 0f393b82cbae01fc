#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include <gtest/gtest.h>
#include <json.hpp>

#include "cosod/imageio.hpp"

using namespace cosod;
namespace fs = std::filesystem;

namespace {

const fs::path kCli = COSOD_CLI;

const std::string kTiny =
    " --set model.d=8 --set model.heads=2 --set model.layers_tsir=1 --set model.layers_tgl=1"
    " --set model.layers_tgf=1 --set model.ffn_multiplier=2 --set model.proj_dim=4";
const std::string kSmallData = " --set synth.n_groups=2 --set synth.n_val_groups=1 --set synth.n_aux=4";

struct Result {
  int code = -1;
  std::string out;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root = fs::temp_directory_path() /
           ("cosod_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root);
    fs::create_directories(root);
  }
  void TearDown() override { fs::remove_all(root); }

  Result run(const std::string& args) const {
    const fs::path log = root / "stdout.txt";
    const std::string cmd = kCli.string() + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = fs::exists(log) ? read_file(log) : "";
    return r;
  }

  std::string p(const std::string& rel) const { return (root / rel).string(); }

  fs::path root;
};

std::map<std::string, std::string> tree_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return out;
}

}  // namespace

TEST_F(Cli, HelpListsFlagsAndDefaults) {
  Result r = run("--help");
  EXPECT_EQ(r.code, 0);
  for (const char* sub : {"synth", "train", "infer", "eval", "selfcheck"}) EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
  r = run("train --help");
  EXPECT_EQ(r.code, 0);
  for (const char* flag : {"--lr", "--beta1", "--beta2", "--epochs", "--group-size", "--aux-size", "--seed", "--eval-every"})
    EXPECT_NE(r.out.find(flag), std::string::npos) << flag;
  EXPECT_NE(r.out.find("0.0001"), std::string::npos);
  EXPECT_NE(r.out.find("0.99"), std::string::npos);
}

TEST_F(Cli, BadInvocationsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("synth --out " + p("d") + " --set train.nosuch=1").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
}

TEST_F(Cli, SynthIsDeterministic) {
  ASSERT_EQ(run("synth --out " + p("a") + kSmallData).code, 0);
  ASSERT_EQ(run("synth --out " + p("b") + kSmallData).code, 0);
  EXPECT_EQ(tree_bytes(root / "a"), tree_bytes(root / "b"));
  EXPECT_TRUE(fs::exists(root / "a" / "train" / "group_0001" / "gt"));
  EXPECT_TRUE(fs::exists(root / "a" / "val"));
  EXPECT_TRUE(fs::exists(root / "a" / "config.txt"));
}

TEST_F(Cli, TrainInferEvalRoundTrip) {
  ASSERT_EQ(run("synth --out " + p("data") + kSmallData).code, 0);
  Result r = run("train --data " + p("data") + " --out " + p("run") + " --max-steps 3 --lr 0.002" + kTiny +
                 " --set train.lr=0.5");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(root / "run" / "model.ckpt"));
  EXPECT_TRUE(fs::exists(root / "run" / "optimizer.ckpt"));
  const std::string csv = read_file(root / "run" / "loss_log.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  // The flag wins over --set and is echoed into the run directory.
  EXPECT_NE(read_file(root / "run" / "config.txt").find("lr = 0.002"), std::string::npos);

  const fs::path group = root / "data" / "val" / "group_0000";
  r = run("infer --checkpoint " + p("run/model.ckpt") + " --group " + group.string() + " --out " + p("pred"));
  ASSERT_EQ(r.code, 0) << r.out;
  std::vector<std::string> in, out;
  for (const auto& e : fs::directory_iterator(group / "img")) in.push_back(e.path().stem().string());
  for (const auto& e : fs::directory_iterator(root / "pred")) out.push_back(e.path().stem().string());
  std::sort(in.begin(), in.end());
  std::sort(out.begin(), out.end());
  EXPECT_EQ(in, out);

  // Renaming changes the listing order but not any image's map.
  fs::create_directories(root / "shuffled");
  const std::vector<std::string> prefix{"d_", "b_", "c_", "a_"};
  for (std::size_t i = 0; i < in.size(); ++i)
    fs::copy_file(group / "img" / (in[i] + ".ppm"), root / "shuffled" / (prefix[i % 4] + in[i] + ".ppm"));
  ASSERT_EQ(run("infer --checkpoint " + p("run/model.ckpt") + " --group " + p("shuffled") + " --out " + p("pred2")).code, 0);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const ByteImage a = read_pnm(root / "pred" / (in[i] + ".pgm"));
    const ByteImage b = read_pnm(root / "pred2" / (prefix[i % 4] + in[i] + ".pgm"));
    ASSERT_EQ(a.data.size(), b.data.size());
    for (std::size_t k = 0; k < a.data.size(); ++k) EXPECT_LE(std::abs(a.data[k] - b.data[k]), 1);
  }

  r = run("eval --pred " + p("pred") + " --gt " + (group / "gt").string() + " --out " + p("report"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = nlohmann::json::parse(read_file(root / "report" / "report.json"));
  EXPECT_EQ(j["n_images"], 4);
  EXPECT_TRUE(fs::exists(root / "report" / "pr_curve.csv"));

  r = run("eval --pred " + (group / "gt").string() + " --gt " + (group / "gt").string() + " --out " + p("perfect"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto perfect = nlohmann::json::parse(read_file(root / "perfect" / "report.json"));
  EXPECT_EQ(perfect["mae"].get<double>(), 0.0);
  for (const char* k : {"f_max", "s_alpha", "e_max"}) EXPECT_NEAR(perfect[k].get<double>(), 1.0, 1e-6) << k;
}

TEST_F(Cli, InferRejectsSingleImagesAndMissingCheckpoints) {
  ASSERT_EQ(run("synth --out " + p("data") + kSmallData).code, 0);
  ASSERT_EQ(run("train --data " + p("data") + " --out " + p("run") + " --max-steps 1" + kTiny).code, 0);
  fs::create_directories(root / "single");
  fs::copy_file(root / "data" / "val" / "group_0000" / "img" / "img_00.ppm", root / "single" / "img_00.ppm");
  Result r = run("infer --checkpoint " + p("run/model.ckpt") + " --group " + p("single") + " --out " + p("o"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("at least 2"), std::string::npos) << r.out;
  r = run("infer --checkpoint " + p("nope.ckpt") + " --group " + p("single") + " --out " + p("o"));
  EXPECT_EQ(r.code, 2);
}

TEST_F(Cli, SelfcheckPassesAndCatchesMutations) {
  EXPECT_EQ(run("selfcheck --instances 2").code, 0);
  const Result xor_fault = run("selfcheck --instances 2 --mutate xor-to-or");
  EXPECT_EQ(xor_fault.code, 3);
  EXPECT_NE(xor_fault.out.find("FAIL"), std::string::npos);
  EXPECT_EQ(run("selfcheck --instances 2 --mutate pe-in-tgl").code, 3);
}
