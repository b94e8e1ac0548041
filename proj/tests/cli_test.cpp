#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace {

namespace fs = std::filesystem;

const char* kTiny = R"(data:
  source: tiny-shapes
  n: 160
  classes: 4
  noise: 0.3
model:
  architecture: conv3x3:4 relu avgpool:2 conv3x3:4 relu avgpool:2 flatten
train:
  lr: 0.1
  epochs: 3
  batch_size: 32
finetune:
  lr: 0.01
  epochs: 2
trace:
  iterations: 8
  eval_examples: 32
prune:
  budget_kind: channel_fraction
  budget: 0.5
)";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("hap_cli_test_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write("tiny.yaml", kTiny);
  }
  void TearDown() override { fs::remove_all(dir_); }

  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }
  std::string read(const std::string& name) const {
    std::ifstream f(dir_ / name, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  int run(const std::string& args) const {
    const std::string cmd = std::string(HAP_CLI) + " " + args + " > " + path("stdout.txt") + " 2> " + path("stderr.txt");
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  fs::path dir_;
};

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("pipeline --no-such-flag"), 2);
  EXPECT_EQ(run("train"), 2);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(Cli, ConfigErrorsExitTwo) {
  write("bad.yaml", std::string(kTiny) + "  mystery: 1\n");
  EXPECT_EQ(run("pipeline -c " + path("bad.yaml") + " --output-dir " + path("out")), 2);
  EXPECT_NE(read("stderr.txt").find("mystery"), std::string::npos) << read("stderr.txt");
  EXPECT_EQ(run("pipeline -c " + path("missing.yaml")), 2);
  write("broken.yaml", "train:\n  lr: [0.1\n");
  EXPECT_EQ(run("pipeline -c " + path("broken.yaml")), 2);
  EXPECT_NE(read("stderr.txt").find("line"), std::string::npos) << read("stderr.txt");
  EXPECT_EQ(run("pipeline -c " + path("tiny.yaml") + " --ordering best --output-dir " + path("out")), 2);
}

TEST_F(Cli, InfeasibleExitsThree) {
  EXPECT_EQ(run("pipeline -c " + path("tiny.yaml") + " --budget 0.05 --output-dir " + path("out")), 3);
  EXPECT_NE(read("stderr.txt").find("per-layer-limit"), std::string::npos) << read("stderr.txt");
}

TEST_F(Cli, DivergenceExitsFour) {
  std::string text = kTiny;
  text.replace(text.find("lr: 0.1"), 7, "lr: 1e200");
  write("diverge.yaml", text);
  EXPECT_EQ(run("train -c " + path("diverge.yaml") + " -o " + path("m.ckpt")), 4);
  EXPECT_NE(read("stderr.txt").find("epoch"), std::string::npos) << read("stderr.txt");
}

TEST_F(Cli, PipelineWritesRecord) {
  ASSERT_EQ(run("pipeline -c " + path("tiny.yaml") + " --seed 3 --output-dir " + path("out")), 0) << read("stderr.txt");
  EXPECT_TRUE(fs::exists(dir_ / "out" / "result.txt"));
  EXPECT_NE(read("out/result.txt").find("seed = 3"), std::string::npos);
  EXPECT_NE(read("stdout.txt").find("final_accuracy"), std::string::npos);
}

TEST_F(Cli, StepwiseCommandsAgreeWithSavedPlan) {
  const std::string c = " -c " + path("tiny.yaml");
  ASSERT_EQ(run("train" + c + " -o " + path("base.ckpt")), 0) << read("stderr.txt");
  ASSERT_EQ(run("trace" + c + " -m " + path("base.ckpt") + " --output-dir " + path("tr")), 0) << read("stderr.txt");
  EXPECT_EQ(read("stdout.txt"), read("tr/traces.txt"));
  EXPECT_TRUE(fs::exists(dir_ / "tr" / "traces" / "group_0.csv"));
  ASSERT_EQ(run("implant" + c + " --implant-ratio 0.3 -m " + path("base.ckpt") + " -o " + path("imp.ckpt") + " --plan " + path("plan.txt")), 0)
      << read("stderr.txt");
  ASSERT_EQ(run("implant --apply" + c + " -m " + path("base.ckpt") + " -o " + path("again.ckpt") + " --plan " + path("plan.txt")), 0)
      << read("stderr.txt");
  EXPECT_EQ(read("imp.ckpt"), read("again.ckpt"));
  ASSERT_EQ(run("prune" + c + " -m " + path("base.ckpt") + " -o " + path("pruned.ckpt")), 0) << read("stderr.txt");
  ASSERT_EQ(run("finetune" + c + " -m " + path("pruned.ckpt") + " -o " + path("ft.ckpt")), 0) << read("stderr.txt");
  EXPECT_TRUE(fs::exists(dir_ / "ft.ckpt"));
  EXPECT_EQ(run("implant --apply" + c + " -m " + path("base.ckpt") + " -o " + path("x.ckpt") + " --plan " + path("nope.txt")), 2);
}

TEST_F(Cli, OracleCheckReportsAgreement) {
  write("mlp.yaml", "data: {source: gaussian-blobs, n: 120, classes: 3, features: 3}\nmodel: {architecture: dense:5 relu}\n"
                    "train: {epochs: 5}\ntrace: {iterations: 200, eval_examples: 40}\n");
  ASSERT_EQ(run("train -c " + path("mlp.yaml") + " -o " + path("m.ckpt")), 0) << read("stderr.txt");
  ASSERT_EQ(run("oracle-check -c " + path("mlp.yaml") + " -m " + path("m.ckpt")), 0) << read("stderr.txt");
  const std::string out = read("stdout.txt");
  EXPECT_NE(out.find("within_3se"), std::string::npos) << out;
  EXPECT_NE(out.find("spearman_score_vs_true_increase"), std::string::npos) << out;
}

TEST_F(Cli, CorruptCheckpointIsAnError) {
  write("junk.ckpt", "not a checkpoint");
  const int code = run("trace -c " + path("tiny.yaml") + " -m " + path("junk.ckpt"));
  EXPECT_NE(code, 0);
  EXPECT_NE(code, 3);
  EXPECT_NE(code, 4);
}

}  // namespace
