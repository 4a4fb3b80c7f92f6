#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mast/data.hpp"
#include "mast/rng.hpp"

namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "mast_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    ASSERT_EQ(run("gen-data --out " + path("data.bin") + " --n 96 --side 16 --seed 4"), 0);
    ASSERT_EQ(run("pretrain --data " + path("data.bin") + " --out " + path("run") +
                  " --epochs 2 --batch-size 16 --embed-dim 16 --set hidden=16 --set channels=[4,8] --quiet"),
              0);
  }

  static int run(const std::string& args, const std::string& capture = "") {
    std::string cmd = std::string(MAST_CLI_PATH) + " " + args;
    cmd += capture.empty() ? " > /dev/null 2>&1" : " > " + path(capture) + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  static std::string path(const std::string& name) { return (dir_ / name).string(); }

  static std::string slurp(const std::string& name) {
    std::ifstream is(path(name), std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
  }

  static fs::path dir_;
};

fs::path Cli::dir_;

TEST_F(Cli, PretrainWritesCheckpointAndLog) {
  EXPECT_TRUE(fs::exists(path("run/final.ckpt")));
  std::ifstream log(path("run/metrics.ndjson"));
  std::size_t lines = 0;
  for (std::string line; std::getline(log, line); ++lines) {
    EXPECT_TRUE(nlohmann::json::parse(line).contains("k_effective"));
  }
  EXPECT_EQ(lines, 12u);
}

TEST_F(Cli, AnalyzeMasksWritesCsvAndIsIdempotent) {
  ASSERT_EQ(run("analyze masks --ckpt " + path("run/final.ckpt") + " --out " + path("masks1")), 0);
  ASSERT_EQ(run("analyze masks --ckpt " + path("run/final.ckpt") + " --out " + path("masks2")), 0);
  const std::string csv = slurp("masks1/mask_correlation.csv");
  EXPECT_EQ(csv, slurp("masks2/mask_correlation.csv"));
  EXPECT_EQ(slurp("masks1/mask_correlation.ppm"), slurp("masks2/mask_correlation.ppm"));
  std::istringstream is(csv);
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, "row,ColorJitter,GaussianBlur,RandomFlip,RandomGrayscale,RandomResizedCrop");
  std::size_t rows = 0;
  for (std::string line; std::getline(is, line);) ++rows;
  EXPECT_EQ(rows, 5u);  // K = 5 for the mast5 set
}

TEST_F(Cli, AnalyzeInvarianceUncertaintyAndSubspaceClass) {
  const std::string ckpt = " --ckpt " + path("run/final.ckpt") + " --data " + path("data.bin");
  ASSERT_EQ(run("analyze invariance" + ckpt + " --samples 16 --points 3 --out " + path("an")), 0);
  ASSERT_EQ(run("analyze uncertainty" + ckpt + " --samples 32 --out " + path("an")), 0);
  ASSERT_EQ(run("analyze subspace-class" + ckpt + " --probe-epochs 5 --out " + path("an")), 0);
  std::istringstream inv(slurp("an/invariance_ColorJitter.csv"));
  std::string header;
  std::getline(inv, header);
  EXPECT_EQ(header.rfind("magnitude,unmasked,", 0), 0u);
  std::size_t rows = 0;
  for (std::string line; std::getline(inv, line);) ++rows;
  EXPECT_EQ(rows, 3u);
  const auto unc = nlohmann::json::parse(slurp("an/uncertainty.json"));
  EXPECT_EQ(unc["samples"].get<std::size_t>(), 32u);
  EXPECT_TRUE(fs::exists(path("an/subspace_class.csv")));
}

TEST_F(Cli, ProbeOnUntrainedCheckpointWithUnrelatedLabelsIsChance) {
  // Labels drawn independently of the images: the oracle accuracy is 1/8.
  auto ds = mast::generate({800, 16, mast::Factor::hue}, 8);
  mast::Rng rng(5);
  for (auto& s : ds.samples) s.label = static_cast<std::uint16_t>(rng() % 8);
  mast::write_dataset(ds, path("random_labels.bin"), mast::DatasetFormat::packed);
  ASSERT_EQ(run("pretrain --data " + path("random_labels.bin") + " --out " + path("untrained") +
                " --epochs 1 --batch-size 16 --embed-dim 16 --set hidden=16 --set channels=[4,8] --set base_lr=0 --quiet"),
            0);
  ASSERT_EQ(run("probe --ckpt " + path("untrained/final.ckpt") + " --data " + path("random_labels.bin") +
                " --epochs 20 --out " + path("probe.json")),
            0);
  const auto j = nlohmann::json::parse(slurp("probe.json"));
  EXPECT_NEAR(j["top1"].get<double>(), 0.125, 0.08);
  EXPECT_EQ(j["test_size"].get<std::size_t>(), 160u);
}

TEST_F(Cli, GradcheckPasses) {
  ASSERT_EQ(run("gradcheck --out " + path("gradcheck.json")), 0);
  EXPECT_TRUE(nlohmann::json::parse(slurp("gradcheck.json"))["passed"].get<bool>());
}

TEST_F(Cli, UsageErrorsNameTheField) {
  EXPECT_EQ(run("pretrain --data " + path("data.bin") + " --set bogus_key=1", "err1.txt"), 2);
  EXPECT_NE(slurp("err1.txt").find("bogus_key"), std::string::npos);
  EXPECT_EQ(run("pretrain --data " + path("data.bin") + " --epochs ten", "err2.txt"), 2);
  EXPECT_NE(slurp("err2.txt").find("--epochs"), std::string::npos);
  EXPECT_EQ(run("pretrain --data " + path("data.bin") + " --set momentum=1.5", "err3.txt"), 2);
  EXPECT_NE(slurp("err3.txt").find("momentum"), std::string::npos);
  EXPECT_EQ(run("pretrain --no-such-flag", "err4.txt"), 2);
  EXPECT_NE(slurp("err4.txt").find("--no-such-flag"), std::string::npos);
  EXPECT_EQ(run("gen-data --out " + path("x.bin") + " --label-factor colour", "err5.txt"), 2);
  EXPECT_NE(slurp("err5.txt").find("label-factor"), std::string::npos);
  EXPECT_EQ(run("", "err6.txt"), 2);
}

TEST_F(Cli, FailedOutputGivesNonzeroExit) {
  // The output directory path is an existing regular file.
  std::ofstream(path("blocker")) << "x";
  EXPECT_EQ(run("analyze masks --ckpt " + path("run/final.ckpt") + " --out " + path("blocker")), 1);
}

TEST_F(Cli, CoeffSweepWritesTable) {
  ASSERT_EQ(run("ablate coeff-sweep --data " + path("data.bin") + " --out " + path("sweep") +
                " --epochs 1 --batch-size 16 --embed-dim 16 --set hidden=16 --set channels=[4,8]" +
                " --scale 0.5 --scale 2 --probe-epochs 3"),
            0);
  std::istringstream is(slurp("sweep/coeff_sweep.csv"));
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "row,top1");
  std::getline(is, line);
  EXPECT_EQ(line.rfind("s0.5,", 0), 0u);
  std::getline(is, line);
  EXPECT_EQ(line.rfind("s2,", 0), 0u);
}

TEST_F(Cli, LeaveOneOutRunsFullAndReduced) {
  ASSERT_EQ(run("ablate leave-one-out --data " + path("data.bin") + " --out " + path("loo") +
                " --epochs 1 --batch-size 16 --embed-dim 16 --set hidden=16 --set channels=[4,8]" +
                " --op GaussianBlur --probe-epochs 3"),
            0);
  const auto rows = nlohmann::json::parse(slurp("loo/leave_one_out.json"));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0]["run"], "full");
  EXPECT_EQ(rows[1]["run"], "without_GaussianBlur");
  EXPECT_TRUE(fs::exists(path("loo/loo_GaussianBlur/final.ckpt")));
}

}  // namespace
