#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mast/checkpoint.hpp"
#include "mast/data.hpp"
#include "mast/trainer.hpp"

using namespace mast;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mast_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TrainConfig tiny_config(DType dt = DType::f64) {
  TrainConfig cfg;
  cfg.embed_dim = 16;
  cfg.hidden = 16;
  cfg.channels = {4, 8, 8};
  cfg.schedule.epochs = 4;
  cfg.schedule.batch_size = 8;
  cfg.dtype = dt;
  cfg.seed = 17;
  cfg.threads = 1;
  return cfg;
}

std::vector<Image> tiny_images(std::size_t n = 32) {
  return generate({n, 16, Factor::hue}, 3).images();
}

std::vector<std::vector<double>> snapshot(Model& model) {
  std::vector<std::vector<double>> out;
  for (const auto& p : model.parameters()) out.push_back(p.tensor->to_vector());
  return out;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream is(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(is, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST(Schedule, CurriculumTwentyEpochs) {
  for (std::size_t e = 0; e < 10; ++e) EXPECT_EQ(k_effective(e, 20, 5), 1u) << e;
  EXPECT_EQ(k_effective(19, 20, 5), 5u);
  std::size_t prev = 1;
  for (std::size_t e = 0; e < 20; ++e) {
    const std::size_t k = k_effective(e, 20, 5);
    EXPECT_GE(k, prev);
    EXPECT_LE(k, 5u);
    prev = k;
  }
  // Linear in e: round(1 + 4 (e - 10) / 9).
  const std::size_t expected[] = {1, 1, 2, 2, 3, 3, 4, 4, 5, 5};
  for (std::size_t e = 10; e < 20; ++e) EXPECT_EQ(k_effective(e, 20, 5), expected[e - 10]) << e;
}

TEST(Schedule, CurriculumEdgeCases) {
  EXPECT_EQ(k_effective(20, 21, 15), 15u);
  EXPECT_EQ(k_effective(9, 21, 15), 1u);
  EXPECT_EQ(k_effective(0, 1, 5), 5u);
  EXPECT_EQ(k_effective(1, 2, 5), 5u);
  EXPECT_EQ(k_effective(0, 2, 5), 1u);
  for (std::size_t e = 0; e < 10; ++e) EXPECT_EQ(k_effective(e, 10, 1), 1u);
  EXPECT_EQ(k_effective(40, 20, 5), 5u);
}

TEST(Schedule, CosineLearningRate) {
  EXPECT_EQ(lr_at(0, 100, 0.05), 0.05);
  EXPECT_NEAR(lr_at(100, 100, 0.05), 0.0, 1e-18);
  EXPECT_NEAR(lr_at(50, 100, 0.05), 0.025, 1e-15);
  EXPECT_LT(lr_at(0, 1000, 0.05, true), 0.05 / 10);
  EXPECT_NEAR(lr_at(19, 1000, 0.05, true), lr_at(19, 1000, 0.05), 1e-15);
  for (std::size_t s = 1; s <= 100; ++s) EXPECT_LE(lr_at(s, 100, 1.0), lr_at(s - 1, 100, 1.0));
}

TEST(Trainer, ZeroLearningRateLeavesParametersBitIdentical) {
  auto cfg = tiny_config();
  cfg.schedule.base_lr = 0.0;
  Trainer t(cfg, tiny_images());
  const auto before = snapshot(t.model());
  t.run_epoch();
  EXPECT_EQ(snapshot(t.model()), before);
}

TEST(Trainer, StageOneStepTrainsOneSubspace) {
  auto cfg = tiny_config();
  cfg.coefficients.lambda1 = 0.0;  // isolate the distance term's effect on U
  Trainer t(cfg, tiny_images());
  const auto u_before = t.model().bank.u().to_vector();
  const auto rec = t.train_step(tiny_images(8));
  ASSERT_EQ(rec.k_effective, 1u);
  ASSERT_EQ(rec.active.size(), 1u);
  const auto u_after = t.model().bank.u().to_vector();
  const std::size_t k = cfg.k_max();
  std::size_t changed_active = 0;
  for (std::size_t j = 0; j < u_after.size(); ++j) {
    if (j % k == rec.active[0]) {
      changed_active += u_after[j] != u_before[j];
    } else {
      EXPECT_EQ(u_after[j], u_before[j]) << "entry " << j;
    }
  }
  EXPECT_GT(changed_active, 0u);
}

TEST(Trainer, IdenticalSeedsGiveIdenticalBreakdowns) {
  auto run = [] {
    Trainer t(tiny_config(), tiny_images());
    std::vector<std::string> lines;
    while (!t.finished())
      for (const auto& r : t.run_epoch()) lines.push_back(metrics_line(r));
    return lines;
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  EXPECT_EQ(a.size(), 16u);
}

TEST(Trainer, MetricsLineHasEveryField) {
  Trainer t(tiny_config(), tiny_images());
  auto j = nlohmann::json::parse(metrics_line(t.train_step(tiny_images(8))));
  for (const char* key : {"step", "epoch", "k_effective", "lr", "d_mg", "l_sp", "l_kl", "l_var",
                          "l_cov", "total", "degenerate_terms"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  const auto& c = t.coefficients();
  EXPECT_NEAR(j["total"].get<double>(),
              c.lambda * j["d_mg"].get<double>() + c.lambda1 * j["l_sp"].get<double>() +
                  c.lambda2 * j["l_kl"].get<double>() + c.alpha * j["l_var"].get<double>() +
                  c.beta * j["l_cov"].get<double>(),
              1e-9);
}

TEST(Trainer, CheckpointRoundTripPreservesNextStep) {
  for (DType dt : {DType::f64, DType::f32}) {
    auto dir = temp_dir("roundtrip");
    const auto images = tiny_images();
    Trainer a(tiny_config(dt), images);
    a.run_epoch();
    a.train_step(tiny_images(8));
    save_checkpoint(a.checkpoint(), dir / "mid.ckpt");
    Trainer b(load_checkpoint(dir / "mid.ckpt"), images);
    EXPECT_EQ(b.epoch(), a.epoch());
    EXPECT_EQ(b.step(), a.step());
    EXPECT_EQ(snapshot(b.model()), snapshot(a.model()));
    const auto batch = tiny_images(8);
    EXPECT_EQ(metrics_line(a.train_step(batch)), metrics_line(b.train_step(batch)));
    EXPECT_EQ(snapshot(b.model()), snapshot(a.model())) << dtype_name(dt);
  }
}

TEST(Trainer, CorruptCheckpointIsRejected) {
  auto dir = temp_dir("corrupt");
  Trainer a(tiny_config(), tiny_images());
  save_checkpoint(a.checkpoint(), dir / "a.ckpt");
  const auto size = fs::file_size(dir / "a.ckpt");
  fs::resize_file(dir / "a.ckpt", size - 7);
  EXPECT_THROW(load_checkpoint(dir / "a.ckpt"), CheckpointError);
  std::ofstream(dir / "b.ckpt") << "garbage";
  EXPECT_THROW(load_checkpoint(dir / "b.ckpt"), CheckpointError);
}

TEST(Trainer, NonFiniteLossAbortsWithBreakdown) {
  auto cfg = tiny_config();
  cfg.coefficients.lambda = std::numeric_limits<double>::infinity();
  Trainer t(cfg, tiny_images());
  try {
    t.train_step(tiny_images(8));
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("d_mg"), std::string::npos);
  }
}

TEST(Trainer, LeaveOneOutShrinksTheBank) {
  auto cfg = tiny_config();
  auto reduced = without_augmentation(cfg, AugOp::GaussianBlur);
  EXPECT_EQ(reduced.k_max(), 4u);
  EXPECT_EQ(reduced.model_config().num_masks, 4u);
  EXPECT_DOUBLE_EQ(reduced.loss_coefficients().lambda, 25.0 * 16 / 4);
  EXPECT_THROW(without_augmentation(cfg, AugOp::SobelFilter), ContractError);
  auto single = cfg;
  single.augmentations = {AugOp::RandomFlip};
  EXPECT_THROW(without_augmentation(single, AugOp::RandomFlip), ContractError);
  Trainer t(reduced, tiny_images());
  EXPECT_EQ(t.model().bank.count(), 4u);
}

TEST(Trainer, BaselineModeHasNoMasks) {
  auto cfg = tiny_config();
  cfg.baseline = true;
  Trainer t(cfg, tiny_images());
  EXPECT_EQ(t.model().bank.count(), 0u);
  auto rec = t.train_step(tiny_images(8));
  EXPECT_EQ(rec.loss.l_sp, 0.0);
  EXPECT_EQ(rec.loss.l_kl, 0.0);
  EXPECT_NEAR(rec.loss.total, 25.0 / 16 * rec.loss.d_mg + 25 * rec.loss.l_var + rec.loss.l_cov, 1e-9);
}

TEST(Pretrain, WritesLogAndCheckpointsAndResumesIdentically) {
  auto dir = temp_dir("pretrain");
  write_dataset(generate({32, 16, Factor::hue}, 3), dir / "data.bin", DatasetFormat::packed);
  auto cfg = tiny_config();
  cfg.dataset = dir / "data.bin";
  cfg.ckpt_every = 2;
  cfg.out_dir = dir / "straight";
  auto straight = pretrain(cfg);
  EXPECT_TRUE(fs::exists(straight.checkpoint));
  EXPECT_TRUE(fs::exists(dir / "straight" / "epoch_002.ckpt"));
  const auto lines = read_lines(straight.metrics);
  ASSERT_EQ(lines.size(), 16u);
  EXPECT_EQ(nlohmann::json::parse(lines.back())["epoch"], 3);

  // Resume from the epoch-2 checkpoint into a fresh directory and compare the tail.
  auto resumed_cfg = cfg;
  resumed_cfg.out_dir = dir / "resumed";
  auto resumed = pretrain(resumed_cfg, dir / "straight" / "epoch_002.ckpt");
  const auto tail = read_lines(resumed.metrics);
  ASSERT_EQ(tail.size(), 8u);
  EXPECT_TRUE(std::equal(tail.begin(), tail.end(), lines.begin() + 8));
  auto a = load_checkpoint(straight.checkpoint), b = load_checkpoint(resumed.checkpoint);
  EXPECT_EQ(snapshot(a.model), snapshot(b.model));
}

TEST(Pretrain, MissingDatasetPropagatesError) {
  auto cfg = tiny_config();
  cfg.dataset = "/nonexistent/data.bin";
  cfg.out_dir = temp_dir("missing");
  EXPECT_THROW(pretrain(cfg), DataError);
}
