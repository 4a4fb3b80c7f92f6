#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mast/augment.hpp"
#include "mast/checkpoint.hpp"
#include "mast/config.hpp"
#include "mast/loss.hpp"
#include "mast/model.hpp"

namespace mast {

/// Raised when a step produces a non-finite loss; the message carries the
/// offending breakdown.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Number of simultaneously applied operators at `epoch`. The first
/// floor(E/2) epochs use one; afterwards the count grows linearly and reaches
/// k_max at the final epoch.
std::size_t k_effective(std::size_t epoch, std::size_t total_epochs, std::size_t k_max);

/// Cosine-annealed learning rate, optionally with linear warmup over the
/// first 2% of steps.
double lr_at(std::size_t step, std::size_t total_steps, double base_lr, bool warmup = false);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t k_effective = 0;
  double lr = 0.0;
  std::vector<std::size_t> active;
  LossBreakdown loss;
};

/// One newline-free JSON object for the metrics log.
std::string metrics_line(const StepRecord& r);

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, std::vector<Image> images);
  /// Resumes from a checkpoint's weights, momentum and counters.
  Trainer(Checkpoint ckpt, std::vector<Image> images);

  /// One optimizer step on a batch: samples a composition plan, builds both
  /// views, evaluates the loss and updates the parameters.
  StepRecord train_step(const std::vector<Image>& batch);

  /// Remaining steps of the current epoch in its seeded shuffle order.
  std::vector<StepRecord> run_epoch(const std::function<void(const StepRecord&)>& on_step = {});
  bool finished() const { return epoch_ >= cfg_.schedule.epochs; }

  Checkpoint checkpoint() const;

  const TrainConfig& config() const { return cfg_; }
  const LossCoefficients& coefficients() const { return coeffs_; }
  Model& model() { return model_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t step() const { return step_; }
  std::size_t batch_size() const;
  std::size_t steps_per_epoch() const;
  std::size_t total_steps() const { return steps_per_epoch() * cfg_.schedule.epochs; }

 private:
  void update(double lr);

  TrainConfig cfg_;
  std::vector<AugSpec> specs_;
  LossCoefficients coeffs_;
  Model model_;
  std::vector<Tensor> momentum_;
  std::vector<Image> images_;
  std::size_t epoch_ = 0;
  std::size_t step_ = 0;
  std::size_t threads_ = 1;
};

struct PretrainOutputs {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
};

/// Trains for the configured epochs, writing `metrics.ndjson`, periodic
/// `epoch_NNN.ckpt` files and `final.ckpt` under cfg.out_dir. With `resume`
/// the run continues from that checkpoint and appends to the log.
PretrainOutputs pretrain(const TrainConfig& cfg,
                         const std::optional<std::filesystem::path>& resume = std::nullopt,
                         const std::function<void(const StepRecord&)>& on_step = {});

/// Config with `op` (and therefore its mask column) removed.
TrainConfig without_augmentation(const TrainConfig& cfg, AugOp op);

/// pretrain() on without_augmentation(cfg, op), under cfg.out_dir/loo_<op>.
PretrainOutputs leave_one_out(const TrainConfig& cfg, AugOp op);

}  // namespace mast
