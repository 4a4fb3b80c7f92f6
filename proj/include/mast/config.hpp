#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mast/augment.hpp"
#include "mast/loss.hpp"
#include "mast/model.hpp"
#include "mast/tensor.hpp"

namespace mast {

/// Invalid or unknown configuration field; the message names the field.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Schedule {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double base_lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-6;
  bool warmup = false;  // linear warmup over the first 2% of steps
  double grad_clip = 1.0;       // gradient-norm bound over all weights but U, 0 disables
  double mask_lr_scale = 1e-3;  // learning-rate multiplier for U
};

struct CoefficientOverrides {
  std::optional<double> lambda;
  std::optional<double> lambda1;
  std::optional<double> lambda2;
  std::optional<double> alpha;
  std::optional<double> beta;
  double scale = 1.0;  // multiplies lambda, lambda1, lambda2
};

struct TrainConfig {
  std::filesystem::path dataset;
  std::filesystem::path out_dir = "runs/default";
  std::size_t embed_dim = 128;
  std::size_t hidden = 256;
  std::vector<std::size_t> channels{16, 32, 64};
  std::string augmentation_name = "mast5";  // set name, or "custom" when ops were listed
  std::vector<AugOp> augmentations = mast::augmentation_set("mast5");
  Schedule schedule;
  CoefficientOverrides coefficients;
  std::uint64_t seed = 0;
  DType dtype = DType::f32;
  std::size_t ckpt_every = 0;  // 0: only the final checkpoint
  bool baseline = false;       // masks disabled, plain invariance loss
  std::size_t threads = 0;     // view-generation workers; 0 = automatic

  std::size_t k_max() const { return augmentations.size(); }
  ModelConfig model_config() const;
  LossCoefficients loss_coefficients() const;
  std::vector<AugSpec> augmentation_specs() const { return default_specs(augmentations); }
  /// Throws ConfigError on inconsistent values.
  void validate() const;
};

nlohmann::json config_to_json(const TrainConfig& cfg);
/// Starts from `base` and applies every key in `j`. Unknown keys and wrong
/// types raise ConfigError naming the key.
TrainConfig config_from_json(const nlohmann::json& j, const TrainConfig& base = TrainConfig{});
TrainConfig load_config(const std::filesystem::path& path);

/// Stable FNV-1a hash of the canonical JSON form, as 16 hex digits.
std::string config_hash(const TrainConfig& cfg);

/// Worker count after applying the MAST_THREADS cap.
std::size_t effective_threads(std::size_t requested);

}  // namespace mast
