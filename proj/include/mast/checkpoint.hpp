#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "mast/config.hpp"
#include "mast/model.hpp"

namespace mast {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything needed to resume training or run an analysis. Arrays are stored
/// at the run's float width, so a round trip is exact.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  TrainConfig config;
  Model model;
  std::vector<Tensor> momentum;  // parallel to model.parameters(); empty for fresh models
  std::size_t epoch = 0;         // completed epochs
  std::size_t step = 0;          // completed optimizer steps
};

/// Layout: "MASTCKPT", u32 version, u32 metadata length, metadata JSON,
/// u32 array count, then per array: u16 name length, name, u8 dtype,
/// u8 rank, u64 extents, raw little-endian values. Written atomically.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mast
