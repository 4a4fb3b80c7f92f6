#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mast/errors.hpp"
#include "mast/image.hpp"

namespace mast {

/// I/O or format failure; the message names the offending record when there is one.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Factor : std::uint8_t { shape = 0, hue = 1, scale = 2, position = 3 };
inline constexpr std::size_t kFactorCount = 4;

std::size_t factor_cardinality(Factor f);
std::string_view factor_name(Factor f);
std::optional<Factor> factor_from_name(std::string_view name);

enum class ShapeKind : std::uint8_t { circle, square, triangle, cross };

struct SyntheticSpec {
  std::size_t n_samples = 2000;
  std::size_t side = 32;
  Factor label_factor = Factor::hue;
};

struct Sample {
  Image image;
  std::uint16_t label = 0;
  std::array<std::uint8_t, kFactorCount> factors{};
};

struct Dataset {
  std::size_t side = 0;
  std::uint64_t seed = 0;
  Factor label_factor = Factor::hue;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  std::size_t num_classes() const;
  std::vector<Image> images() const;
  std::vector<std::size_t> labels() const;
};

enum class DatasetFormat { packed, ppm_dir };

struct DatasetManifest {
  static constexpr std::uint32_t kVersion = 1;

  DatasetFormat format = DatasetFormat::packed;
  std::uint32_t version = kVersion;
  std::filesystem::path location;  // packed blob or directory
  std::vector<std::string> files;  // ppm_dir only
  std::vector<std::uint16_t> labels;
  std::vector<std::array<std::uint8_t, kFactorCount>> factors;
  std::uint64_t seed = 0;
  std::size_t side = 0;
  Factor label_factor = Factor::hue;

  std::size_t count() const { return labels.size(); }
};

/// Renders one factor combination. `jitter_seed` drives sub-quadrant placement
/// jitter and background texture.
Image render_sample(ShapeKind shape, std::size_t hue_bin, std::size_t scale_bin,
                    std::size_t quadrant, std::size_t side, std::uint64_t jitter_seed);

Dataset generate(const SyntheticSpec& spec, std::uint64_t seed);

/// Writes the dataset and returns its manifest. Packed datasets also get a
/// JSON sidecar at `<path>.json`; PPM datasets get `<dir>/manifest.json`.
DatasetManifest write_dataset(const Dataset& ds, const std::filesystem::path& path,
                              DatasetFormat format);

DatasetManifest read_manifest(const std::filesystem::path& path);

/// Streaming reader over either format. Records are decoded on demand.
class DatasetReader {
 public:
  explicit DatasetReader(const std::filesystem::path& path,
                         std::optional<std::uint64_t> shuffle_seed = std::nullopt);

  std::size_t size() const { return order_.size(); }
  std::size_t side() const { return manifest_.side; }
  const DatasetManifest& manifest() const { return manifest_; }

  std::optional<Sample> next();
  void rewind(std::optional<std::uint64_t> shuffle_seed = std::nullopt);

 private:
  Sample read_record(std::size_t index);

  DatasetManifest manifest_;
  std::ifstream blob_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

Dataset load(const std::filesystem::path& path,
             std::optional<std::uint64_t> shuffle_seed = std::nullopt);

/// Deterministic split: every `holdout_every`-th sample goes to the second set.
std::pair<Dataset, Dataset> split(const Dataset& ds, std::size_t holdout_every = 5);

void write_ppm(const Image& img, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

}  // namespace mast
