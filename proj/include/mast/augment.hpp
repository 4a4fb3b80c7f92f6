#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mast/image.hpp"
#include "mast/rng.hpp"

namespace mast {

enum class AugOp : std::uint8_t {
  ColorJitter,
  GaussianBlur,
  RandomFlip,
  RandomGrayscale,
  RandomResizedCrop,
  ShearX,
  ShearY,
  TranslateX,
  TranslateY,
  Rotate,
  Invert,
  Sharpness,
  GaussianNoise,
  SobelFilter,
  Cutout,
  Solarize,
  Equalize,
  Posterize,
  MotionBlur,
};

inline constexpr std::size_t kAugOpCount = 19;

std::string_view aug_name(AugOp op);
std::optional<AugOp> aug_from_name(std::string_view name);
std::array<AugOp, kAugOpCount> all_aug_ops();

struct MagnitudeRange {
  double low = 0.0;
  double high = 0.0;
  bool contains(double v) const { return v >= low && v <= high; }
};

/// One configured operator. `range` is what sampling draws from; `valid` is
/// the domain apply() accepts (wider, so analyses can probe extremes).
struct AugSpec {
  AugOp op = AugOp::ColorJitter;
  double probability = 0.5;
  MagnitudeRange range;
  MagnitudeRange valid;
  bool integral = false;    // magnitude is an integer count (bits, pixels)
  bool continuous = false;  // has a meaningful magnitude axis
  double identity = 0.0;    // magnitude at which the op is (near) identity
};

AugSpec default_spec(AugOp op);

/// Named operator sets: "mast5", "mast15", "mast19".
std::vector<AugOp> augmentation_set(std::string_view name);
std::vector<AugSpec> default_specs(std::span<const AugOp> ops);

struct AugParams {
  bool fired = true;
  double magnitude = 0.0;
  std::uint64_t seed = 0;  // drives op-internal randomness (direction, position, noise)

  bool operator==(const AugParams&) const = default;
};

/// Deterministic given (spec, params, img). Output has the input's extents and
/// values clamped to [0,1]. A non-fired op returns the input unchanged.
Image apply(const AugSpec& spec, const AugParams& params, const Image& img);
inline Image apply(AugOp op, const AugParams& params, const Image& img) {
  return apply(default_spec(op), params, img);
}

/// Selected operators are indices into the allowed list (and therefore mask
/// columns), kept in ascending canonical order.
struct CompositionPlan {
  std::vector<std::size_t> selected;
  std::array<std::vector<AugParams>, 2> views;  // one entry per selected op

  bool operator==(const CompositionPlan&) const = default;
};

CompositionPlan sample_composition(Rng& rng, std::span<const AugSpec> allowed,
                                   std::size_t k_effective);

/// Fresh per-view parameter draws for an already selected operator subset.
CompositionPlan draw_parameters(Rng& rng, std::span<const AugSpec> allowed,
                                std::vector<std::size_t> selected);

std::pair<Image, Image> make_views(const Image& img, const CompositionPlan& plan,
                                   std::span<const AugSpec> allowed);

/// Exact quarter-turn rotation of a square image (k * 90 degrees, counter-clockwise).
Image rotate_quarter(const Image& img, int k);

}  // namespace mast
