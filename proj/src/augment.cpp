#include "mast/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "mast/tensor.hpp"

namespace mast {

namespace {

constexpr std::array<std::string_view, kAugOpCount> kNames = {
    "ColorJitter", "GaussianBlur", "RandomFlip",   "RandomGrayscale", "RandomResizedCrop",
    "ShearX",      "ShearY",       "TranslateX",   "TranslateY",      "Rotate",
    "Invert",      "Sharpness",    "GaussianNoise", "SobelFilter",    "Cutout",
    "Solarize",    "Equalize",     "Posterize",    "MotionBlur"};

float luminance(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

// Bilinear sample with edge-replicate padding.
float sample(const float* plane, std::size_t h, std::size_t w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, h - 1);
  const std::size_t x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  const double top = plane[y0 * w + x0] * (1 - fx) + plane[y0 * w + x1] * fx;
  const double bot = plane[y1 * w + x0] * (1 - fx) + plane[y1 * w + x1] * fx;
  return static_cast<float>(top * (1 - fy) + bot * fy);
}

// Inverse-mapped warp: map(y, x) gives the source coordinate of output pixel (y, x).
template <class Map>
Image warp(const Image& img, Map map) {
  Image out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const auto [sy, sx] = map(static_cast<double>(y), static_cast<double>(x));
      for (std::size_t c = 0; c < Image::kChannels; ++c) {
        out.at(c, y, x) = sample(img.channel(c), img.height, img.width, sy, sx);
      }
    }
  return out;
}

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b});
  const float mn = std::min({r, g, b});
  const float d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0.0f;
  if (d <= 0) {
    h = 0;
    return;
  }
  if (mx == r) {
    h = (g - b) / d;
  } else if (mx == g) {
    h = 2.0f + (b - r) / d;
  } else {
    h = 4.0f + (r - g) / d;
  }
  h /= 6.0f;
  if (h < 0) h += 1.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  h = h - std::floor(h);
  const float hh = h * 6.0f;
  const int i = static_cast<int>(std::floor(hh)) % 6;
  const float f = hh - std::floor(hh);
  const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

Image color_jitter(const Image& img, double strength, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double brightness = 1.0 + 0.4 * strength * u(rng);
  const double contrast = 1.0 + 0.4 * strength * u(rng);
  const double saturation = 1.0 + 0.4 * strength * u(rng);
  const double hue = 0.1 * strength * u(rng);

  Image out = img;
  const std::size_t n = img.plane();
  float* r = out.channel(0);
  float* g = out.channel(1);
  float* b = out.channel(2);
  for (std::size_t i = 0; i < 3 * n; ++i) {
    out.pixels[i] = std::clamp(static_cast<float>(out.pixels[i] * brightness), 0.0f, 1.0f);
  }
  double gray_mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) gray_mean += luminance(r[i], g[i], b[i]);
  gray_mean /= static_cast<double>(n);
  for (std::size_t i = 0; i < 3 * n; ++i) {
    out.pixels[i] = std::clamp(
        static_cast<float>((out.pixels[i] - gray_mean) * contrast + gray_mean), 0.0f, 1.0f);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const float l = luminance(r[i], g[i], b[i]);
    r[i] = std::clamp(static_cast<float>((r[i] - l) * saturation + l), 0.0f, 1.0f);
    g[i] = std::clamp(static_cast<float>((g[i] - l) * saturation + l), 0.0f, 1.0f);
    b[i] = std::clamp(static_cast<float>((b[i] - l) * saturation + l), 0.0f, 1.0f);
  }
  if (hue != 0.0) {
    for (std::size_t i = 0; i < n; ++i) {
      float h, s, v;
      rgb_to_hsv(r[i], g[i], b[i], h, s, v);
      hsv_to_rgb(h + static_cast<float>(hue), s, v, r[i], g[i], b[i]);
    }
  }
  return out;
}

// Convolves each channel with a separable kernel, edge-replicate padding.
Image separable_filter(const Image& img, const std::vector<double>& k) {
  const int radius = static_cast<int>(k.size() / 2);
  const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  Image tmp(img.height, img.width), out(img.height, img.width);
  for (std::size_t c = 0; c < Image::kChannels; ++c) {
    const float* src = img.channel(c);
    float* mid = tmp.channel(c);
    float* dst = out.channel(c);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t) {
          acc += k[t + radius] * src[y * w + std::clamp(x + t, 0, w - 1)];
        }
        mid[y * w + x] = static_cast<float>(acc);
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t) {
          acc += k[t + radius] * mid[std::clamp(y + t, 0, h - 1) * w + x];
        }
        dst[y * w + x] = static_cast<float>(acc);
      }
  }
  return out;
}

Image gaussian_blur(const Image& img, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int t = -radius; t <= radius; ++t) {
    k[t + radius] = std::exp(-0.5 * t * t / (sigma * sigma));
    total += k[t + radius];
  }
  for (double& v : k) v /= total;
  return separable_filter(img, k);
}

Image flip(const Image& img) {
  Image out(img.height, img.width);
  for (std::size_t c = 0; c < Image::kChannels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x)
        out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

Image grayscale(const Image& img) {
  Image out(img.height, img.width);
  for (std::size_t i = 0; i < img.plane(); ++i) {
    const float l = luminance(img.channel(0)[i], img.channel(1)[i], img.channel(2)[i]);
    for (std::size_t c = 0; c < Image::kChannels; ++c) out.channel(c)[i] = l;
  }
  return out;
}

Image resized_crop(const Image& img, double area, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  // Aspect jitter shrinks to 1 as the crop approaches the full image.
  const double spread = std::clamp((1.0 - area) / 0.8, 0.0, 1.0);
  const double aspect = std::exp(u(rng) * std::log(4.0 / 3.0) * spread);
  const double fw = static_cast<double>(img.width), fh = static_cast<double>(img.height);
  const double cw = std::min(fw, std::sqrt(area * aspect) * fw);
  const double ch = std::min(fh, std::sqrt(area / aspect) * fh);
  const double x0 = uniform01(rng) * (fw - cw);
  const double y0 = uniform01(rng) * (fh - ch);
  return warp(img, [&](double y, double x) {
    return std::pair{y0 + (y + 0.5) * ch / fh - 0.5, x0 + (x + 0.5) * cw / fw - 0.5};
  });
}

Image sharpness(const Image& img, double factor) {
  // Blend toward a 3x3 smoothing of the interior; the border is kept.
  Image smooth = img;
  const std::size_t h = img.height, w = img.width;
  for (std::size_t c = 0; c < Image::kChannels; ++c)
    for (std::size_t y = 1; y + 1 < h; ++y)
      for (std::size_t x = 1; x + 1 < w; ++x) {
        double acc = 4.0 * img.at(c, y, x);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) acc += img.at(c, y + dy, x + dx);
        smooth.at(c, y, x) = static_cast<float>(acc / 13.0);
      }
  Image out(h, w);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] =
        static_cast<float>(smooth.pixels[i] + factor * (img.pixels[i] - smooth.pixels[i]));
  }
  return out;
}

Image gaussian_noise(const Image& img, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  Image out = img;
  for (float& v : out.pixels) v = static_cast<float>(v + n(rng));
  return out;
}

Image sobel(const Image& img) {
  const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  std::vector<float> gray(img.plane());
  for (std::size_t i = 0; i < img.plane(); ++i) {
    gray[i] = luminance(img.channel(0)[i], img.channel(1)[i], img.channel(2)[i]);
  }
  auto g = [&](int y, int x) { return gray[std::clamp(y, 0, h - 1) * w + std::clamp(x, 0, w - 1)]; };
  Image out(img.height, img.width);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gx = (g(y - 1, x + 1) + 2 * g(y, x + 1) + g(y + 1, x + 1)) -
                        (g(y - 1, x - 1) + 2 * g(y, x - 1) + g(y + 1, x - 1));
      const double gy = (g(y + 1, x - 1) + 2 * g(y + 1, x) + g(y + 1, x + 1)) -
                        (g(y - 1, x - 1) + 2 * g(y - 1, x) + g(y - 1, x + 1));
      const auto mag = static_cast<float>(std::sqrt(gx * gx + gy * gy) / 4.0);
      for (std::size_t c = 0; c < Image::kChannels; ++c) out.at(c, y, x) = mag;
    }
  return out;
}

Image cutout(const Image& img, double fraction, std::uint64_t seed) {
  Rng rng(seed);
  const auto side = static_cast<long>(
      std::lround(fraction * static_cast<double>(std::min(img.height, img.width))));
  const auto cy = static_cast<long>(uniform01(rng) * static_cast<double>(img.height));
  const auto cx = static_cast<long>(uniform01(rng) * static_cast<double>(img.width));
  Image out = img;
  const long y0 = std::max(0L, cy - side / 2), y1 = std::min<long>(img.height, cy - side / 2 + side);
  const long x0 = std::max(0L, cx - side / 2), x1 = std::min<long>(img.width, cx - side / 2 + side);
  for (std::size_t c = 0; c < Image::kChannels; ++c)
    for (long y = y0; y < y1; ++y)
      for (long x = x0; x < x1; ++x) out.at(c, y, x) = 0.0f;
  return out;
}

Image solarize(const Image& img, double threshold) {
  Image out = img;
  for (float& v : out.pixels) {
    if (v >= threshold) v = 1.0f - v;
  }
  return out;
}

int to_byte(float v) { return static_cast<int>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

Image equalize(const Image& img) {
  Image out = img;
  const std::size_t n = img.plane();
  for (std::size_t c = 0; c < Image::kChannels; ++c) {
    std::array<std::size_t, 256> hist{};
    const float* src = img.channel(c);
    for (std::size_t i = 0; i < n; ++i) ++hist[to_byte(src[i])];
    // Histogram equalization over the occupied range; a flat channel is kept.
    std::size_t cdf_min = 0;
    for (std::size_t count : hist) {
      if (count) {
        cdf_min = count;
        break;
      }
    }
    if (cdf_min == n) continue;
    std::array<float, 256> lut{};
    std::size_t cdf = 0;
    for (std::size_t v = 0; v < 256; ++v) {
      cdf += hist[v];
      lut[v] = cdf <= cdf_min ? 0.0f
                              : static_cast<float>(static_cast<double>(cdf - cdf_min) /
                                                   static_cast<double>(n - cdf_min));
    }
    float* dst = out.channel(c);
    for (std::size_t i = 0; i < n; ++i) dst[i] = lut[to_byte(src[i])];
  }
  return out;
}

Image posterize(const Image& img, int bits) {
  const int mask = ~((1 << (8 - bits)) - 1) & 0xff;
  Image out = img;
  for (float& v : out.pixels) v = static_cast<float>(to_byte(v) & mask) / 255.0f;
  return out;
}

Image motion_blur(const Image& img, int length, std::uint64_t seed) {
  Rng rng(seed);
  const double angle = uniform01(rng) * std::numbers::pi;
  const double dy = std::sin(angle), dx = std::cos(angle);
  Image out(img.height, img.width);
  for (std::size_t c = 0; c < Image::kChannels; ++c) {
    const float* src = img.channel(c);
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (int t = 0; t < length; ++t) {
          const double off = t - (length - 1) / 2.0;
          acc += sample(src, img.height, img.width, y + off * dy, x + off * dx);
        }
        out.at(c, y, x) = static_cast<float>(acc / length);
      }
  }
  return out;
}

AugSpec make_spec(AugOp op, double p, MagnitudeRange range, MagnitudeRange valid, bool continuous,
                  double identity, bool integral = false) {
  AugSpec s;
  s.op = op;
  s.probability = p;
  s.range = range;
  s.valid = valid;
  s.continuous = continuous;
  s.identity = identity;
  s.integral = integral;
  return s;
}

}  // namespace

std::string_view aug_name(AugOp op) { return kNames.at(static_cast<std::size_t>(op)); }

std::optional<AugOp> aug_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kNames.size(); ++i) {
    if (kNames[i] == name) return static_cast<AugOp>(i);
  }
  return std::nullopt;
}

std::array<AugOp, kAugOpCount> all_aug_ops() {
  std::array<AugOp, kAugOpCount> ops{};
  for (std::size_t i = 0; i < kAugOpCount; ++i) ops[i] = static_cast<AugOp>(i);
  return ops;
}

AugSpec default_spec(AugOp op) {
  using enum AugOp;
  switch (op) {
    case ColorJitter: return make_spec(op, 0.8, {0.0, 1.0}, {0.0, 2.5}, true, 0.0);
    case GaussianBlur: return make_spec(op, 0.5, {0.1, 2.0}, {1e-9, 5.0}, true, 1e-6);
    case RandomFlip: return make_spec(op, 0.5, {0.0, 0.0}, {0.0, 1.0}, false, 0.0);
    case RandomGrayscale: return make_spec(op, 0.2, {0.0, 0.0}, {0.0, 1.0}, false, 0.0);
    case RandomResizedCrop: return make_spec(op, 1.0, {0.2, 1.0}, {0.01, 1.0}, true, 1.0);
    case ShearX:
    case ShearY: return make_spec(op, 0.5, {-0.3, 0.3}, {-1.0, 1.0}, true, 0.0);
    case TranslateX:
    case TranslateY: return make_spec(op, 0.5, {-0.25, 0.25}, {-1.0, 1.0}, true, 0.0);
    case Rotate: return make_spec(op, 0.5, {-30.0, 30.0}, {-180.0, 180.0}, true, 0.0);
    case Invert: return make_spec(op, 0.5, {0.0, 0.0}, {0.0, 1.0}, false, 0.0);
    case Sharpness: return make_spec(op, 0.5, {0.5, 2.0}, {0.0, 5.0}, true, 1.0);
    case GaussianNoise: return make_spec(op, 0.5, {0.01, 0.1}, {0.0, 1.0}, true, 0.0);
    case SobelFilter: return make_spec(op, 0.5, {0.0, 0.0}, {0.0, 1.0}, false, 0.0);
    case Cutout: return make_spec(op, 0.5, {0.1, 0.3}, {0.0, 1.0}, true, 0.0);
    case Solarize: return make_spec(op, 0.5, {0.4, 0.9}, {0.0, 1.0}, true, 1.0);
    case Equalize: return make_spec(op, 0.5, {0.0, 0.0}, {0.0, 1.0}, false, 0.0);
    case Posterize: return make_spec(op, 0.5, {3.0, 6.0}, {1.0, 8.0}, false, 8.0, true);
    case MotionBlur: return make_spec(op, 0.5, {3.0, 7.0}, {1.0, 15.0}, true, 1.0, true);
  }
  throw ContractError("default_spec: unknown operator");
}

std::vector<AugOp> augmentation_set(std::string_view name) {
  using enum AugOp;
  std::vector<AugOp> ops{ColorJitter, GaussianBlur, RandomFlip, RandomGrayscale,
                         RandomResizedCrop};
  if (name == "mast5") return ops;
  ops.insert(ops.end(), {ShearX, ShearY, TranslateX, TranslateY, Rotate, Invert, Sharpness,
                         GaussianNoise, SobelFilter, Cutout});
  if (name == "mast15") return ops;
  ops.insert(ops.end(), {Solarize, Equalize, Posterize, MotionBlur});
  if (name == "mast19") return ops;
  throw ContractError("unknown augmentation set '" + std::string(name) +
                      "' (expected mast5, mast15 or mast19)");
}

std::vector<AugSpec> default_specs(std::span<const AugOp> ops) {
  std::vector<AugSpec> specs;
  specs.reserve(ops.size());
  for (AugOp op : ops) specs.push_back(default_spec(op));
  return specs;
}

Image apply(const AugSpec& spec, const AugParams& params, const Image& img) {
  if (img.pixels.size() != Image::kChannels * img.plane()) {
    throw DimensionError("apply: image buffer does not match its extents");
  }
  if (!params.fired) return img;
  const double m = params.magnitude;
  if (!spec.valid.contains(m) || !std::isfinite(m)) {
    throw DomainError(std::string("apply: magnitude ") + std::to_string(m) + " outside [" +
                      std::to_string(spec.valid.low) + ", " + std::to_string(spec.valid.high) +
                      "] for " + std::string(aug_name(spec.op)));
  }
  const double cy = (static_cast<double>(img.height) - 1) / 2.0;
  const double cx = (static_cast<double>(img.width) - 1) / 2.0;
  const double fw = static_cast<double>(img.width), fh = static_cast<double>(img.height);

  Image out;
  using enum AugOp;
  switch (spec.op) {
    case ColorJitter: out = color_jitter(img, m, params.seed); break;
    case GaussianBlur: out = gaussian_blur(img, m); break;
    case RandomFlip: out = flip(img); break;
    case RandomGrayscale: out = grayscale(img); break;
    case RandomResizedCrop: out = resized_crop(img, m, params.seed); break;
    case ShearX:
      out = warp(img, [&](double y, double x) { return std::pair{y, x + m * (y - cy)}; });
      break;
    case ShearY:
      out = warp(img, [&](double y, double x) { return std::pair{y + m * (x - cx), x}; });
      break;
    case TranslateX:
      out = warp(img, [&](double y, double x) { return std::pair{y, x - m * fw}; });
      break;
    case TranslateY:
      out = warp(img, [&](double y, double x) { return std::pair{y - m * fh, x}; });
      break;
    case Rotate: {
      const double a = m * std::numbers::pi / 180.0;
      const double ca = std::cos(a), sa = std::sin(a);
      out = warp(img, [&](double y, double x) {
        const double ry = y - cy, rx = x - cx;
        return std::pair{cy + ca * ry - sa * rx, cx + sa * ry + ca * rx};
      });
      break;
    }
    case Invert:
      out = img;
      for (float& v : out.pixels) v = 1.0f - v;
      break;
    case Sharpness: out = sharpness(img, m); break;
    case GaussianNoise: out = gaussian_noise(img, m, params.seed); break;
    case SobelFilter: out = sobel(img); break;
    case Cutout: out = cutout(img, m, params.seed); break;
    case Solarize: out = solarize(img, m); break;
    case Equalize: out = equalize(img); break;
    case Posterize: out = posterize(img, static_cast<int>(std::lround(m))); break;
    case MotionBlur: out = motion_blur(img, static_cast<int>(std::lround(m)), params.seed); break;
  }
  out.clamp01();
  return out;
}

CompositionPlan draw_parameters(Rng& rng, std::span<const AugSpec> allowed,
                                std::vector<std::size_t> selected) {
  CompositionPlan plan;
  plan.selected = std::move(selected);
  for (auto& view : plan.views) {
    view.reserve(plan.selected.size());
    for (std::size_t idx : plan.selected) {
      const AugSpec& spec = allowed[idx];
      AugParams p;
      p.fired = uniform01(rng) < spec.probability;
      const double u = uniform01(rng);
      if (spec.integral) {
        const double span = std::floor(spec.range.high - spec.range.low + 1.0);
        p.magnitude = spec.range.low + std::min(std::floor(u * span), span - 1.0);
      } else {
        p.magnitude = spec.range.low + u * (spec.range.high - spec.range.low);
      }
      p.seed = rng();
      view.push_back(p);
    }
  }
  return plan;
}

CompositionPlan sample_composition(Rng& rng, std::span<const AugSpec> allowed,
                                   std::size_t k_effective) {
  if (k_effective < 1 || k_effective > allowed.size()) {
    throw ContractError("sample_composition: k_effective " + std::to_string(k_effective) +
                        " outside [1, " + std::to_string(allowed.size()) + "]");
  }
  std::vector<std::size_t> pool(allowed.size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < k_effective; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k_effective);
  std::sort(pool.begin(), pool.end());
  return draw_parameters(rng, allowed, std::move(pool));
}

std::pair<Image, Image> make_views(const Image& img, const CompositionPlan& plan,
                                   std::span<const AugSpec> allowed) {
  for (const auto& view : plan.views) {
    if (view.size() != plan.selected.size()) {
      throw ContractError("make_views: plan parameters do not match selected operators");
    }
  }
  std::array<Image, 2> out{img, img};
  for (std::size_t v = 0; v < 2; ++v) {
    for (std::size_t i = 0; i < plan.selected.size(); ++i) {
      out[v] = apply(allowed[plan.selected[i]], plan.views[v][i], out[v]);
    }
  }
  return {std::move(out[0]), std::move(out[1])};
}

Image rotate_quarter(const Image& img, int k) {
  if (img.height != img.width) throw DimensionError("rotate_quarter: image must be square");
  k = ((k % 4) + 4) % 4;
  const std::size_t n = img.width;
  Image out(n, n);
  for (std::size_t c = 0; c < Image::kChannels; ++c)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        std::size_t sy = y, sx = x;
        switch (k) {
          case 1: sy = x, sx = n - 1 - y; break;
          case 2: sy = n - 1 - y, sx = n - 1 - x; break;
          case 3: sy = n - 1 - x, sx = y; break;
          default: break;
        }
        out.at(c, y, x) = img.at(c, sy, sx);
      }
  return out;
}

}  // namespace mast
