#include "mast/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "mast/rng.hpp"

namespace mast {

namespace {

constexpr char kMagic[7] = {'M', 'A', 'S', 'T', 'D', 'S', '1'};
constexpr std::size_t kHeaderBytes = sizeof(kMagic) + 8;
constexpr std::array<std::string_view, kFactorCount> kFactorNames = {"shape", "hue", "scale",
                                                                     "position"};

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

unsigned char quantize(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

std::size_t record_bytes(std::size_t side) { return 3 * side * side + 2 + kFactorCount; }

void encode_pixels(const Image& img, unsigned char* out) {
  for (std::size_t i = 0; i < img.plane(); ++i)
    for (std::size_t c = 0; c < Image::kChannels; ++c) out[3 * i + c] = quantize(img.channel(c)[i]);
}

Image decode_pixels(const unsigned char* in, std::size_t side) {
  Image img(side, side);
  for (std::size_t i = 0; i < img.plane(); ++i)
    for (std::size_t c = 0; c < Image::kChannels; ++c)
      img.channel(c)[i] = static_cast<float>(in[3 * i + c]) / 255.0f;
  return img;
}

void validate_record(std::size_t index, std::uint16_t label,
                     const std::array<std::uint8_t, kFactorCount>& factors) {
  for (std::size_t f = 0; f < kFactorCount; ++f) {
    if (factors[f] >= factor_cardinality(static_cast<Factor>(f))) {
      throw DataError("record " + std::to_string(index) + ": " +
                      std::string(kFactorNames[f]) + " code " + std::to_string(factors[f]) +
                      " out of range");
    }
  }
  (void)label;
}

nlohmann::json manifest_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["format"] = m.format == DatasetFormat::packed ? "mastds1" : "mast-ppm";
  j["version"] = m.version;
  j["side"] = m.side;
  j["count"] = m.count();
  j["seed"] = m.seed;
  j["label_factor"] = std::string(factor_name(m.label_factor));
  if (m.format == DatasetFormat::packed) {
    j["blob"] = m.location.filename().string();
  } else {
    auto& records = j["records"] = nlohmann::json::array();
    for (std::size_t i = 0; i < m.count(); ++i) {
      records.push_back({{"file", m.files[i]},
                         {"label", m.labels[i]},
                         {"factors", std::vector<int>(m.factors[i].begin(), m.factors[i].end())}});
    }
  }
  return j;
}

bool inside_shape(ShapeKind shape, double dx, double dy, double r) {
  switch (shape) {
    case ShapeKind::circle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::square: return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case ShapeKind::triangle: {
      // Upward triangle with apex at -r and base at +0.7r.
      if (dy < -r || dy > 0.7 * r) return false;
      const double half_width = 0.95 * (dy + r) / 1.7;
      return std::abs(dx) <= half_width;
    }
    case ShapeKind::cross:
      return (std::abs(dx) <= r / 3 && std::abs(dy) <= r) ||
             (std::abs(dy) <= r / 3 && std::abs(dx) <= r);
  }
  return false;
}

}  // namespace

std::size_t factor_cardinality(Factor f) {
  switch (f) {
    case Factor::shape: return 4;
    case Factor::hue: return 8;
    case Factor::scale: return 3;
    case Factor::position: return 4;
  }
  return 0;
}

std::string_view factor_name(Factor f) { return kFactorNames.at(static_cast<std::size_t>(f)); }

std::optional<Factor> factor_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kFactorNames.size(); ++i) {
    if (kFactorNames[i] == name) return static_cast<Factor>(i);
  }
  return std::nullopt;
}

std::size_t Dataset::num_classes() const { return factor_cardinality(label_factor); }

std::vector<Image> Dataset::images() const {
  std::vector<Image> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.image);
  return out;
}

std::vector<std::size_t> Dataset::labels() const {
  std::vector<std::size_t> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

Image render_sample(ShapeKind shape, std::size_t hue_bin, std::size_t scale_bin,
                    std::size_t quadrant, std::size_t side, std::uint64_t jitter_seed) {
  Rng rng(jitter_seed);
  const double s = static_cast<double>(side);
  const double radius = s * (0.14 + 0.06 * static_cast<double>(scale_bin));
  std::uniform_real_distribution<double> jitter(-s / 16.0, s / 16.0);
  const double cx = s * (quadrant % 2 == 0 ? 0.25 : 0.75) + jitter(rng);
  const double cy = s * (quadrant / 2 == 0 ? 0.25 : 0.75) + jitter(rng);

  // Fully saturated hue at the bin center.
  const double h = (static_cast<double>(hue_bin) + 0.5) / 8.0 * 6.0;
  const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {1, x, 0}; break;
    case 1: rgb = {x, 1, 0}; break;
    case 2: rgb = {0, 1, x}; break;
    case 3: rgb = {0, x, 1}; break;
    case 4: rgb = {x, 0, 1}; break;
    default: rgb = {1, 0, x}; break;
  }
  for (double& c : rgb) c = 0.1 + 0.8 * c;

  std::normal_distribution<double> texture(0.0, 0.02);
  Image img(side, side);
  constexpr int kSuper = 4;
  for (std::size_t py = 0; py < side; ++py)
    for (std::size_t px = 0; px < side; ++px) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const double dx = static_cast<double>(px) + (sx + 0.5) / kSuper - cx;
          const double dy = static_cast<double>(py) + (sy + 0.5) / kSuper - cy;
          hits += inside_shape(shape, dx, dy, radius);
        }
      const double cover = static_cast<double>(hits) / (kSuper * kSuper);
      const double bg = 0.15 + texture(rng);
      for (std::size_t c = 0; c < Image::kChannels; ++c) {
        img.at(c, py, px) = static_cast<float>(cover * rgb[c] + (1.0 - cover) * bg);
      }
    }
  img.clamp01();
  return img;
}

Dataset generate(const SyntheticSpec& spec, std::uint64_t seed) {
  const std::size_t classes = factor_cardinality(spec.label_factor);
  if (spec.n_samples < classes) {
    throw ContractError("generate: n_samples " + std::to_string(spec.n_samples) +
                        " is smaller than the class count " + std::to_string(classes));
  }
  if (spec.side < 8) throw ContractError("generate: image side must be at least 8");
  Rng rng(split_seed(seed, {0x5eed}));

  std::vector<std::size_t> label_codes(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) label_codes[i] = i % classes;
  std::shuffle(label_codes.begin(), label_codes.end(), rng);

  Dataset ds;
  ds.side = spec.side;
  ds.seed = seed;
  ds.label_factor = spec.label_factor;
  ds.samples.reserve(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    Sample s;
    for (std::size_t f = 0; f < kFactorCount; ++f) {
      const auto factor = static_cast<Factor>(f);
      if (factor == spec.label_factor) {
        s.factors[f] = static_cast<std::uint8_t>(label_codes[i]);
      } else {
        std::uniform_int_distribution<int> pick(0, static_cast<int>(factor_cardinality(factor)) - 1);
        s.factors[f] = static_cast<std::uint8_t>(pick(rng));
      }
    }
    s.label = s.factors[static_cast<std::size_t>(spec.label_factor)];
    s.image = render_sample(static_cast<ShapeKind>(s.factors[0]), s.factors[1], s.factors[2],
                            s.factors[3], spec.side, rng());
    // Quantize so in-memory samples equal what a reader decodes.
    for (float& v : s.image.pixels) v = static_cast<float>(quantize(v)) / 255.0f;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void write_ppm(const Image& img, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> buf(3 * img.plane());
  encode_pixels(img, buf.data());
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw DataError("write failed for " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w == 0 || h == 0) {
    throw DataError(path.string() + ": not an 8-bit binary PPM");
  }
  is.get();
  std::vector<unsigned char> buf(3 * w * h);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (is.gcount() != static_cast<std::streamsize>(buf.size())) {
    throw DataError(path.string() + ": truncated pixel data");
  }
  Image img(h, w);
  for (std::size_t i = 0; i < img.plane(); ++i)
    for (std::size_t c = 0; c < Image::kChannels; ++c)
      img.channel(c)[i] = static_cast<float>(buf[3 * i + c]) / 255.0f;
  return img;
}

DatasetManifest write_dataset(const Dataset& ds, const std::filesystem::path& path,
                              DatasetFormat format) {
  DatasetManifest m;
  m.format = format;
  m.location = path;
  m.seed = ds.seed;
  m.side = ds.side;
  m.label_factor = ds.label_factor;
  for (const auto& s : ds.samples) {
    m.labels.push_back(s.label);
    m.factors.push_back(s.factors);
  }

  if (format == DatasetFormat::packed) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os.write(kMagic, sizeof(kMagic));
    put_u32(os, static_cast<std::uint32_t>(ds.size()));
    put_u32(os, static_cast<std::uint32_t>(ds.side));
    std::vector<unsigned char> rec(record_bytes(ds.side));
    for (const auto& s : ds.samples) {
      encode_pixels(s.image, rec.data());
      std::size_t off = 3 * ds.side * ds.side;
      rec[off] = static_cast<unsigned char>(s.label & 0xff);
      rec[off + 1] = static_cast<unsigned char>(s.label >> 8);
      std::copy(s.factors.begin(), s.factors.end(), rec.begin() + off + 2);
      os.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
    }
    if (!os) throw DataError("write failed for " + path.string());
    std::ofstream js(path.string() + ".json");
    js << manifest_json(m).dump(2) << '\n';
    if (!js) throw DataError("write failed for " + path.string() + ".json");
    return m;
  }

  std::filesystem::create_directories(path);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%06zu.ppm", i);
    m.files.emplace_back(name);
    write_ppm(ds.samples[i].image, path / name);
  }
  std::ofstream js(path / "manifest.json");
  js << manifest_json(m).dump(2) << '\n';
  if (!js) throw DataError("write failed for " + (path / "manifest.json").string());
  return m;
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  DatasetManifest m;
  m.location = path;
  if (std::filesystem::is_directory(path)) {
    m.format = DatasetFormat::ppm_dir;
    std::ifstream is(path / "manifest.json");
    if (!is) throw DataError("missing " + (path / "manifest.json").string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(is);
      if (j.at("format") != "mast-ppm") throw DataError("unsupported manifest format");
      m.version = j.at("version").get<std::uint32_t>();
      if (m.version != DatasetManifest::kVersion) {
        throw DataError("unsupported manifest version " + std::to_string(m.version));
      }
      m.side = j.at("side").get<std::size_t>();
      m.seed = j.value("seed", std::uint64_t{0});
      m.label_factor = factor_from_name(j.value("label_factor", std::string("hue"))).value_or(Factor::hue);
      const auto& records = j.at("records");
      for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        m.files.push_back(r.at("file").get<std::string>());
        m.labels.push_back(r.at("label").get<std::uint16_t>());
        auto f = r.at("factors").get<std::vector<int>>();
        if (f.size() != kFactorCount) {
          throw DataError("record " + std::to_string(i) + ": expected 4 factor codes");
        }
        std::array<std::uint8_t, kFactorCount> codes{};
        for (std::size_t k = 0; k < kFactorCount; ++k) codes[k] = static_cast<std::uint8_t>(f[k]);
        m.factors.push_back(codes);
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ": malformed manifest: " + e.what());
    }
    return m;
  }

  m.format = DatasetFormat::packed;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  unsigned char header[kHeaderBytes];
  is.read(reinterpret_cast<char*>(header), kHeaderBytes);
  if (is.gcount() != static_cast<std::streamsize>(kHeaderBytes) ||
      std::memcmp(header, kMagic, sizeof(kMagic)) != 0) {
    throw DataError(path.string() + ": not a MASTDS1 file");
  }
  const std::size_t count = get_u32(header + 7);
  m.side = get_u32(header + 11);
  if (m.side == 0) throw DataError(path.string() + ": zero image side");
  const auto expected = kHeaderBytes + count * record_bytes(m.side);
  const auto actual = std::filesystem::file_size(path);
  if (actual < expected) {
    const std::size_t complete = (actual - kHeaderBytes) / record_bytes(m.side);
    throw DataError(path.string() + ": record " + std::to_string(complete) + " is truncated");
  }
  std::ifstream sidecar(path.string() + ".json");
  if (sidecar) {
    try {
      auto j = nlohmann::json::parse(sidecar);
      m.seed = j.value("seed", std::uint64_t{0});
      m.label_factor = factor_from_name(j.value("label_factor", std::string("hue"))).value_or(Factor::hue);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ".json: malformed manifest: " + e.what());
    }
  }
  // Labels and factors live in the blob; read them without decoding pixels.
  std::vector<unsigned char> tail(2 + kFactorCount);
  for (std::size_t i = 0; i < count; ++i) {
    is.seekg(static_cast<std::streamoff>(kHeaderBytes + i * record_bytes(m.side) + 3 * m.side * m.side));
    is.read(reinterpret_cast<char*>(tail.data()), static_cast<std::streamsize>(tail.size()));
    const auto label = static_cast<std::uint16_t>(tail[0] | (tail[1] << 8));
    std::array<std::uint8_t, kFactorCount> codes{};
    std::copy(tail.begin() + 2, tail.end(), codes.begin());
    validate_record(i, label, codes);
    m.labels.push_back(label);
    m.factors.push_back(codes);
  }
  return m;
}

DatasetReader::DatasetReader(const std::filesystem::path& path,
                             std::optional<std::uint64_t> shuffle_seed)
    : manifest_(read_manifest(path)) {
  if (manifest_.format == DatasetFormat::packed) {
    blob_.open(path, std::ios::binary);
    if (!blob_) throw DataError("cannot open " + path.string());
  }
  rewind(shuffle_seed);
}

void DatasetReader::rewind(std::optional<std::uint64_t> shuffle_seed) {
  order_.resize(manifest_.count());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    std::shuffle(order_.begin(), order_.end(), rng);
  }
  cursor_ = 0;
}

std::optional<Sample> DatasetReader::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  return read_record(order_[cursor_++]);
}

Sample DatasetReader::read_record(std::size_t index) {
  Sample s;
  s.label = manifest_.labels[index];
  s.factors = manifest_.factors[index];
  validate_record(index, s.label, s.factors);
  if (manifest_.format == DatasetFormat::packed) {
    const std::size_t side = manifest_.side;
    std::vector<unsigned char> buf(3 * side * side);
    blob_.clear();
    blob_.seekg(static_cast<std::streamoff>(kHeaderBytes + index * record_bytes(side)));
    blob_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (blob_.gcount() != static_cast<std::streamsize>(buf.size())) {
      throw DataError("record " + std::to_string(index) + ": truncated pixel data");
    }
    s.image = decode_pixels(buf.data(), side);
  } else {
    try {
      s.image = read_ppm(manifest_.location / manifest_.files[index]);
    } catch (const DataError& e) {
      throw DataError("record " + std::to_string(index) + ": " + e.what());
    }
    if (s.image.height != manifest_.side || s.image.width != manifest_.side) {
      throw DataError("record " + std::to_string(index) + ": image extents disagree with manifest");
    }
  }
  return s;
}

Dataset load(const std::filesystem::path& path, std::optional<std::uint64_t> shuffle_seed) {
  DatasetReader reader(path, shuffle_seed);
  Dataset ds;
  ds.side = reader.side();
  ds.seed = reader.manifest().seed;
  ds.label_factor = reader.manifest().label_factor;
  ds.samples.reserve(reader.size());
  while (auto s = reader.next()) ds.samples.push_back(std::move(*s));
  return ds;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, std::size_t holdout_every) {
  if (holdout_every < 2) throw ContractError("split: holdout_every must be at least 2");
  Dataset a, b;
  a.side = b.side = ds.side;
  a.seed = b.seed = ds.seed;
  a.label_factor = b.label_factor = ds.label_factor;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ((i % holdout_every == holdout_every - 1) ? b : a).samples.push_back(ds.samples[i]);
  }
  return {std::move(a), std::move(b)};
}

}  // namespace mast
