#include "mast/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace mast {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace {

constexpr char kMagic[8] = {'M', 'A', 'S', 'T', 'C', 'K', 'P', 'T'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::filesystem::path& path, const char* what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw CheckpointError(path.string() + ": truncated while reading " + what);
  }
  return v;
}

struct RawArray {
  DType dtype;
  Shape shape;
  std::vector<char> bytes;
};

void write_array(std::ostream& os, const std::string& name, const Tensor& t) {
  put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype()));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) put<std::uint64_t>(os, e);
  dispatch(t.dtype(), [&]<class T>() {
    auto data = t.data<T>();
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(T)));
  });
}

Tensor to_tensor(const RawArray& raw, const std::string& name, const Shape& expected,
                 const std::filesystem::path& path) {
  if (raw.shape != expected) {
    throw CheckpointError(path.string() + ": array '" + name + "' has shape " +
                          shape_string(raw.shape) + ", model expects " + shape_string(expected));
  }
  Tensor t = Tensor::zeros(raw.shape, raw.dtype);
  dispatch(raw.dtype, [&]<class T>() {
    auto out = t.mutable_data<T>();
    std::memcpy(out.data(), raw.bytes.data(), raw.bytes.size());
  });
  return t;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  Model model = ckpt.model;  // shares tensors; only read below
  const auto params = model.parameters();
  if (!ckpt.momentum.empty() && ckpt.momentum.size() != params.size()) {
    throw ContractError("save_checkpoint: momentum buffers do not match the parameter list");
  }
  nlohmann::json meta;
  meta["config"] = config_to_json(ckpt.config);
  meta["config_hash"] = config_hash(ckpt.config);
  meta["epoch"] = ckpt.epoch;
  meta["step"] = ckpt.step;
  meta["rng"] = {{"seed", ckpt.config.seed}, {"epoch", ckpt.epoch}, {"step", ckpt.step}};
  meta["dtype"] = dtype_name(ckpt.config.dtype);
  const std::string meta_text = meta.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write checkpoint " + tmp.string());
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, Checkpoint::kVersion);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(meta_text.size()));
    os.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size() * (ckpt.momentum.empty() ? 1 : 2)));
    for (const auto& p : params) write_array(os, p.name, *p.tensor);
    for (std::size_t i = 0; i < ckpt.momentum.size(); ++i) {
      write_array(os, "momentum/" + params[i].name, ckpt.momentum[i]);
    }
    if (!os.flush()) throw CheckpointError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw CheckpointError(path.string() + ": not a MASTCKPT file");
  }
  const auto version = get<std::uint32_t>(is, path, "version");
  if (version != Checkpoint::kVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto meta_len = get<std::uint32_t>(is, path, "metadata length");
  std::string meta_text(meta_len, '\0');
  if (!is.read(meta_text.data(), meta_len)) throw CheckpointError(path.string() + ": truncated metadata");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": corrupt metadata: " + e.what());
  }

  std::map<std::string, RawArray> arrays;
  const auto count = get<std::uint32_t>(is, path, "array count");
  for (std::uint32_t a = 0; a < count; ++a) {
    const auto name_len = get<std::uint16_t>(is, path, "array name");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw CheckpointError(path.string() + ": truncated array name");
    RawArray raw;
    const auto dt = get<std::uint8_t>(is, path, "array dtype");
    if (dt > 1) throw CheckpointError(path.string() + ": array '" + name + "' has unknown dtype");
    raw.dtype = static_cast<DType>(dt);
    const auto rank = get<std::uint8_t>(is, path, "array rank");
    for (std::uint8_t r = 0; r < rank; ++r) raw.shape.push_back(get<std::uint64_t>(is, path, "array shape"));
    raw.bytes.resize(shape_numel(raw.shape) * (raw.dtype == DType::f32 ? 4 : 8));
    if (!is.read(raw.bytes.data(), static_cast<std::streamsize>(raw.bytes.size()))) {
      throw CheckpointError(path.string() + ": truncated data for array '" + name + "'");
    }
    arrays.emplace(std::move(name), std::move(raw));
  }

  Checkpoint ckpt;
  ckpt.config = config_from_json(meta.at("config"));
  ckpt.epoch = meta.at("epoch").get<std::size_t>();
  ckpt.step = meta.at("step").get<std::size_t>();
  {
    ScopedDType scope(ckpt.config.dtype);
    ckpt.model = Model(ckpt.config.model_config(), ckpt.config.seed);
  }
  bool has_momentum = false;
  for (auto& p : ckpt.model.parameters()) {
    auto it = arrays.find(p.name);
    if (it == arrays.end()) throw CheckpointError(path.string() + ": missing array '" + p.name + "'");
    *p.tensor = to_tensor(it->second, p.name, p.tensor->shape(), path);
    p.tensor->set_requires_grad(true);
    has_momentum = has_momentum || arrays.count("momentum/" + p.name) > 0;
  }
  if (has_momentum) {
    for (auto& p : ckpt.model.parameters()) {
      auto it = arrays.find("momentum/" + p.name);
      if (it == arrays.end()) {
        throw CheckpointError(path.string() + ": missing array 'momentum/" + p.name + "'");
      }
      ckpt.momentum.push_back(to_tensor(it->second, "momentum/" + p.name, p.tensor->shape(), path));
    }
  }
  return ckpt;
}

}  // namespace mast
