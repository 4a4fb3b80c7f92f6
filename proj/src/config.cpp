#include "mast/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <thread>

namespace mast {

namespace {

template <class T>
T field(const nlohmann::json& j, const std::string& key, const char* expected) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config field '" + key + "': expected " + expected + ", got " + j.dump());
  }
}

std::size_t count_field(const nlohmann::json& j, const std::string& key) {
  if (!j.is_number_integer() || j.get<long long>() < 0) {
    throw ConfigError("config field '" + key + "': expected a nonnegative integer, got " + j.dump());
  }
  return j.get<std::size_t>();
}

double number_field(const nlohmann::json& j, const std::string& key) {
  if (!j.is_number()) throw ConfigError("config field '" + key + "': expected a number, got " + j.dump());
  return j.get<double>();
}

std::vector<AugOp> parse_augmentations(const nlohmann::json& j, std::string& name) {
  if (j.is_string()) {
    name = j.get<std::string>();
    try {
      return augmentation_set(name);
    } catch (const ContractError&) {
      throw ConfigError("config field 'augmentations': unknown set '" + name +
                        "' (expected mast5, mast15, mast19 or a list of operator names)");
    }
  }
  if (!j.is_array()) {
    throw ConfigError("config field 'augmentations': expected a set name or a list of operator names");
  }
  std::vector<AugOp> ops;
  for (const auto& item : j) {
    const auto op_name = field<std::string>(item, "augmentations", "an operator name");
    auto op = aug_from_name(op_name);
    if (!op) throw ConfigError("config field 'augmentations': unknown operator '" + op_name + "'");
    ops.push_back(*op);
  }
  name = "custom";
  return ops;
}

}  // namespace

ModelConfig TrainConfig::model_config() const {
  ModelConfig m;
  m.embed_dim = embed_dim;
  m.hidden = hidden;
  m.channels = channels;
  m.num_masks = baseline ? 0 : k_max();
  return m;
}

LossCoefficients TrainConfig::loss_coefficients() const {
  LossCoefficients c = baseline ? LossCoefficients::baseline(embed_dim)
                                : LossCoefficients::defaults(embed_dim, std::max<std::size_t>(1, k_max()));
  if (coefficients.lambda) c.lambda = *coefficients.lambda;
  if (coefficients.lambda1) c.lambda1 = *coefficients.lambda1;
  if (coefficients.lambda2) c.lambda2 = *coefficients.lambda2;
  if (coefficients.alpha) c.alpha = *coefficients.alpha;
  if (coefficients.beta) c.beta = *coefficients.beta;
  return c.scaled(coefficients.scale);
}

void TrainConfig::validate() const {
  if (augmentations.empty()) throw ConfigError("config field 'augmentations': empty operator list");
  std::set<AugOp> unique(augmentations.begin(), augmentations.end());
  if (unique.size() != augmentations.size()) {
    throw ConfigError("config field 'augmentations': operators must be distinct");
  }
  if (embed_dim == 0) throw ConfigError("config field 'embed_dim': must be positive");
  if (!baseline && embed_dim < k_max()) {
    throw ConfigError("config field 'embed_dim': must be at least the number of augmentations (" +
                      std::to_string(k_max()) + ")");
  }
  if (hidden == 0) throw ConfigError("config field 'hidden': must be positive");
  if (channels.empty()) throw ConfigError("config field 'channels': needs at least one layer");
  if (schedule.epochs == 0) throw ConfigError("config field 'epochs': must be positive");
  if (schedule.batch_size < 2) throw ConfigError("config field 'batch_size': must be at least 2");
  if (schedule.base_lr < 0) throw ConfigError("config field 'base_lr': must be nonnegative");
  if (schedule.momentum < 0 || schedule.momentum >= 1) {
    throw ConfigError("config field 'momentum': must be in [0, 1)");
  }
  if (schedule.weight_decay < 0) throw ConfigError("config field 'weight_decay': must be nonnegative");
  if (schedule.grad_clip < 0) throw ConfigError("config field 'grad_clip': must be nonnegative");
  if (schedule.mask_lr_scale < 0) throw ConfigError("config field 'mask_lr_scale': must be nonnegative");
  if (coefficients.scale <= 0) throw ConfigError("config field 'coeff_scale': must be positive");
}

nlohmann::json config_to_json(const TrainConfig& cfg) {
  nlohmann::json j;
  j["dataset"] = cfg.dataset.string();
  j["out_dir"] = cfg.out_dir.string();
  j["embed_dim"] = cfg.embed_dim;
  j["hidden"] = cfg.hidden;
  j["channels"] = cfg.channels;
  if (cfg.augmentation_name == "custom") {
    auto& ops = j["augmentations"] = nlohmann::json::array();
    for (AugOp op : cfg.augmentations) ops.push_back(std::string(aug_name(op)));
  } else {
    j["augmentations"] = cfg.augmentation_name;
  }
  j["epochs"] = cfg.schedule.epochs;
  j["batch_size"] = cfg.schedule.batch_size;
  j["base_lr"] = cfg.schedule.base_lr;
  j["momentum"] = cfg.schedule.momentum;
  j["weight_decay"] = cfg.schedule.weight_decay;
  j["warmup"] = cfg.schedule.warmup;
  j["grad_clip"] = cfg.schedule.grad_clip;
  j["mask_lr_scale"] = cfg.schedule.mask_lr_scale;
  const auto& c = cfg.coefficients;
  for (const auto& [key, value] : {std::pair{"lambda", c.lambda}, std::pair{"lambda1", c.lambda1},
                                   std::pair{"lambda2", c.lambda2}, std::pair{"alpha", c.alpha},
                                   std::pair{"beta", c.beta}}) {
    if (value) j[key] = *value;
  }
  j["coeff_scale"] = c.scale;
  j["seed"] = cfg.seed;
  j["dtype"] = dtype_name(cfg.dtype);
  j["ckpt_every"] = cfg.ckpt_every;
  j["baseline"] = cfg.baseline;
  j["threads"] = cfg.threads;
  return j;
}

TrainConfig config_from_json(const nlohmann::json& j, const TrainConfig& base) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object at the top level");
  TrainConfig cfg = base;
  for (const auto& [key, v] : j.items()) {
    if (key == "dataset") {
      cfg.dataset = field<std::string>(v, key, "a path string");
    } else if (key == "out_dir") {
      cfg.out_dir = field<std::string>(v, key, "a path string");
    } else if (key == "embed_dim") {
      cfg.embed_dim = count_field(v, key);
    } else if (key == "hidden") {
      cfg.hidden = count_field(v, key);
    } else if (key == "channels") {
      if (!v.is_array()) throw ConfigError("config field 'channels': expected a list of integers");
      cfg.channels.clear();
      for (const auto& c : v) cfg.channels.push_back(count_field(c, key));
    } else if (key == "augmentations") {
      cfg.augmentations = parse_augmentations(v, cfg.augmentation_name);
    } else if (key == "epochs") {
      cfg.schedule.epochs = count_field(v, key);
    } else if (key == "batch_size") {
      cfg.schedule.batch_size = count_field(v, key);
    } else if (key == "base_lr") {
      cfg.schedule.base_lr = number_field(v, key);
    } else if (key == "momentum") {
      cfg.schedule.momentum = number_field(v, key);
    } else if (key == "weight_decay") {
      cfg.schedule.weight_decay = number_field(v, key);
    } else if (key == "warmup") {
      cfg.schedule.warmup = field<bool>(v, key, "a boolean");
    } else if (key == "grad_clip") {
      cfg.schedule.grad_clip = number_field(v, key);
    } else if (key == "mask_lr_scale") {
      cfg.schedule.mask_lr_scale = number_field(v, key);
    } else if (key == "lambda") {
      cfg.coefficients.lambda = number_field(v, key);
    } else if (key == "lambda1") {
      cfg.coefficients.lambda1 = number_field(v, key);
    } else if (key == "lambda2") {
      cfg.coefficients.lambda2 = number_field(v, key);
    } else if (key == "alpha") {
      cfg.coefficients.alpha = number_field(v, key);
    } else if (key == "beta") {
      cfg.coefficients.beta = number_field(v, key);
    } else if (key == "coeff_scale") {
      cfg.coefficients.scale = number_field(v, key);
    } else if (key == "seed") {
      if (!v.is_number_unsigned()) throw ConfigError("config field 'seed': expected a nonnegative integer");
      cfg.seed = v.get<std::uint64_t>();
    } else if (key == "dtype") {
      const auto s = field<std::string>(v, key, "\"f32\" or \"f64\"");
      if (s == "f32") {
        cfg.dtype = DType::f32;
      } else if (s == "f64") {
        cfg.dtype = DType::f64;
      } else {
        throw ConfigError("config field 'dtype': expected \"f32\" or \"f64\", got \"" + s + "\"");
      }
    } else if (key == "ckpt_every") {
      cfg.ckpt_every = count_field(v, key);
    } else if (key == "baseline") {
      cfg.baseline = field<bool>(v, key, "a boolean");
    } else if (key == "threads") {
      cfg.threads = count_field(v, key);
    } else {
      throw ConfigError("config: unknown field '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const TrainConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config_to_json(cfg).dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = hex[h & 0xf];
  return out;
}

std::size_t effective_threads(std::size_t requested) {
  std::size_t n = requested;
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* cap = std::getenv("MAST_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(cap, &end, 10);
    if (end != cap && v > 0) n = std::min(n, static_cast<std::size_t>(v));
  }
  return std::max<std::size_t>(1, n);
}

}  // namespace mast
