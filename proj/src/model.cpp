#include "mast/model.hpp"

#include <cmath>

namespace mast {

namespace {

Tensor parameter(Shape shape, Rng& rng, double bound) {
  std::vector<double> values(shape_numel(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : values) v = dist(rng);
  Tensor t = Tensor::from(std::move(shape), values);
  t.set_requires_grad(true);
  return t;
}

Tensor constant_parameter(Shape shape, double value) {
  Tensor t = Tensor::full(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

Tensor recast(const Tensor& t, DType dt) {
  if (!t.defined() || t.dtype() == dt) return t;
  const auto values = t.to_vector();
  Tensor out = Tensor::from(t.shape(), values, dt);
  out.set_requires_grad(t.requires_grad());
  return out;
}

}  // namespace

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight(parameter({in, out}, rng, std::sqrt(6.0 / static_cast<double>(in)))),
      bias(constant_parameter({out}, 0.0)) {}

Tensor Linear::operator()(const Tensor& x) const {
  return matmul(x, weight) + tile_rows(bias, x.dim(0));
}

Encoder::Encoder(const std::vector<std::size_t>& channels, Rng& rng) {
  if (channels.empty()) throw ContractError("encoder needs at least one layer");
  std::size_t in = Image::kChannels;
  for (std::size_t out : channels) {
    const double fan_in = static_cast<double>(in * 9);
    kernels_.push_back(parameter({out, in, 3, 3}, rng, std::sqrt(6.0 / fan_in)));
    biases_.push_back(constant_parameter({out}, 0.0));
    in = out;
  }
}

std::size_t Encoder::output_side(std::size_t side) const {
  for (std::size_t i = 0; i < kernels_.size(); ++i) {
    if (side < 3) return 0;
    side = (side - 3) / 2 + 1;
  }
  return side;
}

EncoderOutput Encoder::forward(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != Image::kChannels) {
    throw DimensionError("encoder expects [n,3,h,w], got " + shape_string(images.shape()));
  }
  const std::size_t side = std::min(images.dim(2), images.dim(3));
  if (side < 8 || output_side(side) == 0) {
    throw DimensionError("image " + std::to_string(images.dim(2)) + "x" +
                         std::to_string(images.dim(3)) + " is too small for " +
                         std::to_string(kernels_.size()) + " stride-2 convolutions");
  }
  Tensor h = images;
  for (std::size_t i = 0; i < kernels_.size(); ++i) h = relu(conv2d(h, kernels_[i], 2, biases_[i]));
  Tensor y = mean(h, {2, 3});
  return {h, y};
}

GaussianProjector::GaussianProjector(std::size_t in_channels, std::size_t hidden,
                                     std::size_t embed_dim, Rng& rng)
    : p_mu(constant_parameter({1}, 3.0)),
      p_var(constant_parameter({1}, 3.0)),
      fc1(2 * in_channels, hidden, rng),
      fc2(hidden, hidden, rng),
      mean_head(hidden, embed_dim, rng),
      var_head(hidden, embed_dim, rng) {
  // Start with sigma^2 near d: the d-scaled distance weights then match a
  // per-dimension squared error.
  var_head.bias = constant_parameter({embed_dim}, static_cast<double>(embed_dim));
  var_head.weight =
      parameter({hidden, embed_dim}, rng, 0.1 * std::sqrt(6.0 / static_cast<double>(hidden)));
}

Tensor GaussianProjector::trunk(const EncoderOutput& enc, const Tensor& p) const {
  Tensor pooled = gem_pool(enc.map, p);
  Tensor h = relu(fc1(concat_cols(enc.y, pooled)));
  return relu(fc2(h));
}

GaussianEmbedding GaussianProjector::forward(const EncoderOutput& enc) const {
  Tensor mu = mean_head(trunk(enc, p_mu));
  Tensor var = add_scalar(relu(var_head(trunk(enc, p_var))), kVarianceFloor);
  return {mu, var};
}

void GaussianProjector::clamp_exponents() {
  for (Tensor* p : {&p_mu, &p_var}) {
    if (p->at(0) < 1.0) p->set(0, 1.0);
  }
}

MaskBank init_masks(Rng& rng, std::size_t d, std::size_t k) {
  if (k == 0 || k > d) {
    throw ContractError("init_masks: K=" + std::to_string(k) + " must be in [1, d=" +
                        std::to_string(d) + "]");
  }
  const std::size_t block = d / k;
  std::normal_distribution<double> prior(1.0, 0.1);
  std::normal_distribution<double> noise(0.2, 0.1);
  std::vector<double> u(d * k);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t c = 0; c < k; ++c) {
      double v = noise(rng);
      if (j >= c * block && j < (c + 1) * block) v += prior(rng);
      u[j * k + c] = v;
    }
  Tensor t = Tensor::from({d, k}, u);
  t.set_requires_grad(true);
  return MaskBank(t);
}

GaussianEmbedding mask_embed(const GaussianEmbedding& e, const MaskBank& bank, std::size_t k) {
  if (k >= bank.count()) {
    throw ContractError("mask_embed: subspace " + std::to_string(k) + " out of range [0, " +
                        std::to_string(bank.count()) + ")");
  }
  const std::size_t col[] = {k};
  Tensor m = reshape(select_columns(bank.masks(), col), {bank.dim()});
  if (e.mu.rank() == 1) return {e.mu * m, e.var * m};
  const std::size_t n = e.mu.dim(0);
  Tensor tiled = tile_rows(m, n);
  return {e.mu * tiled, e.var * tiled};
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  Rng enc_rng(split_seed(seed, {1}));
  Rng proj_rng(split_seed(seed, {2}));
  Rng mask_rng(split_seed(seed, {3}));
  encoder = Encoder(cfg.channels, enc_rng);
  projector = GaussianProjector(encoder.out_channels(), cfg.hidden, cfg.embed_dim, proj_rng);
  if (cfg.num_masks > 0) bank = init_masks(mask_rng, cfg.embed_dim, cfg.num_masks);
}

ModelForward Model::forward(const Tensor& images) const {
  ModelForward out;
  out.enc = encoder.forward(images);
  out.emb = projector.forward(out.enc);
  return out;
}

std::vector<NamedParameter> Model::parameters() {
  std::vector<NamedParameter> out;
  for (std::size_t i = 0; i < encoder.kernels_.size(); ++i) {
    out.push_back({"encoder.conv" + std::to_string(i) + ".weight", &encoder.kernels_[i], true});
    out.push_back({"encoder.conv" + std::to_string(i) + ".bias", &encoder.biases_[i], true});
  }
  out.push_back({"projector.p_mu", &projector.p_mu, false});
  out.push_back({"projector.p_var", &projector.p_var, false});
  const std::pair<const char*, Linear*> layers[] = {{"projector.fc1", &projector.fc1},
                                                    {"projector.fc2", &projector.fc2},
                                                    {"projector.mean_head", &projector.mean_head},
                                                    {"projector.var_head", &projector.var_head}};
  for (const auto& [name, layer] : layers) {
    out.push_back({std::string(name) + ".weight", &layer->weight, true});
    out.push_back({std::string(name) + ".bias", &layer->bias, true});
  }
  if (bank.count() > 0) out.push_back({kMaskParameter, &bank.u(), false});
  return out;
}

void Model::cast(DType dt) {
  for (auto& p : parameters()) *p.tensor = recast(*p.tensor, dt);
}

Tensor images_to_tensor(const std::vector<Image>& images) {
  if (images.empty()) throw ContractError("images_to_tensor: empty batch");
  const std::size_t h = images[0].height, w = images[0].width;
  const std::size_t per = Image::kChannels * h * w;
  Tensor t = Tensor::zeros({images.size(), Image::kChannels, h, w});
  dispatch(t.dtype(), [&]<class T>() {
    auto out = t.mutable_data<T>();
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (images[i].height != h || images[i].width != w) {
        throw DimensionError("images_to_tensor: image " + std::to_string(i) + " has extents " +
                             std::to_string(images[i].height) + "x" +
                             std::to_string(images[i].width));
      }
      for (std::size_t j = 0; j < per; ++j) out[i * per + j] = static_cast<T>(images[i].pixels[j]);
    }
  });
  return t;
}

}  // namespace mast
