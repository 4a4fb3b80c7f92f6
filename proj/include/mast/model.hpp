#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mast/image.hpp"
#include "mast/rng.hpp"
#include "mast/tensor.hpp"

namespace mast {

inline constexpr double kVarianceFloor = 1e-6;

struct ModelConfig {
  std::size_t embed_dim = 128;  // d
  std::size_t hidden = 256;
  std::size_t num_masks = 5;    // K; 0 disables the mask bank
  std::vector<std::size_t> channels{16, 32, 64};
};

/// Fully connected layer, weight stored [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

struct EncoderOutput {
  Tensor map;  // [n, c, h, w] after the last conv
  Tensor y;    // [n, c] spatial average of map
};

/// Stack of 3x3 stride-2 convolutions with ReLU.
class Encoder {
 public:
  Encoder() = default;
  Encoder(const std::vector<std::size_t>& channels, Rng& rng);

  EncoderOutput forward(const Tensor& images) const;
  std::size_t out_channels() const { return kernels_.back().dim(0); }

  /// Spatial extent after all layers, or 0 when the input is too small.
  std::size_t output_side(std::size_t side) const;

  std::vector<Tensor> kernels_;
  std::vector<Tensor> biases_;
};

/// Batch of diagonal Gaussians: mu and var are [n, d] (or [d] for one sample).
struct GaussianEmbedding {
  Tensor mu;
  Tensor var;
};

/// Maps the encoder output to a diagonal Gaussian. Each head GeM-pools the
/// spatial map with its own exponent, concatenates the pooled vector with y,
/// and runs the shared two-layer trunk before its own linear output.
class GaussianProjector {
 public:
  GaussianProjector() = default;
  GaussianProjector(std::size_t in_channels, std::size_t hidden, std::size_t embed_dim, Rng& rng);

  GaussianEmbedding forward(const EncoderOutput& enc) const;

  /// Keeps both exponents at or above 1 after an optimizer update.
  void clamp_exponents();

  Tensor p_mu;
  Tensor p_var;
  Linear fc1;
  Linear fc2;
  Linear mean_head;
  Linear var_head;

 private:
  Tensor trunk(const EncoderOutput& enc, const Tensor& p) const;
};

/// Learnable d x K parameter U; masks are M = relu(U).
class MaskBank {
 public:
  MaskBank() = default;
  explicit MaskBank(Tensor u) : u_(std::move(u)) {}

  Tensor masks() const { return relu(u_); }
  std::size_t dim() const { return u_.dim(0); }
  std::size_t count() const { return u_.defined() ? u_.dim(1) : 0; }
  Tensor& u() { return u_; }
  const Tensor& u() const { return u_; }

 private:
  Tensor u_;
};

/// Column k of U gets a block of floor(d/K) dimensions drawn from N(1, 0.1^2);
/// every entry also gets N(0.2, 0.01) noise.
MaskBank init_masks(Rng& rng, std::size_t d, std::size_t k);

/// Restricts an embedding to subspace k: mu * m_k and var * m_k.
GaussianEmbedding mask_embed(const GaussianEmbedding& e, const MaskBank& bank, std::size_t k);

inline constexpr const char* kMaskParameter = "masks.u";

struct NamedParameter {
  std::string name;
  Tensor* tensor;
  bool decay;  // receives weight decay
};

struct ModelForward {
  EncoderOutput enc;
  GaussianEmbedding emb;
};

class Model {
 public:
  Model() = default;
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  DType dtype() const { return projector.p_mu.dtype(); }
  ModelForward forward(const Tensor& images) const;
  /// Representation only; used by probes.
  Tensor represent(const Tensor& images) const { return encoder.forward(images).y; }

  std::vector<NamedParameter> parameters();
  /// Converts every parameter to the given float width.
  void cast(DType dt);

  Encoder encoder;
  GaussianProjector projector;
  MaskBank bank;

 private:
  ModelConfig cfg_;
};

/// Stacks images into [n, 3, h, w] in the default dtype. All images must share extents.
Tensor images_to_tensor(const std::vector<Image>& images);

}  // namespace mast
