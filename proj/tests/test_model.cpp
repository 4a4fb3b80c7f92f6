#include <gtest/gtest.h>

#include "fd_oracle.hpp"
#include "mast/model.hpp"

using namespace mast;
using mast::testing::max_relative_error;
using mast::testing::numeric_gradient;

namespace {

class ModelTest : public ::testing::Test {
 protected:
  void SetUp() override { Graph::current().reset(); }
  void TearDown() override { Graph::current().reset(); }
  ScopedDType f64_{DType::f64};
};

Tensor random_tensor(Shape shape, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor::from(std::move(shape), v);
}

std::vector<Image> random_images(std::size_t n, std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Image> out;
  for (std::size_t i = 0; i < n; ++i) {
    Image img(side, side);
    for (float& v : img.pixels) v = static_cast<float>(uniform01(rng));
    out.push_back(img);
  }
  return out;
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.hidden = 6;
  cfg.num_masks = 2;
  cfg.channels = {4, 4, 5};
  return cfg;
}

}  // namespace

TEST_F(ModelTest, EncoderExtentsFor32x32) {
  Model model(ModelConfig{}, 1);
  auto out = model.encoder.forward(images_to_tensor(random_images(2, 32, 1)));
  EXPECT_EQ(out.map.shape(), (Shape{2, 64, 3, 3}));
  EXPECT_EQ(out.y.shape(), (Shape{2, 64}));
  EXPECT_EQ(model.encoder.output_side(32), 3u);
}

TEST_F(ModelTest, ZeroImageWithZeroBiasesGivesZeroRepresentation) {
  Model model(ModelConfig{}, 2);
  for (const auto& b : model.encoder.biases_) EXPECT_EQ(b.to_vector(), std::vector<double>(b.numel(), 0.0));
  Tensor y = model.represent(images_to_tensor({Image(32, 32, 0.0f)}));
  for (double v : y.to_vector()) EXPECT_EQ(v, 0.0);
}

TEST_F(ModelTest, IdenticalImagesGiveIdenticalRepresentations) {
  Model model(ModelConfig{}, 3);
  auto img = random_images(1, 32, 3)[0];
  Tensor y = model.represent(images_to_tensor({img, img}));
  auto v = y.to_vector();
  for (std::size_t j = 0; j < 64; ++j) EXPECT_EQ(v[j], v[64 + j]);
}

TEST_F(ModelTest, TooSmallImageIsDimensionError) {
  Model model(ModelConfig{}, 4);
  EXPECT_THROW(model.represent(images_to_tensor(random_images(1, 8, 4))), DimensionError);
  EXPECT_THROW(model.represent(images_to_tensor(random_images(1, 14, 4))), DimensionError);
  EXPECT_NO_THROW(model.represent(images_to_tensor(random_images(1, 15, 4))));
}

TEST_F(ModelTest, VarianceRespectsFloorOnRandomInputs) {
  Rng rng(5);
  GaussianProjector proj(64, 32, 16, rng);
  // Push half the pre-activations negative so the floor is actually reached.
  proj.var_head.bias = Tensor::full({16}, -0.5);
  std::size_t at_floor = 0;
  NoGradGuard no_grad;
  for (int batch = 0; batch < 10; ++batch) {
    Tensor map = random_tensor({1000, 64, 2, 2}, rng, 0.0, 2.0);
    EncoderOutput enc{map, mean(map, {2, 3})};
    for (double v : proj.forward(enc).var.to_vector()) {
      ASSERT_GE(v, kVarianceFloor);
      at_floor += v == kVarianceFloor;
    }
  }
  EXPECT_GT(at_floor, 0u);
}

TEST_F(ModelTest, GemWithUnitExponentIsAveragePooling) {
  Rng rng(6);
  Tensor map = random_tensor({3, 4, 5, 5}, rng, 0.0, 3.0);
  auto gem = gem_pool(map, Tensor::full({1}, 1.0)).to_vector();
  auto avg = mean(map, {2, 3}).to_vector();
  for (std::size_t i = 0; i < gem.size(); ++i) EXPECT_NEAR(gem[i], avg[i], 1e-6);
}

TEST_F(ModelTest, GemWithLargeExponentApproachesMax) {
  Rng rng(7);
  Tensor map = random_tensor({3, 4, 5, 5}, rng, 0.1, 3.0);
  auto gem = gem_pool(map, Tensor::full({1}, 64.0)).to_vector();
  auto values = map.to_vector();
  for (std::size_t c = 0; c < 12; ++c) {
    const double mx = *std::max_element(values.begin() + c * 25, values.begin() + (c + 1) * 25);
    EXPECT_LE(gem[c], mx + 1e-9);
    EXPECT_GE(gem[c], 0.95 * mx);
  }
}

TEST_F(ModelTest, ExponentsStartAtThreeAndClampAtOne) {
  Rng rng(8);
  GaussianProjector proj(4, 4, 4, rng);
  EXPECT_EQ(proj.p_mu.item(), 3.0);
  EXPECT_EQ(proj.p_var.item(), 3.0);
  proj.p_mu.set(0, 0.4);
  proj.clamp_exponents();
  EXPECT_EQ(proj.p_mu.item(), 1.0);
  EXPECT_EQ(proj.p_var.item(), 3.0);
}

TEST_F(ModelTest, InitMaskStatistics) {
  const std::size_t d = 10000, k = 10, block = d / k;
  Rng rng(9);
  double in_sum = 0, off_sum = 0, off_sq = 0;
  std::size_t in_n = 0, off_n = 0;
  for (int rep = 0; rep < 10; ++rep) {
    MaskBank bank = init_masks(rng, d, k);
    auto u = bank.u().to_vector();
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t c = 0; c < k; ++c) {
        const double v = u[j * k + c];
        if (j / block == c) {
          in_sum += v, ++in_n;
        } else {
          off_sum += v, off_sq += v * v, ++off_n;
        }
      }
    for (double m : bank.masks().to_vector()) ASSERT_GE(m, 0.0);
  }
  const double off_mean = off_sum / static_cast<double>(off_n);
  EXPECT_GE(in_n, 100000u);
  EXPECT_NEAR(in_sum / static_cast<double>(in_n), 1.2, 0.01);
  EXPECT_NEAR(off_mean, 0.2, 0.01);
  EXPECT_NEAR(off_sq / static_cast<double>(off_n) - off_mean * off_mean, 0.01, 0.0005);
}

TEST_F(ModelTest, InitMasksUnevenBlocksAndErrors) {
  Rng rng(10);
  MaskBank bank = init_masks(rng, 7, 3);  // block of 2, dimension 6 only gets noise
  EXPECT_EQ(bank.count(), 3u);
  EXPECT_EQ(bank.dim(), 7u);
  EXPECT_THROW(init_masks(rng, 4, 5), ContractError);
  EXPECT_THROW(Model(ModelConfig{4, 8, 5, {4, 4, 4}}, 1), ContractError);
}

TEST_F(ModelTest, MaskEmbedDefinitionCases) {
  GaussianEmbedding e{Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}),
                      Tensor::from({2, 3}, {0.5, 1, 2, 3, 4, 5})};
  MaskBank bank(Tensor::from({3, 3}, {1, 0, 1, 1, 0, 0, 1, 0, 0}));
  auto ones = mask_embed(e, bank, 0);
  EXPECT_EQ(ones.mu.to_vector(), e.mu.to_vector());
  EXPECT_EQ(ones.var.to_vector(), e.var.to_vector());
  auto zeros = mask_embed(e, bank, 1);
  EXPECT_EQ(zeros.mu.to_vector(), std::vector<double>(6, 0.0));
  EXPECT_EQ(zeros.var.to_vector(), std::vector<double>(6, 0.0));
  auto first = mask_embed(e, bank, 2);
  EXPECT_EQ(first.mu.to_vector(), (std::vector<double>{1, 0, 0, 4, 0, 0}));
  EXPECT_THROW(mask_embed(e, bank, 3), ContractError);
}

TEST_F(ModelTest, NegativeUGivesZeroMask) {
  MaskBank bank(Tensor::from({2, 1}, {-0.3, 0.4}));
  EXPECT_EQ(bank.masks().to_vector(), (std::vector<double>{0.0, 0.4}));
}

TEST_F(ModelTest, ProjectorGradientsMatchFiniteDifferences) {
  Model model(small_config(), 11);
  Rng rng(11);
  Tensor images = images_to_tensor(random_images(3, 16, 11));
  Tensor wm = random_tensor({3, 8}, rng, -1, 1);
  Tensor wv = random_tensor({3, 8}, rng, -1, 1);
  auto loss = [&] {
    auto f = model.forward(images);
    return sum(f.emb.mu * wm) + sum(f.emb.var * wv);
  };
  for (auto& p : model.parameters()) p.tensor->zero_grad();
  backward(loss());
  for (auto& p : model.parameters()) {
    if (p.name == "masks.u") continue;
    auto numeric = numeric_gradient(*p.tensor, [&] { return loss().item(); }, 1e-6);
    EXPECT_LT(max_relative_error(p.tensor->grad_vector(), numeric), 1e-4) << p.name;
  }
}

TEST_F(ModelTest, ParametersAndDecayFlags) {
  Model model(ModelConfig{}, 12);
  auto params = model.parameters();
  EXPECT_EQ(params.size(), 6u + 2u + 8u + 1u);
  for (const auto& p : params) {
    const bool excluded = p.name == "masks.u" || p.name.rfind("projector.p_", 0) == 0;
    EXPECT_EQ(p.decay, !excluded) << p.name;
    EXPECT_TRUE(p.tensor->requires_grad()) << p.name;
  }
  EXPECT_EQ(model.bank.u().shape(), (Shape{128, 5}));
  Model cast(small_config(), 1);
  cast.cast(DType::f32);
  for (const auto& p : cast.parameters()) EXPECT_EQ(p.tensor->dtype(), DType::f32);
}
