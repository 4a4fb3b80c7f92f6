#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mast/data.hpp"
#include "mast/eval.hpp"
#include "mast/report.hpp"

using namespace mast;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model(std::size_t masks = 2) {
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.hidden = 8;
  cfg.num_masks = masks;
  cfg.channels = {4, 8, 8};
  return cfg;
}

Dataset small_data(std::size_t n = 60) { return generate({n, 16, Factor::hue}, 5); }

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix m(rows, cols);
  for (double& v : m.data) v = g(rng);
  return m;
}

void set_masks(Model& model, const std::vector<double>& values) {
  model.bank.u() = Tensor::from({model.bank.dim(), model.bank.count()}, values, model.dtype());
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Probe, SeparableFeaturesAreLearnedExactly) {
  Rng rng(1);
  Matrix x = gaussian_matrix(400, 5, rng);
  std::vector<std::size_t> y(400);
  for (std::size_t i = 0; i < 400; ++i) {
    y[i] = i % 2;
    x(i, 0) += y[i] ? 4.0 : -4.0;
  }
  const ProbeResult r = probe_features(x, y, 2, {});
  EXPECT_GE(r.top1, 0.99);
  EXPECT_EQ(r.train_size + r.test_size, 400u);
}

TEST(Probe, RandomLabelsGiveChanceAccuracy) {
  double mean = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    Matrix x = gaussian_matrix(2000, 16, rng);
    std::vector<std::size_t> y(2000);
    for (auto& v : y) v = rng() % 10;
    ProbeOptions opt;
    opt.seed = seed;
    opt.epochs = 20;
    mean += probe_features(x, y, 10, opt).top1 / 5.0;
  }
  EXPECT_NEAR(mean, 0.10, 0.03);
}

TEST(Probe, ConfusionRowsSumToClassCounts) {
  Rng rng(2);
  Matrix x = gaussian_matrix(300, 4, rng);
  std::vector<std::size_t> y(300);
  for (std::size_t i = 0; i < 300; ++i) y[i] = (x(i, 0) > 0.5) + (x(i, 1) > 0.0);
  const ProbeResult r = probe_features(x, y, 3, {});
  std::vector<std::size_t> counts(3, 0);
  for (std::size_t i = 4; i < 300; i += 5) ++counts[y[i]];
  for (std::size_t c = 0; c < 3; ++c) {
    std::size_t row = 0;
    for (std::size_t v : r.confusion[c]) row += v;
    EXPECT_EQ(row, counts[c]);
    EXPECT_GE(r.per_class[c], 0.0);
    EXPECT_LE(r.per_class[c], 1.0);
  }
  EXPECT_GE(r.top1, 0.0);
  EXPECT_LE(r.top1, 1.0);
}

TEST(Probe, LabelCountMismatchIsRejected) {
  Model model(small_model(), 1);
  const Dataset ds = small_data(20);
  std::vector<std::size_t> labels = ds.labels();
  labels.pop_back();
  EXPECT_THROW(linear_probe(model, ds.images(), labels), ContractError);
  Matrix x(10, 2);
  EXPECT_THROW(probe_features(x, std::vector<std::size_t>(9, 0), 1, {}), ContractError);
}

TEST(Probe, EncoderIsFrozen) {
  Model model(small_model(), 3);
  std::vector<std::vector<double>> before;
  for (const auto& p : model.parameters()) before.push_back(p.tensor->to_vector());
  const Dataset ds = small_data();
  ProbeOptions opt;
  opt.epochs = 5;
  linear_probe(model, ds.images(), ds.labels(), opt);
  rotation_probe(model, ds.images(), opt);
  std::size_t i = 0;
  for (const auto& p : model.parameters()) EXPECT_EQ(p.tensor->to_vector(), before[i++]) << p.name;
}

TEST(Probe, RepeatedCallsAgreeExactly) {
  Model model(small_model(), 4);
  const Dataset ds = small_data();
  ProbeOptions opt;
  opt.epochs = 5;
  const auto a = linear_probe(model, ds.images(), ds.labels(), opt);
  const auto b = linear_probe(model, ds.images(), ds.labels(), opt);
  EXPECT_EQ(a.confusion, b.confusion);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
}

TEST(RotationProbe, UntrainedEncoderIsNearChance) {
  // Isotropic noise images carry no orientation cue a random encoder could pick up.
  Rng rng(9);
  std::vector<Image> images;
  for (int i = 0; i < 400; ++i) {
    Image img(16, 16);
    for (float& v : img.pixels) v = static_cast<float>(uniform01(rng));
    images.push_back(img);
  }
  Model model(small_model(), 5);
  ProbeOptions opt;
  opt.epochs = 20;
  EXPECT_NEAR(rotation_probe(model, images, opt).top1, 0.25, 0.05);
}

TEST(RotationProbe, SingleRotationClassIsTrivial) {
  Model model(small_model(), 6);
  const auto r = rotation_probe(model, small_data(30).images(), {}, {0});
  EXPECT_DOUBLE_EQ(r.top1, 1.0);
  EXPECT_DOUBLE_EQ(r.per_class[0], 1.0);
}

TEST(RotationProbe, NonSquareImagesAreRejected) {
  Model model(small_model(), 6);
  EXPECT_THROW(rotation_probe(model, {Image(16, 20), Image(16, 20)}), DimensionError);
}

TEST(Invariance, GridRunsFromIdentityToTheFarEnd) {
  const auto crop = magnitude_grid(default_spec(AugOp::RandomResizedCrop), 5);
  EXPECT_DOUBLE_EQ(crop.front(), 1.0);
  EXPECT_DOUBLE_EQ(crop.back(), 0.2);
  const auto jitter = magnitude_grid(default_spec(AugOp::ColorJitter), 3);
  EXPECT_EQ(jitter, (std::vector<double>{0.0, 0.5, 1.0}));
  EXPECT_DOUBLE_EQ(magnitude_grid(default_spec(AugOp::TranslateX), 2).back(), 0.25);
  EXPECT_THROW(magnitude_grid(default_spec(AugOp::RandomFlip), 3), ContractError);
  EXPECT_THROW(magnitude_grid(default_spec(AugOp::ColorJitter), 1), ContractError);
}

TEST(Invariance, IdentityMagnitudeGivesOne) {
  Model model(small_model(), 7);
  const auto images = small_data(20).images();
  for (AugOp op : {AugOp::ColorJitter, AugOp::RandomResizedCrop, AugOp::TranslateX, AugOp::GaussianBlur}) {
    const AugSpec spec = default_spec(op);
    const std::vector<double> mags{spec.identity};
    const auto curve = invariance_metric(model, spec, mags, images, 1);
    EXPECT_NEAR(curve.unmasked[0], 1.0, 1e-6) << aug_name(op);
    for (const auto& s : curve.subspace) EXPECT_NEAR(s[0], 1.0, 1e-6) << aug_name(op);
  }
}

TEST(Invariance, ValuesAreCosinesAndZeroColumnsAreSkipped) {
  Model model(small_model(), 8);
  std::vector<double> u(16, 1.0);
  for (std::size_t j = 0; j < 8; ++j) u[j * 2 + 1] = -1.0;  // column 1 is all zero after relu
  set_masks(model, u);
  const auto images = small_data(20).images();
  const AugSpec spec = default_spec(AugOp::ColorJitter);
  const auto grid = magnitude_grid(spec, 4);
  const auto curve = invariance_metric(model, spec, grid, images, 2);
  ASSERT_EQ(curve.subspace.size(), 2u);
  for (double v : curve.subspace[0]) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  // An all-ones column sees the unmasked embedding.
  for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_NEAR(curve.subspace[0][i], curve.unmasked[i], 1e-12);
  EXPECT_EQ(curve.skipped[0], 0u);
  EXPECT_EQ(curve.skipped[1], images.size() * grid.size());
  EXPECT_TRUE(std::isnan(curve.subspace[1][0]));
  const auto again = invariance_metric(model, spec, grid, images, 2);
  EXPECT_EQ(curve.unmasked, again.unmasked);
}

TEST(MaskCorrelationTest, IdenticalAndDisjointColumns) {
  const Tensor m = Tensor::from({3, 3}, {1, 1, 0, 2, 2, 0, 0, 0, 5}, DType::f64);
  const auto c = mask_correlation(m).c;
  EXPECT_DOUBLE_EQ(c(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(c(0, 2), 0.0);
  EXPECT_DOUBLE_EQ(c(1, 2), 0.0);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(c(k, k), 1.0);
}

TEST(MaskCorrelationTest, MatchesNaiveOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 3 + rng() % 20, k = 2 + rng() % 6;
    std::vector<double> v(d * k);
    for (double& x : v) x = std::max(0.0, uniform01(rng) * 2.0 - 0.5);
    const auto c = mask_correlation(Tensor::from({d, k}, v, DType::f64)).c;
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) {
        double ab = 0, aa = 0, bb = 0;
        for (std::size_t j = 0; j < d; ++j) {
          ab += v[j * k + a] * v[j * k + b];
          aa += v[j * k + a] * v[j * k + a];
          bb += v[j * k + b] * v[j * k + b];
        }
        const double expected = (aa == 0 || bb == 0) ? 0.0 : ab / std::sqrt(aa * bb);
        EXPECT_NEAR(c(a, b), expected, 1e-12);
        EXPECT_EQ(c(a, b), c(b, a));
        EXPECT_GE(c(a, b), 0.0);
        EXPECT_LE(c(a, b), 1.0 + 1e-12);
      }
    }
  }
}

TEST(MaskCorrelationTest, ZeroColumnIsReported) {
  const auto mc = mask_correlation(Tensor::from({2, 2}, {1, 0, 1, 0}, DType::f64));
  EXPECT_EQ(mc.zero_columns, std::vector<std::size_t>{1});
  EXPECT_EQ(mc.c(0, 1), 0.0);
  EXPECT_EQ(mc.c(0, 0), 1.0);
}

TEST(Uncertainty, TwoImagesMapToTheEndpoints) {
  const auto s = rescale_traces({3.0, 7.0});
  EXPECT_EQ(s.scores, (std::vector<double>{0.0, 1.0}));
  EXPECT_FALSE(s.degenerate);
}

TEST(Uncertainty, ScoresFollowPermutations) {
  const std::vector<double> t{4.0, 1.0, 9.0, 2.5, 6.0};
  const auto a = rescale_traces(t);
  const auto b = rescale_traces({t[4], t[3], t[2], t[1], t[0]});
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(a.scores[i], b.scores[t.size() - 1 - i]);
  for (double v : a.scores) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Uncertainty, EqualTracesGiveOneHalf) {
  const auto s = rescale_traces({2.0, 2.0, 2.0});
  EXPECT_TRUE(s.degenerate);
  for (double v : s.scores) EXPECT_EQ(v, 0.5);
  EXPECT_THROW(rescale_traces({1.0}), ContractError);
}

TEST(Uncertainty, ModelScoresAreTraceRescalings) {
  Model model(small_model(), 12);
  const auto images = small_data(10).images();
  const auto s = uncertainty_score(model, images);
  const auto var = embeddings(model, images).var;
  for (std::size_t i = 0; i < images.size(); ++i) {
    double tr = 0.0;
    for (double v : var.row(i)) tr += v;
    EXPECT_NEAR(s.traces[i], tr, 1e-9);
  }
  EXPECT_THROW(uncertainty_score(model, {images[0]}), ContractError);
}

TEST(Uncertainty, PermutationTestSeparatesShiftedGroups) {
  std::vector<double> lo, hi;
  for (int i = 0; i < 40; ++i) {
    lo.push_back(0.01 * i);
    hi.push_back(0.01 * i + 0.3);
  }
  EXPECT_LT(permutation_p_value(hi, lo, 1, 2000), 0.01);
  EXPECT_GT(permutation_p_value(lo, hi, 1, 2000), 0.9);
  EXPECT_GT(permutation_p_value(lo, lo, 1, 2000), 0.3);
}

TEST(Uncertainty, StrengthExperimentIsBalancedAndDeterministic) {
  Model model(small_model(), 13);
  const auto images = small_data(40).images();
  const auto specs = default_specs(augmentation_set("mast5"));
  const auto a = uncertainty_vs_strength(model, specs, images, 3, 200);
  const auto b = uncertainty_vs_strength(model, specs, images, 3, 200);
  EXPECT_EQ(a.scores, b.scores);
  EXPECT_EQ(a.p_value, b.p_value);
  ASSERT_EQ(a.strength.size(), 40u);
  auto sorted = a.strength;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_DOUBLE_EQ(sorted.front(), 0.5 / 40);
  EXPECT_DOUBLE_EQ(sorted.back(), 39.5 / 40);
}

TEST(SubspaceClass, ShapeAndMaskCases) {
  Model model(small_model(3), 14);
  std::vector<double> u(24, 1.0);
  for (std::size_t j = 0; j < 8; ++j) u[j * 3 + 2] = -1.0;  // column 2 zero, columns 0 and 1 all ones
  set_masks(model, u);
  const Dataset ds = small_data(120);
  ProbeOptions opt;
  opt.epochs = 30;
  const auto r = subspace_class_prediction(model, ds.images(), ds.labels(), opt);
  ASSERT_GT(r.correct, 0u);
  EXPECT_EQ(r.values.rows, 3u);
  EXPECT_EQ(r.values.cols, ds.num_classes());
  for (std::size_t c = 0; c < r.values.cols; ++c) {
    if (std::isnan(r.values(0, c))) continue;
    EXPECT_EQ(r.values(0, c), r.values(1, c));
    EXPECT_EQ(r.values(2, c), 0.0);
  }
}

TEST(SubspaceClass, MaskFreeModelWarns) {
  Model model(small_model(0), 15);
  const Dataset ds = small_data(40);
  const auto r = subspace_class_prediction(model, ds.images(), ds.labels());
  EXPECT_EQ(r.values.rows, 0u);
  EXPECT_FALSE(r.warnings.empty());
}

TEST(Report, CsvAndRenderers) {
  const fs::path dir = fs::temp_directory_path() / "mast_report_test";
  fs::remove_all(dir);
  Matrix m(2, 2);
  m(0, 0) = 1.0;
  m(0, 1) = 0.25;
  m(1, 0) = 0.25;
  m(1, 1) = std::nan("");
  write_matrix_csv(dir / "m.csv", m, {"a", "b"}, {"a", "b"});
  EXPECT_EQ(slurp(dir / "m.csv"), "row,a,b\na,1,0.25\nb,0.25,nan\n");
  EXPECT_THROW(write_matrix_csv(dir / "bad.csv", m, {"a"}, {"a", "b"}), ContractError);

  InvarianceCurve curve;
  curve.magnitudes = {0.0, 1.0};
  curve.unmasked = {1.0, 0.5};
  curve.subspace = {{1.0, 0.75}};
  write_curve_csv(dir / "c.csv", curve, {"ColorJitter"});
  EXPECT_EQ(slurp(dir / "c.csv"), "magnitude,unmasked,ColorJitter\n0,1,1\n1,0.5,0.75\n");

  render_heatmap_ppm(dir / "h.ppm", m, 0.0, 1.0, 4);
  const std::string ppm = slurp(dir / "h.ppm");
  EXPECT_EQ(ppm.rfind("P6\n8 8\n255\n", 0), 0u);
  EXPECT_EQ(ppm.size(), std::string("P6\n8 8\n255\n").size() + 8 * 8 * 3);

  render_heatmap_svg(dir / "h.svg", m, {"a", "b"}, 0.0, 1.0);
  render_curves_svg(dir / "c.svg", curve.magnitudes, {{"unmasked", curve.unmasked}}, "t < 1");
  for (const char* f : {"h.svg", "c.svg"}) {
    const std::string svg = slurp(dir / f);
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
  }
  EXPECT_NE(slurp(dir / "c.svg").find("t &lt; 1"), std::string::npos);
}

TEST(Report, ColormapEndpoints) {
  EXPECT_EQ(colormap(0.0), (std::array<unsigned char, 3>{68, 1, 84}));
  EXPECT_EQ(colormap(1.0), (std::array<unsigned char, 3>{253, 231, 37}));
  EXPECT_EQ(colormap(2.0), colormap(1.0));
}
