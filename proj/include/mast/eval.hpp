#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mast/augment.hpp"
#include "mast/image.hpp"
#include "mast/model.hpp"

namespace mast {

/// Row-major dense matrix of doubles, used for frozen features.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

/// Frozen encoder outputs y for every image, evaluated without gradients.
Matrix representations(const Model& model, const std::vector<Image>& images);

struct EmbeddingBatch {
  Matrix mu;
  Matrix var;
};
EmbeddingBatch embeddings(const Model& model, const std::vector<Image>& images);

struct ProbeOptions {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  std::size_t holdout_every = 5;  // every n-th sample is held out for testing
};

/// Softmax regression on standardized features (training-set mean and
/// standard deviation).
struct LinearClassifier {
  std::size_t classes = 0;
  std::vector<double> mean;
  std::vector<double> scale;   // 1 / std, 1 for constant columns
  Matrix weight;               // classes x dim
  std::vector<double> bias;

  std::vector<double> logits(std::span<const double> x) const;
  std::size_t predict(std::span<const double> x) const;
};

LinearClassifier fit_softmax(const Matrix& x, std::span<const std::size_t> labels,
                             std::size_t classes, const ProbeOptions& opt);

struct ProbeResult {
  double top1 = 0.0;
  std::vector<double> per_class;                     // NaN for classes absent from the test set
  std::vector<std::vector<std::size_t>> confusion;   // [true][predicted]
  std::size_t train_size = 0;
  std::size_t test_size = 0;
};

ProbeResult evaluate_classifier(const LinearClassifier& clf, const Matrix& x,
                                std::span<const std::size_t> labels);

/// Fits on the training rows and reports held-out accuracy. Rows whose index
/// is a multiple of opt.holdout_every (offset holdout_every - 1) are held out.
ProbeResult probe_features(const Matrix& x, std::span<const std::size_t> labels,
                           std::size_t classes, const ProbeOptions& opt);

/// Linear classification of frozen representations.
ProbeResult linear_probe(const Model& model, const std::vector<Image>& images,
                         std::span<const std::size_t> labels, const ProbeOptions& opt = {});

/// Every image is rotated by each listed quarter turn and labeled with the
/// turn's position in the list. Held-out images contribute all their
/// rotations to the test set.
ProbeResult rotation_probe(const Model& model, const std::vector<Image>& images,
                           const ProbeOptions& opt = {}, std::vector<int> quarter_turns = {0, 1, 2, 3});

/// Magnitudes from the operator's identity to the far end of its sampling
/// range, `points` evenly spaced values.
std::vector<double> magnitude_grid(const AugSpec& spec, std::size_t points);

struct InvarianceCurve {
  AugOp op = AugOp::ColorJitter;
  std::vector<double> magnitudes;
  std::vector<std::vector<double>> subspace;  // [mask column][magnitude]
  std::vector<double> unmasked;               // cos(mu(aug x), mu(x))
  std::vector<std::size_t> skipped;           // zero-norm samples per mask column
};

/// Mean cosine similarity between embeddings of augmented and original
/// samples, per mask column and unmasked.
InvarianceCurve invariance_metric(const Model& model, const AugSpec& spec,
                                  std::span<const double> magnitudes,
                                  const std::vector<Image>& samples, std::uint64_t seed);

struct MaskCorrelation {
  Matrix c;
  std::vector<std::size_t> zero_columns;
};

MaskCorrelation mask_correlation(const Tensor& masks);
inline MaskCorrelation mask_correlation(const Model& model) {
  return mask_correlation(model.bank.masks());
}

struct UncertaintyScores {
  std::vector<double> traces;
  std::vector<double> scores;  // traces rescaled to [0,1] over this batch
  bool degenerate = false;     // all traces equal; every score is 0.5
};

UncertaintyScores uncertainty_score(const Model& model, const std::vector<Image>& images);
UncertaintyScores rescale_traces(std::vector<double> traces);

struct UncertaintyExperiment {
  std::vector<double> strength;  // per sample, in [0,1]
  std::vector<double> scores;
  double weak_mean = 0.0;        // bottom strength quartile
  double strong_mean = 0.0;      // top strength quartile
  double p_value = 1.0;          // one-sided permutation test, strong > weak
  bool degenerate = false;
};

/// Augments each sample with every continuous operator of `specs` at one
/// shared random strength, scores the views and compares the strength
/// quartiles.
UncertaintyExperiment uncertainty_vs_strength(const Model& model, std::span<const AugSpec> specs,
                                              const std::vector<Image>& samples, std::uint64_t seed,
                                              std::size_t permutations = 10000);

/// One-sided permutation test of mean(a) > mean(b).
double permutation_p_value(std::span<const double> a, std::span<const double> b, std::uint64_t seed,
                           std::size_t permutations);

struct SubspaceClassPrediction {
  Matrix values;                   // mask columns x classes; NaN where no sample qualified
  std::size_t correct = 0;         // correctly classified held-out samples used
  std::vector<std::string> warnings;
};

/// Trains a linear classifier on mu, then averages w_y . (mu * m_k) over the
/// correctly classified held-out samples of each class.
SubspaceClassPrediction subspace_class_prediction(const Model& model, const std::vector<Image>& images,
                                                  std::span<const std::size_t> labels,
                                                  const ProbeOptions& opt = {});

nlohmann::json to_json(const ProbeResult& r);
nlohmann::json to_json(const InvarianceCurve& c);
nlohmann::json to_json(const MaskCorrelation& m);
nlohmann::json to_json(const UncertaintyExperiment& e);
nlohmann::json to_json(const SubspaceClassPrediction& s);

}  // namespace mast
